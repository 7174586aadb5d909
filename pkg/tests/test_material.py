import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boneeit.material import (TABLE_I, CircuitParams, FitError, ImpedanceSpectrum, PercolationModel, PiezoModel,
                              circuit_impedance, complex_to_polar, fit_circuit, percolation_sigma, piezo_factor,
                              polar_to_complex, read_spectrum, write_spectrum)
from boneeit.phantom import LOAD_LADDER

F30 = np.logspace(3, 7, 30)


def test_polar_examples():
    assert polar_to_complex(100, 0) == (100, 0)
    re, im = polar_to_complex(100, math.pi / 2)
    assert abs(re) < 1e-12 and im == 100
    re, im = polar_to_complex(50, math.pi / 4)
    assert re == pytest.approx(35.35533905932738, rel=1e-15)
    assert im == pytest.approx(35.35533905932738, rel=1e-15)
    with pytest.raises(ValueError):
        polar_to_complex(-1.0, 0.0)


@given(st.floats(1e-6, 1e9), st.floats(-math.pi + 1e-9, math.pi))
def test_polar_round_trip(mag, theta):
    m2, t2 = complex_to_polar(*polar_to_complex(mag, theta))
    assert abs(m2 - mag) <= 1e-12 * mag
    assert abs(t2 - theta) <= 1e-12 * math.pi


def hand_impedance(p, f):
    """Expanded real/imaginary parts of the series-RL plus parallel-RC circuit."""
    w = 2 * math.pi * f
    x = w * p.R_p * p.C_p
    return complex(p.R_s + p.R_p / (1 + x * x), w * p.L_s - p.R_p * x / (1 + x * x))


def test_low_frequency_limit():
    z = circuit_impedance(TABLE_I["1.0 vol.% specimen 1"], 1e-3)
    assert z.real == pytest.approx(515.76, rel=1e-9)


def test_high_frequency_limit():
    p = TABLE_I["1.0 vol.% specimen 1"]
    z = circuit_impedance(p, 1e12)
    assert z.real == pytest.approx(p.R_s, rel=1e-6)
    assert z.imag == pytest.approx(2 * math.pi * 1e12 * p.L_s, rel=1e-6)


def test_one_kilohertz_against_hand_evaluation():
    p = TABLE_I["1.0 vol.% specimen 1"]
    z = complex(circuit_impedance(p, 1e3))
    # direct complex arithmetic with the standard library
    w = 2 * math.pi * 1e3
    ref = p.R_s + 1j * w * p.L_s + 1 / (1 / p.R_p + 1j * w * p.C_p)
    assert cmath.isclose(z, ref, rel_tol=1e-14)
    assert cmath.isclose(z, hand_impedance(p, 1e3), rel_tol=1e-14)


@pytest.mark.parametrize("name", list(TABLE_I))
def test_reactance_sign_changes(name):
    p = TABLE_I[name]
    f = np.logspace(0, 10, 20001)
    crossings = np.count_nonzero(np.diff(np.sign(circuit_impedance(p, f).imag)))
    # capacitive at low frequency only if R_p^2 C_p exceeds L_s
    assert crossings == (1 if p.R_p ** 2 * p.C_p > p.L_s else 0)


@pytest.mark.parametrize("name", list(TABLE_I))
def test_noiseless_round_trip(name):
    p = TABLE_I[name]
    fit = fit_circuit(ImpedanceSpectrum(F30, circuit_impedance(p, F30)))
    assert np.all(np.abs(fit.params.as_array() / p.as_array() - 1) <= 1e-3)
    assert fit.n_converged >= 1


def test_noisy_recovery_below_percolation():
    p = TABLE_I["1.5 vol.% specimen 1"]
    z = circuit_impedance(p, F30)
    errs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        noisy = z.real * (1 + 0.01 * rng.standard_normal(30)) + 1j * z.imag * (1 + 0.01 * rng.standard_normal(30))
        errs.append(np.abs(fit_circuit(ImpedanceSpectrum(F30, noisy)).params.as_array() / p.as_array() - 1))
    assert np.median(errs, axis=0).max() <= 0.10


def test_pure_resistor():
    fit = fit_circuit(ImpedanceSpectrum(F30, np.full(30, 250.0 + 0j)))
    p = fit.params
    assert p.R_p + p.R_s == pytest.approx(250.0, rel=1e-3)
    model = circuit_impedance(p, F30)
    assert np.abs(model - 250.0).max() <= 1e-3 * 250.0


def test_fit_rejects_thin_spectra():
    p = TABLE_I["1.0 vol.% specimen 1"]
    f = np.logspace(3, 7, 7)
    with pytest.raises(ValueError):
        fit_circuit(ImpedanceSpectrum(f, circuit_impedance(p, f)))
    f = np.logspace(3, 4.5, 20)
    with pytest.raises(ValueError):
        fit_circuit(ImpedanceSpectrum(f, circuit_impedance(p, f)))


def test_fit_error_carries_best():
    err = FitError("no start converged", best=3.0)
    assert isinstance(err, RuntimeError) and err.best == 3.0


def test_params_validated():
    with pytest.raises(ValueError):
        CircuitParams(1.0, -1.0, 1e-9, 1e-6)


@pytest.mark.parametrize("polar", [False, True])
def test_spectrum_file_round_trip(tmp_path, polar):
    spec = ImpedanceSpectrum(F30, circuit_impedance(TABLE_I["2.0 vol.% specimen 2"], F30))
    write_spectrum(tmp_path / "s.csv", spec, polar=polar)
    back = read_spectrum(tmp_path / "s.csv")
    assert np.allclose(back.z, spec.z, rtol=1e-13)
    assert np.array_equal(back.frequency, spec.frequency)


def test_spectrum_bad_header(tmp_path):
    (tmp_path / "s.csv").write_text("f,a,b\n1,2,3\n")
    with pytest.raises(ValueError, match="header"):
        read_spectrum(tmp_path / "s.csv")


def test_percolation():
    m = PercolationModel()
    assert percolation_sigma(m, 0.0) == m.sigma_below
    assert percolation_sigma(m, m.v_c) == m.sigma_below
    assert percolation_sigma(m, 0.02) > percolation_sigma(m, 0.015)
    # flat below the threshold, so 1.0 and 1.5 vol.% coincide
    assert percolation_sigma(m, 0.015) == percolation_sigma(m, 0.01)
    assert percolation_sigma(m, 0.02) == pytest.approx(m.sigma_below + m.sigma_scale * 0.005 ** 2)
    with pytest.raises(ValueError):
        percolation_sigma(m, 1.0)


@given(st.floats(0, 0.99), st.floats(0, 0.99))
def test_percolation_monotone(a, b):
    m = PercolationModel()
    lo, hi = sorted((a, b))
    assert percolation_sigma(m, lo) <= percolation_sigma(m, hi)


def test_piezo_examples():
    m = PiezoModel()
    assert piezo_factor(m, 0.0) == 1.0
    g = piezo_factor(m, np.array(LOAD_LADDER))
    assert np.all(np.diff(g) < 0)
    assert abs(piezo_factor(m, 3100.0) - piezo_factor(m, 4000.0)) < 0.02 * m.saturation_drop
    assert piezo_factor(m, 1e7) == pytest.approx(1 - m.saturation_drop)
    with pytest.raises(ValueError):
        piezo_factor(m, -1.0)


@settings(max_examples=50)
@given(st.floats(0, 1e5), st.floats(0, 1e5))
def test_piezo_monotone_and_bounded(a, b):
    m = PiezoModel()
    lo, hi = sorted((a, b))
    assert 1 - m.saturation_drop <= piezo_factor(m, hi) <= piezo_factor(m, lo) <= 1.0
