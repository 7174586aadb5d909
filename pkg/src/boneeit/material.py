"""Material models for carbon-fibre filled bone cement.

* percolation law for DC conductivity against fibre volume fraction,
* saturating negative piezoresistive response to compressive load,
* an R_s-L_s series / R_p||C_p equivalent circuit for impedance spectra.

Default percolation and load-law parameters are illustrative; only their
ordering and the 1.5 vol.% knee are meant to be representative.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import qmc


class FitError(RuntimeError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


def polar_to_complex(magnitude, theta):
    """Real and imaginary impedance parts from magnitude and phase (rad)."""
    magnitude = np.asarray(magnitude, dtype=float)
    if np.any(magnitude < 0):
        raise ValueError("impedance magnitude must be non-negative")
    return magnitude * np.cos(theta), magnitude * np.sin(theta)


def complex_to_polar(z_real, z_imag):
    return np.hypot(z_real, z_imag), np.arctan2(z_imag, z_real)


@dataclass(frozen=True)
class PercolationModel:
    sigma_below: float = 1.5e-3  # S/m
    sigma_scale: float = 100.0  # S/m
    v_c: float = 0.015
    t: float = 2.0

    def __post_init__(self):
        if not 0 < self.v_c < 1:
            raise ValueError(f"v_c must lie in (0, 1), got {self.v_c}")
        if not self.t > 0:
            raise ValueError(f"critical exponent must be positive, got {self.t}")
        if not (self.sigma_below > 0 and self.sigma_scale > 0):
            raise ValueError("conductivities must be positive")


def percolation_sigma(model: PercolationModel, v):
    """Conductivity (S/m) at filler volume fraction `v`.

    Constant ``sigma_below`` up to the threshold, then
    ``sigma_below + sigma_scale * (v - v_c)**t``.
    """
    v = np.asarray(v, dtype=float)
    if np.any((v < 0) | (v >= 1)):
        raise ValueError("volume fraction must lie in [0, 1)")
    excess = np.clip(v - model.v_c, 0.0, None)
    out = model.sigma_below + model.sigma_scale * excess ** model.t
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PiezoModel:
    saturation_drop: float = 0.15
    load_scale: float = 800.0  # N

    def __post_init__(self):
        if not 0 < self.saturation_drop < 1:
            raise ValueError(f"saturation_drop must lie in (0, 1), got {self.saturation_drop}")
        if not self.load_scale > 0:
            raise ValueError(f"load_scale must be positive, got {self.load_scale}")


def piezo_factor(model: PiezoModel, load):
    """Normalised conductivity ``sigma(F) / sigma(0)`` under compressive load `F` (N)."""
    load = np.asarray(load, dtype=float)
    if np.any(load < 0):
        raise ValueError("load must be non-negative")
    out = 1.0 - model.saturation_drop * -np.expm1(-load / model.load_scale)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CircuitParams:
    R_p: float  # ohm
    R_s: float  # ohm
    C_p: float  # F
    L_s: float  # H

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not (val > 0 and math.isfinite(val)):
                raise ValueError(f"{name} must be positive, got {val}")

    def as_array(self) -> np.ndarray:
        return np.array([self.R_p, self.R_s, self.C_p, self.L_s])


# Equivalent circuit fits reported for the six EIS specimens.
TABLE_I = {
    "1.0 vol.% specimen 1": CircuitParams(432.50, 83.26, 18.66e-10, 1.66e-6),
    "1.0 vol.% specimen 2": CircuitParams(601.52, 92.74, 16.46e-10, 2.10e-6),
    "1.5 vol.% specimen 1": CircuitParams(183.89, 53.31, 32.54e-10, 1.42e-6),
    "1.5 vol.% specimen 2": CircuitParams(240.89, 64.83, 22.10e-10, 1.49e-6),
    "2.0 vol.% specimen 1": CircuitParams(36.08, 72.63, 2.37e-10, 1.19e-6),
    "2.0 vol.% specimen 2": CircuitParams(38.15, 138.56, 2.35e-10, 1.13e-6),
}


def circuit_impedance(p: CircuitParams, f):
    """``Z(f) = R_s + j w L_s + R_p / (1 + j w R_p C_p)`` with ``w = 2 pi f``."""
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0):
        raise ValueError("frequency must be positive")
    w = 2 * np.pi * f
    return p.R_s + 1j * w * p.L_s + p.R_p / (1 + 1j * w * p.R_p * p.C_p)


@dataclass(frozen=True)
class ImpedanceSpectrum:
    frequency: np.ndarray  # Hz
    z: np.ndarray  # complex ohm

    def __post_init__(self):
        f = np.asarray(self.frequency, dtype=float)
        z = np.asarray(self.z, dtype=complex)
        if f.ndim != 1 or f.shape != z.shape:
            raise ValueError("frequency and impedance must be 1-D arrays of equal length")
        if np.any(f <= 0) or np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be positive and strictly increasing")
        object.__setattr__(self, "frequency", f)
        object.__setattr__(self, "z", z)

    @classmethod
    def from_polar(cls, frequency, magnitude, theta):
        re, im = polar_to_complex(magnitude, theta)
        return cls(frequency, re + 1j * im)


@dataclass(frozen=True)
class CircuitFit:
    params: CircuitParams
    residual: float  # root of summed squared complex residuals, ohm
    point_residuals: np.ndarray  # complex, ohm
    n_starts: int
    n_converged: int


def _initial_guess(spec: ImpedanceSpectrum) -> np.ndarray:
    f, z = spec.frequency, spec.z
    w = 2 * np.pi * f
    r_s = max(float(z.real[-1]), 1e-3 * float(np.abs(z).max()))
    r_p = max(float(z.real[0]) - r_s, 1e-2 * r_s)
    # the R_p||C_p arc peaks where w R_p C_p = 1
    k = int(np.argmin(z.imag))
    c_p = 1.0 / (w[k] * r_p) if z.imag[k] < 0 else 1.0 / (w[-1] * r_p)
    l_s = max(float(z.imag[-1]), 1e-3 * float(np.abs(z[-1]))) / w[-1]
    return np.log([r_p, r_s, c_p, l_s])


def _model(logp: np.ndarray, f: np.ndarray) -> np.ndarray:
    # far-off starts can overflow; LM then rejects the step
    with np.errstate(over="ignore", invalid="ignore"):
        r_p, r_s, c_p, l_s = np.exp(logp)
        w = 2 * np.pi * f
        return r_s + 1j * w * l_s + r_p / (1 + 1j * w * r_p * c_p)


def fit_circuit(spec: ImpedanceSpectrum, n_starts: int = 8, spread: float = 2.0) -> CircuitFit:
    """Least-squares fit of the equivalent circuit to a spectrum.

    Parameters are fitted in log space. Starts are the heuristic initial
    guess and deterministic quasi-random offsets of up to `spread` decades
    around it; the best converged result is returned.

    Raises
    ------
    ValueError
        Fewer than 8 points or less than two decades of frequency.
    FitError
        No start converged.
    """
    f, z = spec.frequency, spec.z
    if len(f) < 8 or f[-1] / f[0] < 100:
        raise ValueError("need at least 8 points spanning at least two decades")
    x0 = _initial_guess(spec)
    offsets = qmc.Halton(d=4, scramble=False).random(n_starts)
    offsets = (2 * offsets - 1) * spread * np.log(10)
    offsets[0] = 0.0

    def resid(logp):
        d = _model(logp, f) - z
        out = np.concatenate([d.real, d.imag])
        return np.where(np.isfinite(out), out, 1e100)

    best = None
    n_ok = 0
    for off in offsets:
        r = least_squares(resid, x0 + off, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                          max_nfev=4000)
        if r.success and np.all(np.isfinite(r.x)):
            n_ok += 1
            if best is None or r.cost < best.cost:
                best = r
    if best is None:
        raise FitError("no multi-start run converged")
    params = CircuitParams(*np.exp(best.x))
    pr = circuit_impedance(params, f) - z
    return CircuitFit(params, float(np.sqrt(np.sum(np.abs(pr) ** 2))), pr, n_starts, n_ok)


def read_spectrum(path) -> ImpedanceSpectrum:
    """Read a spectrum CSV in polar (``Z_abs_ohm, theta_rad``) or rectangular form."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                rows.append([float(v) for v in rec])
            except ValueError:
                raise ValueError(f"{path}: line {line}: malformed record {rec!r}") from None
    if len(header) != 3 or header[0] != "frequency_Hz":
        raise ValueError(f"{path}: unrecognised header {header!r}")
    a = np.array(rows, dtype=float).reshape(-1, 3)
    if header[1:] == ["Z_abs_ohm", "theta_rad"]:
        return ImpedanceSpectrum.from_polar(a[:, 0], a[:, 1], a[:, 2])
    if header[1:] == ["Z_real_ohm", "Z_imag_ohm"]:
        return ImpedanceSpectrum(a[:, 0], a[:, 1] + 1j * a[:, 2])
    raise ValueError(f"{path}: unrecognised header {header!r}")


def write_spectrum(path, spec: ImpedanceSpectrum, polar: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if polar:
            mag, th = complex_to_polar(spec.z.real, spec.z.imag)
            w.writerow(["frequency_Hz", "Z_abs_ohm", "theta_rad"])
            cols = zip(spec.frequency, mag, th)
        else:
            w.writerow(["frequency_Hz", "Z_real_ohm", "Z_imag_ohm"])
            cols = zip(spec.frequency, spec.z.real, spec.z.imag)
        for row in cols:
            w.writerow([repr(float(v)) for v in row])


def fit_report(fit: CircuitFit, spec: ImpedanceSpectrum) -> str:
    doc = {
        "params": asdict(fit.params),
        "residual_ohm": fit.residual,
        "starts": fit.n_starts,
        "converged_starts": fit.n_converged,
        "points": [
            {"frequency_Hz": float(f), "residual_real_ohm": float(r.real), "residual_imag_ohm": float(r.imag)}
            for f, r in zip(spec.frequency, fit.point_residuals)
        ],
    }
    return json.dumps(doc, indent=1) + "\n"
