"""Sensitivity (Jacobian) of protocol voltages with respect to element conductivity."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .forward import DEFAULT_CONTACT_IMPEDANCE, ForwardSolver, Protocol, conductivity
from .mesh import Mesh

_MAGIC = b"BEITJAC1"


@dataclass(frozen=True)
class SensitivityMatrix:
    entries: np.ndarray  # (n_measurements, n_elements), V per S/m
    background: np.ndarray  # conductivity the system was linearised at

    @property
    def shape(self):
        return self.entries.shape

    def __matmul__(self, other):
        return self.entries @ other


def _unit_patterns(pairs, n_el: int) -> np.ndarray:
    cur = np.zeros((len(pairs), n_el))
    for k, (a, b) in enumerate(pairs):
        cur[k, a] = 1.0
        cur[k, b] = -1.0
    return cur


def compute_jacobian(mesh: Mesh, sigma0, z=DEFAULT_CONTACT_IMPEDANCE, protocol: Protocol | None = None,
                     solver: ForwardSolver | None = None) -> SensitivityMatrix:
    """Jacobian of the protocol voltages at `sigma0` by the adjoint-field method.

    For measurement ``V[a] - V[b]`` under drive pattern ``I``, the derivative
    with respect to the conductivity of element ``e`` is
    ``-area_e * grad(u_I) . grad(u_ab)`` where ``u_ab`` is the field for a unit
    current entering at ``a`` and leaving at ``b``.
    """
    if protocol is None:
        raise ValueError("a measurement protocol is required")
    sigma0 = conductivity(mesh, sigma0)
    if solver is None:
        solver = ForwardSolver(mesh, sigma0, z)
    n_el = mesh.n_electrodes

    phi_drive, _ = solver.solve(protocol.current_patterns())
    pairs = sorted({p for ms in protocol.measure_pairs for p in ms})
    phi_meas, _ = solver.solve(_unit_patterns(pairs, n_el))
    col = {p: k for k, p in enumerate(pairs)}

    g = mesh.shape_gradients  # (E, 3, 2)
    el = mesh.elements
    grad_drive = np.einsum("eik,pei->pek", g, phi_drive[:, el])  # (P, E, 2)
    grad_meas = np.einsum("eik,pei->pek", g, phi_meas[:, el])

    idx = protocol.measurement_index()
    mcols = np.array([col[(a, b)] for a, b in idx[:, 2:]], dtype=np.int64)
    jac = -np.einsum("rek,rek->re", grad_drive[idx[:, 0]], grad_meas[mcols]) * mesh.areas
    return SensitivityMatrix(jac, sigma0)


def finite_difference_jacobian(mesh: Mesh, sigma0, z=DEFAULT_CONTACT_IMPEDANCE, protocol: Protocol | None = None,
                               rel_step: float = 1e-6, central: bool = True,
                               columns=None) -> np.ndarray:
    """Brute-force Jacobian by perturbing one element at a time and re-solving.

    Each perturbed system ``K(sigma + d e_k)`` is assembled and factorised
    from scratch. It is solved for the change of the solution,
    ``K(sigma + d e_k) dx = -d K_k x0``, which is algebraically identical to
    differencing two full solves but keeps float64 cancellation out of the
    quotient. Slow; meant as a check on :func:`compute_jacobian`.
    """
    if protocol is None:
        raise ValueError("a measurement protocol is required")
    sigma0 = conductivity(mesh, sigma0)
    cols = range(mesh.n_elements) if columns is None else list(columns)
    n, n_el = mesh.n_nodes, mesh.n_electrodes
    base = ForwardSolver(mesh, sigma0, z)
    rhs = np.zeros((base.size, len(protocol.drive_pairs)))
    rhs[n:n + n_el] = protocol.current_patterns().T
    x0 = base.solve_system(rhs)
    idx = protocol.measurement_index()
    g = mesh.shape_gradients
    steps = (1.0, -1.0) if central else (1.0,)

    out = np.empty((len(protocol), len(cols)))
    for k, e in enumerate(cols):
        nodes = mesh.elements[e]
        k_e = mesh.areas[e] * g[e] @ g[e].T
        h = rel_step * sigma0[e]
        dv = []
        for sgn in steps:
            pert = sigma0.copy()
            pert[e] += sgn * h
            r = np.zeros_like(rhs)
            r[nodes] = -(sgn * h) * (k_e @ x0[nodes])
            v = ForwardSolver(mesh, pert, z).solve_system(r)[n:n + n_el].T
            dv.append(v[idx[:, 0], idx[:, 2]] - v[idx[:, 0], idx[:, 3]])
        out[:, k] = (dv[0] - dv[1]) / (2 * h) if central else dv[0] / h
    return out


def save_jacobian(jac: SensitivityMatrix | np.ndarray, path) -> None:
    """Binary dump: 8-byte magic, two little-endian uint64 dims, row-major float64."""
    a = np.ascontiguousarray(getattr(jac, "entries", jac), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<QQ", *a.shape))
        fh.write(a.tobytes())


def load_jacobian(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a Jacobian dump")
    rows, cols = struct.unpack("<QQ", data[8:24])
    body = data[24:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows}x{cols} entries, file is truncated or padded")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()
