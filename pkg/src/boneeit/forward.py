"""Complete-electrode-model forward solver on linear triangles.

The discrete system couples node potentials ``phi`` and electrode voltages
``V``::

    [ A_M + A_Z   A_W ] [phi]   [0]
    [ A_W^T       A_D ] [ V ] = [I]

It is singular up to an additive constant, which is removed by appending the
constraint ``sum(V) = 0`` as an extra row and column (a Lagrange multiplier).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh

DEFAULT_AMPLITUDE = 25e-6  # A
DEFAULT_CONTACT_IMPEDANCE = 1e-3  # ohm m


class ForwardError(ValueError):
    pass


class SingularSystemError(ForwardError, ArithmeticError):
    """The grounded CEM system could not be factorised or solved accurately."""


class ProtocolError(ForwardError):
    pass


def conductivity(mesh: Mesh, values) -> np.ndarray:
    """Validate a per-element conductivity field (S/m) and return it as an array."""
    sigma = np.asarray(values, dtype=float)
    if sigma.ndim == 0:
        sigma = np.full(mesh.n_elements, float(sigma))
    if sigma.shape != (mesh.n_elements,):
        raise ForwardError(
            f"conductivity has {sigma.size} values, mesh has {mesh.n_elements} elements"
        )
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ForwardError("conductivity values must be finite and positive")
    return sigma


def contact_impedances(mesh: Mesh, values=DEFAULT_CONTACT_IMPEDANCE) -> np.ndarray:
    z = np.asarray(values, dtype=float)
    if z.ndim == 0:
        z = np.full(mesh.n_electrodes, float(z))
    if z.shape != (mesh.n_electrodes,):
        raise ForwardError(f"got {z.size} contact impedances for {mesh.n_electrodes} electrodes")
    if not np.all(np.isfinite(z)) or np.any(z <= 0):
        raise ForwardError("contact impedances must be finite and positive")
    return z


def current_patterns(values, n_electrodes: int) -> np.ndarray:
    """Validate injected current patterns, shape (n_patterns, n_electrodes).

    Each pattern must conserve charge: ``|sum(I)| <= 1e-15 * max|I|``.
    """
    cur = np.atleast_2d(np.asarray(values, dtype=float))
    if cur.shape[1] != n_electrodes:
        raise ForwardError(f"current pattern has {cur.shape[1]} entries, expected {n_electrodes}")
    scale = np.abs(cur).max(axis=1)
    leak = np.abs(cur.sum(axis=1))
    bad = np.flatnonzero(leak > 1e-15 * scale)
    if bad.size:
        raise ForwardError(f"current pattern {int(bad[0])} does not sum to zero (sum={leak[bad[0]]:.3g} A)")
    return cur


@dataclass(frozen=True)
class CEMSystem:
    """Assembled blocks of the complete electrode model.

    ``a_w`` is stored with shape (n_nodes, n_electrodes), i.e. as the upper
    right block of the system matrix.
    """

    a_m: sp.csr_matrix
    a_z: sp.csr_matrix
    a_w: sp.csr_matrix
    a_d: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.a_m.shape[0]

    def matrix(self) -> sp.csr_matrix:
        """The full symmetric (n_nodes + L) square system matrix."""
        return sp.bmat(
            [[self.a_m + self.a_z, self.a_w], [self.a_w.T, sp.diags(self.a_d)]], format="csr"
        )


def stiffness_matrix(mesh: Mesh, sigma: np.ndarray) -> sp.csr_matrix:
    g = mesh.shape_gradients
    local = np.einsum("eik,ejk->eij", g, g) * (sigma * mesh.areas)[:, None, None]
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble_system(mesh: Mesh, sigma, z) -> CEMSystem:
    sigma = conductivity(mesh, sigma)
    z = contact_impedances(mesh, z)
    n, n_el = mesh.n_nodes, mesh.n_electrodes
    a_m = stiffness_matrix(mesh, sigma)

    zr, zc, zv = [], [], []
    wr, wc, wv = [], [], []
    a_d = np.empty(n_el)
    for l, e in enumerate(mesh.electrodes):
        a, b = e.boundary_edges.T
        ln = e.edge_lengths(mesh.nodes) / z[l]
        # int w_i w_j over an edge of length h: h/3 on the diagonal, h/6 off it
        zr += [a, b, a, b]
        zc += [a, b, b, a]
        zv += [ln / 3, ln / 3, ln / 6, ln / 6]
        wr += [a, b]
        wc += [np.full_like(a, l), np.full_like(b, l)]
        wv += [-ln / 2, -ln / 2]
        a_d[l] = ln.sum()
    a_z = sp.csr_matrix((np.concatenate(zv), (np.concatenate(zr), np.concatenate(zc))), shape=(n, n))
    a_w = sp.csr_matrix((np.concatenate(wv), (np.concatenate(wr), np.concatenate(wc))), shape=(n, n_el))
    return CEMSystem(a_m, a_z, a_w, a_d)


class ForwardSolver:
    """Factorise the grounded CEM system once and solve for many patterns.

    The factorisation is immutable after construction, so `solve` may be
    called concurrently.
    """

    def __init__(self, mesh: Mesh, sigma, z=DEFAULT_CONTACT_IMPEDANCE):
        self.mesh = mesh
        self.sigma = conductivity(mesh, sigma)
        self.z = contact_impedances(mesh, z)
        self.system = assemble_system(mesh, self.sigma, self.z)
        n, n_el = mesh.n_nodes, mesh.n_electrodes
        ground = sp.csr_matrix(np.r_[np.zeros(n), np.ones(n_el)][None, :])
        k = sp.bmat([[self.system.matrix(), ground.T], [ground, None]], format="csc")
        self._k = k
        try:
            self._lu = spla.splu(k)
        except RuntimeError as exc:
            raise SingularSystemError(
                f"grounded CEM system of size {k.shape[0]} is singular: {exc}"
            ) from None
        diag = np.abs(self._lu.U.diagonal())
        self.pivot_ratio = float(diag.max() / diag.min()) if diag.min() > 0 else np.inf
        if not np.isfinite(self.pivot_ratio) or self.pivot_ratio > 1e15:
            raise SingularSystemError(
                f"grounded CEM system is numerically singular (pivot ratio {self.pivot_ratio:.3g})"
            )

    @property
    def size(self) -> int:
        return self._k.shape[0]

    def solve_system(self, rhs: np.ndarray) -> np.ndarray:
        """Solve the grounded system for raw right-hand sides, shape (size, k)."""
        x = self._lu.solve(rhs)
        scale = max(np.abs(self._k).max() * np.abs(x).max(), np.abs(rhs).max(), 1e-300)
        resid = np.abs(self._k @ x - rhs).max() / scale
        if resid > 1e-8:
            raise SingularSystemError(
                f"forward solve residual {resid:.3g} too large (pivot ratio {self.pivot_ratio:.3g})"
            )
        return x

    def solve(self, currents) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(phi, V)`` with shapes (P, n_nodes) and (P, L)."""
        n, n_el = self.mesh.n_nodes, self.mesh.n_electrodes
        cur = current_patterns(currents, n_el)
        rhs = np.zeros((self.size, len(cur)))
        rhs[n:n + n_el] = cur.T
        x = self.solve_system(rhs)
        return x[:n].T, x[n:n + n_el].T


@dataclass(frozen=True)
class Protocol:
    """Drive pairs and the differential measurements taken for each drive.

    A drive pair ``(p, m)`` injects ``+amplitude`` at electrode ``p`` and
    ``-amplitude`` at ``m``. A measure pair ``(a, b)`` records ``V[a] - V[b]``.
    """

    n_electrodes: int
    amplitude: float
    drive_pairs: tuple[tuple[int, int], ...]
    measure_pairs: tuple[tuple[tuple[int, int], ...], ...]

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ProtocolError(f"amplitude must be positive, got {self.amplitude}")
        if len(self.drive_pairs) != len(self.measure_pairs):
            raise ProtocolError("need one list of measure pairs per drive pair")
        for pair in list(self.drive_pairs) + [p for ms in self.measure_pairs for p in ms]:
            if len(pair) != 2 or pair[0] == pair[1]:
                raise ProtocolError(f"invalid electrode pair {pair!r}")
            for l in pair:
                if not 0 <= l < self.n_electrodes:
                    raise ProtocolError(f"electrode {l} outside [0, {self.n_electrodes})")

    def __len__(self) -> int:
        return sum(len(m) for m in self.measure_pairs)

    def current_patterns(self) -> np.ndarray:
        cur = np.zeros((len(self.drive_pairs), self.n_electrodes))
        for k, (p, m) in enumerate(self.drive_pairs):
            cur[k, p] += self.amplitude
            cur[k, m] -= self.amplitude
        return cur

    def measurement_index(self) -> np.ndarray:
        """Rows ``(pattern, measure, a, b)`` in flattening order."""
        return np.array(
            [(k, i, a, b) for k, ms in enumerate(self.measure_pairs) for i, (a, b) in enumerate(ms)],
            dtype=np.int64,
        ).reshape(-1, 4)

    def to_dict(self) -> dict:
        return {
            "amplitude_A": self.amplitude,
            "n_electrodes": self.n_electrodes,
            "drive_pairs": [list(p) for p in self.drive_pairs],
            "measure_pairs": [[list(p) for p in ms] for ms in self.measure_pairs],
        }

    @classmethod
    def from_dict(cls, doc: dict, n_electrodes: int | None = None) -> Protocol:
        try:
            drive = [tuple(int(x) for x in p) for p in doc["drive_pairs"]]
            meas = [tuple(tuple(int(x) for x in p) for p in ms) for ms in doc["measure_pairs"]]
            amp = float(doc["amplitude_A"])
            n_el = int(doc.get("n_electrodes", n_electrodes or 0))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed protocol: {exc!r}") from None
        if n_electrodes is not None and n_el != n_electrodes:
            raise ProtocolError(f"protocol is for {n_el} electrodes, mesh has {n_electrodes}")
        return cls(n_el, amp, tuple(drive), tuple(meas))


def adjacent_protocol(n_electrodes: int = 16, amplitude: float = DEFAULT_AMPLITUDE) -> Protocol:
    """Adjacent drive, adjacent differential measurement skipping driven electrodes.

    Drive ``k`` injects between ``k`` and ``k+1``. Its measurements start at the
    pair ``(k+2, k+3)`` and go round the ring, giving ``L - 3`` per drive.
    """
    L = n_electrodes
    drives = tuple((k, (k + 1) % L) for k in range(L))
    meas = tuple(
        tuple(((k + s) % L, (k + s + 1) % L) for s in range(2, L - 1)) for k in range(L)
    )
    return Protocol(L, amplitude, drives, meas)


def load_protocol(path, n_electrodes: int | None = None) -> Protocol:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return Protocol.from_dict(doc, n_electrodes)


def save_protocol(protocol: Protocol, path) -> None:
    Path(path).write_text(json.dumps(protocol.to_dict(), indent=1) + "\n")


@dataclass(frozen=True)
class MeasurementFrame:
    patterns: np.ndarray  # (P, L) injected currents, A
    electrode_voltages: np.ndarray  # (P, L), V
    protocol_voltages: np.ndarray | None = None
    potentials: np.ndarray | None = None  # (P, n_nodes), kept on request


def solve_forward(mesh: Mesh, sigma, z, patterns=None, *, protocol: Protocol | None = None,
                  keep_potentials: bool = False, solver: ForwardSolver | None = None) -> MeasurementFrame:
    """Electrode voltages for each current pattern.

    Either `patterns` or `protocol` must be given. With a protocol the frame
    also carries the flattened protocol measurements.
    """
    if patterns is None:
        if protocol is None:
            raise ForwardError("need current patterns or a protocol")
        patterns = protocol.current_patterns()
    patterns = current_patterns(patterns, mesh.n_electrodes)
    if solver is None:
        solver = ForwardSolver(mesh, sigma, z)
    phi, v = solver.solve(patterns)
    frame = MeasurementFrame(patterns, v, None, phi if keep_potentials else None)
    if protocol is not None:
        frame = MeasurementFrame(patterns, v, apply_protocol(frame, protocol), frame.potentials)
    return frame


def apply_protocol(frame: MeasurementFrame, protocol: Protocol) -> np.ndarray:
    """Flatten a frame into the protocol's measurement vector."""
    n_el = frame.electrode_voltages.shape[1]
    if protocol.n_electrodes != n_el:
        raise ProtocolError(f"protocol is for {protocol.n_electrodes} electrodes, frame has {n_el}")
    wanted = protocol.current_patterns()
    rows = []
    for k, pat in enumerate(wanted):
        tol = 1e-12 * np.abs(pat).max()
        hit = np.flatnonzero(np.all(np.abs(frame.patterns - pat) <= tol, axis=1))
        if hit.size == 0:
            raise ProtocolError(f"frame lacks drive pattern {k} {protocol.drive_pairs[k]}")
        rows.append(hit[0])
    out = []
    for k, ms in zip(rows, protocol.measure_pairs):
        v = frame.electrode_voltages[k]
        out.extend(v[a] - v[b] for a, b in ms)
    return np.array(out)


def simulate(mesh: Mesh, sigma, protocol: Protocol, z=DEFAULT_CONTACT_IMPEDANCE) -> np.ndarray:
    """Protocol voltages predicted for a conductivity field."""
    return solve_forward(mesh, sigma, z, protocol=protocol).protocol_voltages


# -- voltage files -------------------------------------------------------------

VOLTAGE_COLUMNS = ("pattern_index", "measure_index", "voltage_V")


def write_voltages(path, voltages, protocol: Protocol) -> None:
    voltages = np.asarray(voltages, dtype=float)
    if voltages.shape != (len(protocol),):
        raise ProtocolError(f"expected {len(protocol)} voltages, got {voltages.size}")
    idx = protocol.measurement_index()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VOLTAGE_COLUMNS)
        for (k, i, _, _), v in zip(idx, voltages):
            w.writerow([int(k), int(i), repr(float(v))])


def read_voltages(path) -> np.ndarray:
    """Read a voltage CSV, returning values ordered by (pattern, measure)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != VOLTAGE_COLUMNS:
            raise ProtocolError(f"{path}: expected header {','.join(VOLTAGE_COLUMNS)}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            try:
                rows.append((int(rec[0]), int(rec[1]), float(rec[2])))
            except (IndexError, ValueError):
                raise ProtocolError(f"{path}: line {line}: malformed record {rec!r}") from None
    rows.sort(key=lambda r: (r[0], r[1]))
    return np.array([r[2] for r in rows])
