"""One-step linearised difference imaging with a Laplacian smoothness prior.

Solves::

    min  1/2 ||J ds - dV||^2 + alpha/2 ||L ds||^2      (optionally ds <= 0)

where ``L`` is the graph Laplacian of the element adjacency.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import Mesh, adjacency_matrix

NONPOSITIVE = "nonpositive"
UNCONSTRAINED = "unconstrained"
MODES = (NONPOSITIVE, UNCONSTRAINED)


class InverseError(ValueError):
    pass


class ConvergenceError(InverseError, ArithmeticError):
    def __init__(self, msg, x=None, iterations=None):
        super().__init__(msg)
        self.x = x
        self.iterations = iterations


@dataclass(frozen=True)
class RegularizationOperator:
    matrix: sp.csr_matrix  # (n_elements, n_elements)

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other


def build_laplacian(mesh: Mesh) -> RegularizationOperator:
    """Graph Laplacian ``D - A`` of the element adjacency (shared edges)."""
    adj = adjacency_matrix(mesh)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return RegularizationOperator((sp.diags(deg) - adj).tocsr())


@dataclass(frozen=True)
class ReconstructionResult:
    delta_sigma: np.ndarray
    alpha: float
    constrained: bool
    data_residual: float
    roughness: float
    iterations: int = 0
    column_scale: np.ndarray | None = field(default=None, repr=False)

    @property
    def mode(self) -> str:
        return NONPOSITIVE if self.constrained else UNCONSTRAINED


def _as_array(m):
    m = getattr(m, "entries", getattr(m, "matrix", m))
    return m


def objective(jac, lap, alpha, dv, ds) -> float:
    jac, lap = _as_array(jac), _as_array(lap)
    r = jac @ ds - dv
    s = lap @ ds
    return 0.5 * (r @ r + alpha * s @ s)


def gradient(jac, lap, alpha, dv, ds) -> np.ndarray:
    """Gradient ``(J^T J + alpha L^T L) ds - J^T dV`` of the objective."""
    jac, lap = _as_array(jac), _as_array(lap)
    return jac.T @ (jac @ ds - dv) + alpha * (lap.T @ (lap @ ds))


def optimality_residuals(jac, lap, alpha, dv, ds, mode: str = NONPOSITIVE) -> dict:
    """First-order optimality residuals of `ds`, relative to ``max |J^T dV|``.

    Returns a dict with ``stationarity`` (largest gradient entry over free
    elements), and for the nonpositive mode ``dual`` (largest positive gradient
    entry at elements held at zero, which must not exist at a minimiser of the
    constrained problem), ``primal`` (largest positive entry of `ds`) and
    ``complementarity`` (largest ``|ds_i g_i|``, also over ``max |ds|``).
    """
    jac, lap_m = _as_array(jac), _as_array(lap)
    ds = np.asarray(ds, dtype=float)
    g = gradient(jac, lap_m, alpha, dv, ds)
    scale = max(float(np.abs(jac.T @ np.asarray(dv, dtype=float)).max()), 1e-300)
    if mode == UNCONSTRAINED:
        return {"stationarity": float(np.abs(g).max()) / scale}
    free = ds < 0
    return {
        "stationarity": float(np.abs(g[free]).max(initial=0.0)) / scale,
        "dual": float(np.clip(g[~free], 0.0, None).max(initial=0.0)) / scale,
        "primal": float(max(ds.max(initial=0.0), 0.0)),
        "complementarity": float(np.abs(ds * g).max(initial=0.0))
        / (scale * max(float(np.abs(ds).max(initial=0.0)), 1e-300)),
    }


def nnls_gram(gram: np.ndarray, c: np.ndarray, maxiter: int | None = None, tol: float | None = None):
    """Active-set non-negative least squares in normal-equation form.

    Minimises ``1/2 x^T G x - c^T x`` subject to ``x >= 0``, which for
    ``G = A^T A`` and ``c = A^T b`` is ``min ||A x - b||`` with ``x >= 0``
    (Lawson and Hanson, Solving Least Squares Problems, 1974). Variables enter
    the passive set by largest dual ``w = c - G x``; ties go to the lowest index.

    Returns
    -------
    x : ndarray
    iterations : int
        Number of passive-set solves performed.

    Raises
    ------
    ConvergenceError
        If more than `maxiter` passive-set solves are needed.
    """
    gram = np.asarray(gram, dtype=float)
    c = np.asarray(c, dtype=float)
    n = len(c)
    if maxiter is None:
        maxiter = 10 * n
    if tol is None:
        tol = 10 * np.finfo(float).eps * n * max(np.abs(c).max(initial=0.0), 1e-300)

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    rejected = np.zeros(n, dtype=bool)
    w = c.copy()
    it = 0
    while True:
        cand = ~passive & ~rejected & (w > tol)
        if not cand.any():
            break
        j = int(np.argmax(np.where(cand, w, -np.inf)))
        passive[j] = True
        while True:
            it += 1
            if it > maxiter:
                raise ConvergenceError(
                    f"active set did not converge in {maxiter} iterations "
                    f"(passive set {int(passive.sum())}, max dual {w.max():.3g})",
                    x=x.copy(), iterations=it - 1,
                )
            idx = np.flatnonzero(passive)
            z = np.zeros(n)
            z[idx] = _spd_solve(gram[np.ix_(idx, idx)], c[idx])
            neg = np.flatnonzero(passive & (z <= 0))
            if neg.size == 0:
                x = z
                rejected[:] = False
                break
            ratio = x[neg] / (x[neg] - z[neg])
            k = int(np.argmin(ratio))
            if ratio[k] == 0 and neg[k] == j and x[j] == 0:
                # round-off: the dual says enter, the subproblem disagrees
                passive[j] = False
                rejected[j] = True
                break
            x = x + ratio[k] * (z - x)
            x[neg[k]] = 0.0
            passive &= x > 0
            if not passive.any():
                break
        w = c - gram @ x
        w[passive] = 0.0
    return x, it


def _spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        cf = sla.cho_factor(a, check_finite=False)
        x = sla.cho_solve(cf, b, check_finite=False)
        return x + sla.cho_solve(cf, b - a @ x, check_finite=False)
    except sla.LinAlgError:
        return sla.lstsq(a, b, check_finite=False)[0]


def nnls(a, b, maxiter: int | None = None):
    """``argmin ||a x - b||`` subject to ``x >= 0``; returns ``(x, residual_norm)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x, _ = nnls_gram(a.T @ a, a.T @ b, maxiter=maxiter)
    return x, float(np.linalg.norm(a @ x - b))


def reconstruct(jac, lap, alpha: float, dv, mode: str = NONPOSITIVE) -> ReconstructionResult:
    """Regularised least-squares conductivity change from a voltage difference.

    Parameters
    ----------
    jac : SensitivityMatrix or ndarray, shape (m, n)
    lap : RegularizationOperator or (sparse) matrix, shape (k, n)
    alpha : float
        Regularisation weight, ``>= 0``.
    dv : ndarray, shape (m,)
        Voltage difference, later frame minus baseline.
    mode : {"nonpositive", "unconstrained"}
        ``nonpositive`` restricts every element change to ``<= 0``.
    """
    if mode not in MODES:
        raise InverseError(f"mode must be one of {MODES}, got {mode!r}")
    jac = np.asarray(_as_array(jac), dtype=float)
    lap_m = _as_array(lap)
    lap_m = lap_m if sp.issparse(lap_m) else np.asarray(lap_m, dtype=float)
    dv = np.asarray(dv, dtype=float)
    m, n = jac.shape
    if dv.shape != (m,):
        raise InverseError(f"voltage difference has length {dv.size}, expected {m}")
    if lap_m.shape[1] != n:
        raise InverseError(f"regularisation operator has {lap_m.shape[1]} columns, expected {n}")
    if not (alpha >= 0 and np.isfinite(alpha)):
        raise InverseError(f"alpha must be finite and >= 0, got {alpha}")
    if alpha == 0 and np.linalg.matrix_rank(jac) < n:
        raise InverseError(
            "sensitivity matrix is rank deficient, the problem is ill-posed; use alpha > 0"
        )

    ltl = lap_m.T @ lap_m
    gram = jac.T @ jac + alpha * (ltl.toarray() if sp.issparse(ltl) else ltl)
    rhs = jac.T @ dv
    it = 0
    if mode == UNCONSTRAINED:
        try:
            cf = sla.cho_factor(gram, check_finite=False)
        except sla.LinAlgError:
            raise InverseError(
                "regularised normal equations are singular; increase alpha"
            ) from None
        ds = sla.cho_solve(cf, rhs, check_finite=False)
        for _ in range(2):
            ds += sla.cho_solve(cf, rhs - gram @ ds, check_finite=False)
    else:
        x, it = nnls_gram(gram, -rhs)
        ds = -x
        ds[ds > 0] = 0.0
    ds = ds + 0.0  # normalise -0.0
    return ReconstructionResult(
        delta_sigma=ds,
        alpha=float(alpha),
        constrained=mode == NONPOSITIVE,
        data_residual=float(np.linalg.norm(jac @ ds - dv)),
        roughness=float(np.linalg.norm(lap_m @ ds)),
        iterations=it,
    )


def column_norms(jac) -> np.ndarray:
    norms = np.linalg.norm(np.asarray(_as_array(jac), dtype=float), axis=0)
    if np.any(norms == 0):
        raise InverseError("sensitivity matrix has an all-zero column")
    return norms


def reconstruct_scaled(jac, lap, alpha: float, dv, mode: str = NONPOSITIVE) -> ReconstructionResult:
    """Reconstruct after scaling the sensitivity columns to unit norm.

    The problem is solved for ``y = s * ds`` with ``s`` the column norms, so
    `alpha` is dimensionless and comparable across meshes and backgrounds.
    The prior then acts on ``y``. The returned conductivity change is
    ``y / s``; the stored residual and roughness refer to it.
    """
    jac = np.asarray(_as_array(jac), dtype=float)
    s = column_norms(jac)
    res = reconstruct(jac / s, lap, alpha, dv, mode)
    ds = res.delta_sigma / s
    lap_m = _as_array(lap)
    return ReconstructionResult(
        delta_sigma=ds,
        alpha=res.alpha,
        constrained=res.constrained,
        data_residual=float(np.linalg.norm(jac @ ds - np.asarray(dv, dtype=float))),
        roughness=float(np.linalg.norm(lap_m @ ds)),
        iterations=res.iterations,
        column_scale=s,
    )


def alpha_sweep(jac, lap, dv, alphas, mode: str = UNCONSTRAINED, scaled: bool = True):
    """L-curve points ``(alpha, data_residual, roughness)`` over `alphas`.

    Residual and roughness are those of the solved variable (the column-scaled
    one when `scaled` is true), which is what the L-curve trades off.
    """
    jac = np.asarray(_as_array(jac), dtype=float)
    if scaled:
        jac = jac / column_norms(jac)
    return [(float(a), r.data_residual, r.roughness)
            for a in alphas for r in [reconstruct(jac, lap, a, dv, mode)]]


def region_mask(mesh: Mesh, center=(0.0, 0.0), diameter: float = 0.045) -> np.ndarray:
    """Elements whose centroid lies inside the disk region."""
    if not diameter > 0:
        raise InverseError(f"region diameter must be positive, got {diameter}")
    d = np.linalg.norm(mesh.centroids - np.asarray(center, dtype=float), axis=1)
    return d <= diameter / 2


def region_average(result, mesh: Mesh, center=(0.0, 0.0), diameter: float = 0.045) -> float:
    """Area-weighted mean conductivity change (S/m) over a disk region."""
    ds = np.asarray(getattr(result, "delta_sigma", result), dtype=float)
    if ds.shape != (mesh.n_elements,):
        raise InverseError(f"got {ds.size} element values for {mesh.n_elements} elements")
    mask = region_mask(mesh, center, diameter)
    if not mask.any():
        raise InverseError(f"no element centroid inside region at {tuple(center)} of diameter {diameter}")
    a = mesh.areas[mask]
    return float(np.sum(a * ds[mask]) / a.sum())


# -- exports -------------------------------------------------------------------

RECON_COLUMNS = ("element_id", "centroid_x_m", "centroid_y_m", "delta_sigma_S_per_m")


def write_reconstruction(path, result, mesh: Mesh) -> None:
    ds = np.asarray(getattr(result, "delta_sigma", result), dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECON_COLUMNS)
        for e, ((x, y), v) in enumerate(zip(mesh.centroids, ds)):
            w.writerow([e, repr(float(x)), repr(float(y)), repr(float(v))])


def read_reconstruction(path, mesh: Mesh | None = None) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != RECON_COLUMNS:
            raise InverseError(f"{path}: expected header {','.join(RECON_COLUMNS)}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            try:
                rows.append((int(rec[0]), float(rec[3])))
            except (IndexError, ValueError):
                raise InverseError(f"{path}: line {line}: malformed record {rec!r}") from None
    rows.sort()
    ids = [r[0] for r in rows]
    if ids != list(range(len(ids))):
        raise InverseError(f"{path}: element ids must be 0..n-1 without gaps")
    ds = np.array([r[1] for r in rows])
    if mesh is not None and len(ds) != mesh.n_elements:
        raise InverseError(f"{path}: {len(ds)} elements, mesh has {mesh.n_elements}")
    return ds


def raster(mesh: Mesh, delta_sigma, size: int = 128, constrained: bool = True) -> np.ndarray:
    """Sample element values on a ``size x size`` grid as 8-bit gray levels.

    Each pixel takes the value of the element with the nearest centroid.
    Constrained images map the minimum to black and zero to white; otherwise
    the map is symmetric about mid-gray. Pixels outside the disk are white.
    """
    ds = np.asarray(delta_sigma, dtype=float)
    r = mesh.radius
    t = (np.arange(size) + 0.5) / size * 2 * r - r
    xx, yy = np.meshgrid(t, -t)  # first row is the top of the image
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    _, nearest = cKDTree(mesh.centroids).query(pts)
    v = ds[nearest]
    if constrained:
        lo = min(ds.min(), 0.0)
        level = np.ones_like(v) if lo == 0 else 1.0 - np.clip(v, lo, 0.0) / lo
    else:
        span = np.abs(ds).max()
        level = np.full_like(v, 0.5) if span == 0 else 0.5 + 0.5 * np.clip(v / span, -1, 1)
    img = np.round(255 * level).astype(np.uint8)
    img[np.hypot(pts[:, 0], pts[:, 1]) > r] = 255
    return img.reshape(size, size)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    data = open(path, "rb").read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise InverseError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise InverseError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
