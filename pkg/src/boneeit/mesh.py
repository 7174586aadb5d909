"""Triangular disk meshes with a ring of boundary electrodes.

Meshes are built from concentric rings of nodes. One half of an electrode
sector (from an electrode centre to the middle of the following gap) is
triangulated and then mirrored and rotated, so every generated mesh carries
the full dihedral symmetry of the electrode ring.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

BOUNDARY_TOL = 1e-9  # relative to radius
MAX_BOUNDARY_ANGLE = 0.2  # rad; keeps the inscribed polygon within 1% of the disk area


class MeshError(ValueError):
    """Raised when a mesh cannot be generated or violates its invariants."""


class MeshFormatError(MeshError):
    """Raised when a mesh file cannot be parsed."""


@dataclass(frozen=True, eq=False)
class Electrode:
    index: int
    boundary_edges: np.ndarray  # (k, 2) node indices, ordered counter-clockwise

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def edge_lengths(self, nodes: np.ndarray) -> np.ndarray:
        a, b = self.boundary_edges.T
        return np.linalg.norm(nodes[b] - nodes[a], axis=1)

    def arc_length(self, nodes: np.ndarray) -> float:
        """Total length of the electrode's boundary edges."""
        return float(self.edge_lengths(nodes).sum())


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable 2D triangular mesh of a disk.

    Attributes
    ----------
    nodes : ndarray, shape (n_nodes, 2)
        Node coordinates in metres.
    elements : ndarray, shape (n_elements, 3)
        Counter-clockwise node indices of each triangle.
    electrodes : tuple of Electrode
        Boundary electrodes, ordered by index.
    radius : float
        Disk radius in metres.
    """

    nodes: np.ndarray
    elements: np.ndarray
    electrodes: tuple[Electrode, ...]
    radius: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        elements = np.array(self.elements, dtype=np.int64)
        nodes.setflags(write=False)
        elements.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "electrodes", tuple(self.electrodes))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_electrodes(self) -> int:
        return len(self.electrodes)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def shape_gradients(self) -> np.ndarray:
        """Constant gradients of the three linear shape functions per element.

        Returns an array of shape (n_elements, 3, 2).
        """
        p = self.nodes[self.elements]
        x, y = p[..., 0], p[..., 1]
        two_a = 2.0 * self.signed_areas
        gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
        gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        return np.stack([gx, gy], axis=2) / two_a[:, None, None]

    def electrode_lengths(self) -> np.ndarray:
        return np.array([e.arc_length(self.nodes) for e in self.electrodes])

    def electrode_centers(self) -> np.ndarray:
        """Angular position (rad, in [0, 2pi)) of each electrode's arc midpoint."""
        out = []
        for e in self.electrodes:
            mids = 0.5 * (self.nodes[e.boundary_edges[:, 0]] + self.nodes[e.boundary_edges[:, 1]])
            w = e.edge_lengths(self.nodes)
            c = (mids * w[:, None]).sum(axis=0)
            a = math.atan2(c[1], c[0])
            out.append(0.0 if -1e-12 < a < 0 else a % (2 * math.pi))
        return np.array(out)

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        if self.nodes.shape != other.nodes.shape or self.elements.shape != other.elements.shape:
            return False
        if len(self.electrodes) != len(other.electrodes):
            return False
        scale = max(self.radius, 1e-300)
        return (
            math.isclose(self.radius, other.radius, rel_tol=1e-12)
            and np.array_equal(self.elements, other.elements)
            and np.allclose(self.nodes, other.nodes, rtol=0, atol=1e-12 * scale)
            and all(
                a.index == b.index and np.array_equal(a.boundary_edges, b.boundary_edges)
                for a, b in zip(self.electrodes, other.electrodes)
            )
        )

    __hash__ = None


def _edge_map(elements: np.ndarray) -> dict[tuple[int, int], list[int]]:
    edges: dict[tuple[int, int], list[int]] = defaultdict(list)
    for e, (a, b, c) in enumerate(elements.tolist()):
        for u, v in ((a, b), (b, c), (c, a)):
            edges[(u, v) if u < v else (v, u)].append(e)
    return edges


def validate_mesh(mesh: Mesh) -> None:
    """Check the structural invariants of `mesh`, raising MeshError on failure."""
    nodes, elements = mesh.nodes, mesh.elements
    if mesh.radius <= 0:
        raise MeshError(f"radius must be positive, got {mesh.radius}")
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshError(f"nodes must have shape (n, 2), got {nodes.shape}")
    if elements.ndim != 2 or elements.shape[1] != 3 or len(elements) == 0:
        raise MeshError(f"elements must have shape (m, 3) with m > 0, got {elements.shape}")
    if not np.all(np.isfinite(nodes)):
        raise MeshError("node coordinates must be finite")
    if elements.min() < 0 or elements.max() >= len(nodes):
        raise MeshError("element node index out of range")
    used = np.zeros(len(nodes), dtype=bool)
    used[elements.ravel()] = True
    if not used.all():
        raise MeshError(f"{int((~used).sum())} node(s) belong to no element")
    bad = np.flatnonzero(mesh.signed_areas <= 0)
    if bad.size:
        raise MeshError(f"element {int(bad[0])} has non-positive signed area")

    edge_map = _edge_map(elements)
    tol = BOUNDARY_TOL * mesh.radius
    r = np.linalg.norm(nodes, axis=1)
    seen_nodes: dict[int, int] = {}
    for pos, el in enumerate(mesh.electrodes):
        if el.index != pos:
            raise MeshError(f"electrode at position {pos} has index {el.index}")
        edges = el.boundary_edges
        if edges.ndim != 2 or edges.shape[1] != 2 or len(edges) == 0:
            raise MeshError(f"electrode {el.index} needs at least one edge")
        if edges.min() < 0 or edges.max() >= len(nodes):
            raise MeshError(f"electrode {el.index} references a node out of range")
        for a, b in edges.tolist():
            key = (a, b) if a < b else (b, a)
            if len(edge_map.get(key, ())) != 1:
                raise MeshError(f"electrode {el.index} edge ({a}, {b}) is not a boundary edge")
        off = np.abs(r[el.nodes] - mesh.radius)
        if off.max() > tol:
            raise MeshError(f"electrode {el.index} has a node {off.max():.3g} m off the boundary")
        for n in el.nodes.tolist():
            if n in seen_nodes:
                raise MeshError(f"electrodes {seen_nodes[n]} and {el.index} overlap at node {n}")
            seen_nodes[n] = el.index


def _ring_angles(n_seg: int, half: float) -> np.ndarray:
    return np.linspace(0.0, half, n_seg + 1)


def _zipper(inner: np.ndarray, outer: np.ndarray) -> list[tuple[tuple[int, int], ...]]:
    """Triangulate the strip between two angle lists sharing both end angles.

    Returns counter-clockwise triangles as triples of (ring, local index) with
    ring 0 = inner.
    """
    i = j = 0
    p, q = len(inner) - 1, len(outer) - 1
    tris = []
    while i < p or j < q:
        if j == q or (i < p and inner[i + 1] <= outer[j + 1]):
            tris.append(((0, i), (1, j), (0, i + 1)))
            i += 1
        else:
            tris.append(((0, i), (1, j), (1, j + 1)))
            j += 1
    return tris


def generate_disk_mesh(
    radius: float = 0.0665,
    n_electrodes: int = 16,
    electrode_coverage: float = 0.5,
    target_edge_length: float = 0.004,
    interface_radii=(),
) -> Mesh:
    """Generate a structured triangular mesh of a disk with equiangular electrodes.

    Electrode ``l`` is centred at angle ``2*pi*l/n_electrodes``. Electrode arcs
    together cover ``electrode_coverage`` of the circumference. Each radius in
    `interface_radii` becomes a ring of nodes, so element edges follow that
    circle (e.g. the boundary of a centred inclusion).

    Raises
    ------
    MeshError
        If the arguments are out of range or `target_edge_length` is too coarse
        to resolve an electrode or the gap between two electrodes.
    """
    if not radius > 0:
        raise MeshError(f"radius must be positive, got {radius}")
    if int(n_electrodes) != n_electrodes or n_electrodes < 4:
        raise MeshError(f"need an integer number of electrodes >= 4, got {n_electrodes}")
    if not 0 < electrode_coverage < 1:
        raise MeshError(f"electrode_coverage must lie in (0, 1), got {electrode_coverage}")
    if not 0 < target_edge_length < radius:
        raise MeshError(f"target_edge_length must lie in (0, radius), got {target_edge_length}")
    n_electrodes = int(n_electrodes)

    half = math.pi / n_electrodes
    el_half = electrode_coverage * half
    el_arc = 2 * el_half * radius
    gap_arc = 2 * (half - el_half) * radius
    if target_edge_length > min(el_arc, gap_arc):
        raise MeshError(
            f"target_edge_length {target_edge_length:g} m cannot resolve electrode arcs "
            f"({el_arc:g} m) and gaps ({gap_arc:g} m); refine the mesh"
        )

    cuts = sorted({float(r) for r in interface_radii})
    if cuts and not (cuts[0] > 0 and cuts[-1] < radius):
        raise MeshError(f"interface radii must lie in (0, {radius}), got {cuts}")

    h = target_edge_length
    h_b = min(h, MAX_BOUNDARY_ANGLE * radius)
    radii = []
    for a, b in zip([0.0] + cuts, cuts + [radius]):
        n = math.ceil((b - a) / h - 1e-9)
        radii.extend(a + (b - a) * k / n for k in range(1, n + 1))

    # Half-sector angle lists per ring, ring 0 is the centre node.
    rings = []
    for r_k in radii[:-1]:
        rings.append((r_k, _ring_angles(max(1, math.ceil(r_k * half / h - 1e-9)), half)))
    m_e = max(1, math.ceil(radius * el_half / h_b - 1e-9))
    m_g = max(1, math.ceil(radius * (half - el_half) / h_b - 1e-9))
    boundary = np.concatenate([np.linspace(0.0, el_half, m_e + 1), np.linspace(el_half, half, m_g + 1)[1:]])
    rings.append((radius, boundary))

    sector = 2 * half
    nodes = [(0.0, 0.0)]
    offsets, counts = [], []
    for r_k, a in rings:
        m = len(a) - 1
        count = 2 * m * n_electrodes
        offsets.append(len(nodes))
        counts.append(count)
        for j in range(n_electrodes):
            base = j * sector
            angles = np.concatenate([base + a[:-1], base + sector - a[:0:-1]])
            nodes.extend(zip(r_k * np.cos(angles), r_k * np.sin(angles)))

    def gid(ring: int, j: int, q: int, mirrored: bool) -> int:
        m = counts[ring] // (2 * n_electrodes)
        p = j * 2 * m + (-q if mirrored else q)
        return offsets[ring] + p % counts[ring]

    elements = []
    # centre fan
    for p in range(counts[0]):
        elements.append((0, offsets[0] + p, offsets[0] + (p + 1) % counts[0]))
    local = [_zipper(rings[k][1], rings[k + 1][1]) for k in range(len(rings) - 1)]
    for j in range(n_electrodes):
        for k, tris in enumerate(local):
            for mirrored in (False, True):
                for tri in tris:
                    ids = tuple(gid(k + ring, j, q, mirrored) for ring, q in tri)
                    elements.append(ids[::-1] if mirrored else ids)

    nodes_arr = np.array(nodes)
    elem_arr = np.array(elements, dtype=np.int64)

    electrodes = []
    for l in range(n_electrodes):
        ids = [gid(len(rings) - 1, l, q, False) for q in range(-m_e, m_e + 1)]
        electrodes.append(Electrode(l, np.array(list(zip(ids[:-1], ids[1:])), dtype=np.int64)))

    mesh = Mesh(nodes_arr, elem_arr, tuple(electrodes), radius,
                meta={"electrode_coverage": electrode_coverage, "target_edge_length": h,
                      "interface_radii": cuts})
    validate_mesh(mesh)
    return mesh


def element_adjacency(mesh: Mesh) -> np.ndarray:
    """Pairs ``(i, j)`` with ``i < j`` of elements sharing an edge, sorted."""
    pairs = [tuple(sorted(els)) for els in _edge_map(mesh.elements).values() if len(els) == 2]
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    return np.array(sorted(pairs), dtype=np.int64)


def adjacency_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Symmetric 0/1 element adjacency matrix."""
    pairs = element_adjacency(mesh)
    n = mesh.n_elements
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


# -- persistence -------------------------------------------------------------

def mesh_to_dict(mesh: Mesh) -> dict:
    return {
        "radius": mesh.radius,
        "nodes": mesh.nodes.tolist(),
        "elements": mesh.elements.tolist(),
        "electrodes": [
            {"index": e.index, "edges": e.boundary_edges.tolist()} for e in mesh.electrodes
        ],
    }


def save_mesh(mesh: Mesh, path) -> Path:
    """Write `mesh` as a JSON document. Floats keep full round-trip precision."""
    path = Path(path)
    path.write_text(json.dumps(mesh_to_dict(mesh), separators=(",", ":")) + "\n")
    return path


def _field(doc, key, where="document"):
    if not isinstance(doc, dict) or key not in doc:
        raise MeshFormatError(f"missing field '{key}' in {where}")
    return doc[key]


def _number_array(value, shape_tail, name, kind=float):
    if not isinstance(value, list):
        raise MeshFormatError(f"field '{name}' must be an array")
    for i, row in enumerate(value):
        if not isinstance(row, list) or len(row) != shape_tail:
            raise MeshFormatError(f"field '{name}[{i}]' must be an array of {shape_tail} numbers")
        for k, x in enumerate(row):
            ok = isinstance(x, int) if kind is int else isinstance(x, (int, float))
            if isinstance(x, bool) or not ok:
                raise MeshFormatError(f"field '{name}[{i}][{k}]' has invalid value {x!r}")
    dtype = np.int64 if kind is int else float
    return np.array(value, dtype=dtype).reshape(len(value), shape_tail)


def mesh_from_dict(doc: dict) -> Mesh:
    radius = _field(doc, "radius")
    if isinstance(radius, bool) or not isinstance(radius, (int, float)):
        raise MeshFormatError(f"field 'radius' has invalid value {radius!r}")
    nodes = _number_array(_field(doc, "nodes"), 2, "nodes")
    elements = _number_array(_field(doc, "elements"), 3, "elements", kind=int)
    raw = _field(doc, "electrodes")
    if not isinstance(raw, list):
        raise MeshFormatError("field 'electrodes' must be an array")
    electrodes = []
    for i, e in enumerate(raw):
        where = f"electrodes[{i}]"
        index = _field(e, "index", where)
        if isinstance(index, bool) or not isinstance(index, int):
            raise MeshFormatError(f"field '{where}.index' has invalid value {index!r}")
        edges = _number_array(_field(e, "edges", where), 2, f"{where}.edges", kind=int)
        electrodes.append(Electrode(index, edges))
    electrodes.sort(key=lambda e: e.index)
    mesh = Mesh(nodes, elements, tuple(electrodes), float(radius))
    validate_mesh(mesh)
    return mesh


def load_mesh(path) -> Mesh:
    """Read a mesh written by :func:`save_mesh` and validate it.

    Raises
    ------
    MeshFormatError
        Malformed JSON (with line and column) or missing/ill-typed fields.
    MeshError
        Well-formed file describing an invalid mesh.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return mesh_from_dict(doc)
