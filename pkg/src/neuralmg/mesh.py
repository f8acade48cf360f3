"""Interval meshes and structured triangulations.

Meshes are immutable once built.  Generators that take a ``seed`` are pure
functions of their inputs.
"""

from dataclasses import dataclass
from functools import cached_property
import io
import math
import os

import numpy as np

from .errors import (
    DegenerateMeshError,
    InvalidArgumentError,
    OutOfRangeError,
    ParseError,
    UnsupportedExtensionError,
)
from .validation import check_positive_int

# Neighbors are ordered counter-clockwise starting from this direction.  No
# neighbor of the structured pattern lies close to it, so jitter cannot move
# a neighbor across the cut.
_ANGLE_CUT = -math.pi / 4

_MAX_JITTER_RETRIES = 10


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh1D:
    nodes: np.ndarray

    dim = 1

    def __post_init__(self):
        nodes = _frozen(self.nodes, float)
        if nodes.ndim != 1 or nodes.shape[0] < 2:
            raise InvalidArgumentError("a 1D mesh needs at least two nodes")
        if not np.all(np.isfinite(nodes)):
            raise InvalidArgumentError("mesh nodes must be finite")
        if np.any(np.diff(nodes) <= 0):
            raise DegenerateMeshError("1D mesh nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.nodes.shape[0] - 1

    @property
    def a(self):
        return float(self.nodes[0])

    @property
    def b(self):
        return float(self.nodes[-1])

    @cached_property
    def elements(self):
        idx = np.arange(self.n_elements)
        return _frozen(np.column_stack([idx, idx + 1]), np.int64)

    @cached_property
    def boundary_flags(self):
        flags = np.zeros(self.n_nodes, dtype=bool)
        flags[[0, -1]] = True
        flags.setflags(write=False)
        return flags

    @cached_property
    def virtual_flags(self):
        return _frozen(np.zeros(self.n_nodes), bool)

    def element_measures(self):
        return np.diff(self.nodes)

    @property
    def measure(self):
        return self.b - self.a

    def neighbors(self, node):
        """Left neighbor first, then right."""
        out = []
        if node > 0:
            out.append(node - 1)
        if node < self.n_nodes - 1:
            out.append(node + 1)
        return out


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangulation with counter-clockwise triangles.

    ``grid_shape`` is ``(nx, ny)`` for meshes produced by
    :func:`structured_tri_mesh` (node ``i + j*(nx+1)`` sits at grid position
    ``(i, j)``) and ``None`` otherwise.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_flags: np.ndarray
    virtual_flags: np.ndarray
    grid_shape: tuple = None

    dim = 2

    def __post_init__(self):
        nodes = _frozen(self.nodes, float)
        tris = _frozen(self.triangles, np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise InvalidArgumentError(f"nodes must have shape (n, 2), got {nodes.shape}")
        if tris.ndim != 2 or tris.shape[1] != 3 or tris.shape[0] == 0:
            raise InvalidArgumentError(f"triangles must have shape (m, 3), got {tris.shape}")
        if tris.min() < 0 or tris.max() >= nodes.shape[0]:
            raise InvalidArgumentError("triangle refers to a missing node")
        bflags = _frozen(self.boundary_flags, bool)
        vflags = _frozen(self.virtual_flags, bool)
        if bflags.shape != (nodes.shape[0],) or vflags.shape != (nodes.shape[0],):
            raise InvalidArgumentError("flag arrays must have one entry per node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "boundary_flags", bflags)
        object.__setattr__(self, "virtual_flags", vflags)
        if self.grid_shape is not None:
            object.__setattr__(self, "grid_shape", tuple(int(v) for v in self.grid_shape))
        areas = self.signed_areas()
        if not np.all(areas > 0):
            bad = int(np.argmin(areas))
            raise DegenerateMeshError(
                f"triangle {bad} has non-positive signed area {areas[bad]:.3e}")

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.triangles.shape[0]

    @property
    def elements(self):
        return self.triangles

    def signed_areas(self):
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def element_measures(self):
        return self.signed_areas()

    @cached_property
    def real_triangles(self):
        """Mask of triangles without virtual vertices."""
        return ~np.any(self.virtual_flags[self.triangles], axis=1)

    @property
    def measure(self):
        return float(self.signed_areas()[self.real_triangles].sum())

    @cached_property
    def _node_triangles(self):
        incident = [[] for _ in range(self.n_nodes)]
        for t, tri in enumerate(self.triangles.tolist()):
            for v in tri:
                incident[v].append(t)
        return incident

    @cached_property
    def _ordered_neighbors(self):
        return [self._order_neighbors(j) for j in range(self.n_nodes)]

    def neighbors(self, node):
        return list(self._ordered_neighbors[node])

    def _order_neighbors(self, j):
        succ = {}
        manifold = True
        for t in self._node_triangles[j]:
            tri = self.triangles[t].tolist()
            k = tri.index(j)
            a, b = tri[(k + 1) % 3], tri[(k + 2) % 3]
            if a in succ:
                manifold = False
            succ[a] = b
        nbrs = set(succ) | set(succ.values())
        if not nbrs:
            return []
        starts = [k for k in succ if k not in set(succ.values())]
        if manifold and len(starts) <= 1:
            if starts:
                start = starts[0]
            else:
                start = min(nbrs, key=lambda k: (self._cut_angle(j, k), k))
            order = [start]
            while order[-1] in succ and len(order) < len(nbrs):
                nxt = succ[order[-1]]
                if nxt == start:
                    break
                order.append(nxt)
            if len(order) == len(nbrs):
                return order
        # non-manifold fan (e.g. hanging nodes): fall back to a plain angular sort
        return sorted(nbrs, key=lambda k: (self._cut_angle(j, k), k))

    def _cut_angle(self, j, k):
        d = self.nodes[k] - self.nodes[j]
        return (math.atan2(d[1], d[0]) - _ANGLE_CUT) % (2 * math.pi)


@dataclass(frozen=True)
class Patch:
    """A node together with every node sharing an element with it."""

    center: int
    members: tuple

    @property
    def size(self):
        return len(self.members)


def uniform_mesh_1d(n_elements, a=0.0, b=1.0):
    n_elements = check_positive_int(n_elements, "n_elements")
    if not a < b:
        raise InvalidArgumentError(f"need a < b, got a={a}, b={b}")
    nodes = np.linspace(a, b, n_elements + 1)
    nodes[0], nodes[-1] = a, b
    return Mesh1D(nodes)


def structured_tri_mesh(nx, ny):
    """Unit square split into ``nx`` by ``ny`` cells, each cut along the
    same (south-west to north-east) diagonal."""
    nx = check_positive_int(nx, "nx")
    ny = check_positive_int(ny, "ny")
    return _grid_mesh(range(0, nx + 1), range(0, ny + 1), nx, ny)


def _grid_mesh(irange, jrange, nx, ny):
    ii, jj = np.meshgrid(np.asarray(irange), np.asarray(jrange))
    ii, jj = ii.ravel(), jj.ravel()
    nodes = np.column_stack([ii / nx, jj / ny])
    w = len(irange)
    cells_i, cells_j = np.meshgrid(np.arange(w - 1), np.arange(len(jrange) - 1))
    v00 = (cells_i + cells_j * w).ravel()
    v10, v01 = v00 + 1, v00 + w
    v11 = v01 + 1
    tris = np.empty((2 * v00.size, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])
    boundary = (ii == 0) | (ii == nx) | (jj == 0) | (jj == ny)
    return TriMesh(nodes, tris, boundary, np.zeros(len(nodes), bool), grid_shape=(nx, ny))


def jitter_mesh(mesh, gamma=0.25, seed=0):
    """Move every interior node along one of its incident edges.

    The displacement is drawn uniformly from ``[-gamma*h, gamma*h]`` where
    ``h`` is the shortest edge at the node.  Boundary and virtual nodes stay
    put.  If an element would invert, the whole displacement field is halved
    and retried.
    """
    gamma = float(gamma)
    if not 0.0 <= gamma < 0.5:
        raise InvalidArgumentError(f"gamma must lie in [0, 0.5), got {gamma}")
    if gamma == 0.0:
        return mesh
    rng = np.random.default_rng(seed)
    if mesh.dim == 1:
        x = mesh.nodes
        h = np.diff(x)
        h_loc = np.minimum(h[:-1], h[1:])
        shift = np.zeros_like(x)
        shift[1:-1] = rng.uniform(-1.0, 1.0, size=h_loc.size) * gamma * h_loc
        for attempt in range(_MAX_JITTER_RETRIES + 1):
            moved = x + shift * 0.5 ** attempt
            if np.all(np.diff(moved) > 0):
                return Mesh1D(moved)
        raise DegenerateMeshError("jitter keeps inverting elements")

    movable = np.flatnonzero(~mesh.boundary_flags & ~mesh.virtual_flags)
    pick = rng.random(movable.size)
    amount = rng.uniform(-1.0, 1.0, size=movable.size)
    shift = np.zeros_like(mesh.nodes)
    for n, j in enumerate(movable.tolist()):
        nbrs = sorted(mesh.neighbors(j))
        edges = mesh.nodes[nbrs] - mesh.nodes[j]
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        e = min(int(pick[n] * len(nbrs)), len(nbrs) - 1)
        shift[j] = amount[n] * gamma * lengths.min() * edges[e] / lengths[e]
    for attempt in range(_MAX_JITTER_RETRIES + 1):
        moved = mesh.nodes + shift * 0.5 ** attempt
        try:
            return TriMesh(moved, mesh.triangles, mesh.boundary_flags,
                           mesh.virtual_flags, mesh.grid_shape)
        except DegenerateMeshError:
            continue
    raise DegenerateMeshError("jitter keeps inverting elements")


def coarsen_1d(mesh, stride=2):
    """Keep every ``stride``-th node plus both endpoints.

    Returns the coarse mesh and the fine-node index of every coarse node.
    """
    stride = check_positive_int(stride, "stride", minimum=2)
    if mesh.n_elements < 2 * stride:
        raise InvalidArgumentError(
            f"coarsening with stride {stride} needs at least {2 * stride} elements, "
            f"mesh has {mesh.n_elements}")
    ids = list(range(0, mesh.n_nodes, stride))
    if ids[-1] != mesh.n_nodes - 1:
        ids.append(mesh.n_nodes - 1)
    ids = np.asarray(ids, dtype=np.int64)
    return Mesh1D(mesh.nodes[ids]), ids


def coarsen_structured(mesh):
    """Sublattice coarsening: keep nodes with even grid indices."""
    if mesh.grid_shape is None:
        raise InvalidArgumentError("sublattice coarsening needs a structured mesh")
    if np.any(mesh.virtual_flags):
        raise InvalidArgumentError("cannot coarsen a mesh with virtual nodes")
    nx, ny = mesh.grid_shape
    if nx % 2 or ny % 2:
        raise InvalidArgumentError(f"grid shape {mesh.grid_shape} is not even in both directions")
    cnx, cny = nx // 2, ny // 2
    ci, cj = np.meshgrid(np.arange(cnx + 1), np.arange(cny + 1))
    ids = (2 * ci + 2 * cj * (nx + 1)).ravel().astype(np.int64)
    template = structured_tri_mesh(cnx, cny)
    coarse = TriMesh(mesh.nodes[ids], template.triangles, mesh.boundary_flags[ids],
                     np.zeros(ids.size, bool), grid_shape=(cnx, cny))
    return coarse, ids


def coarsen(mesh):
    """Default coarsening for either dimension (stride 2 / even sublattice)."""
    if mesh.dim == 1:
        return coarsen_1d(mesh, 2)
    return coarsen_structured(mesh)


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


def _boundary_edges(mesh):
    counts = {}
    for tri in mesh.triangles[mesh.real_triangles].tolist():
        for k in range(3):
            key = _edge_key(tri[k], tri[(k + 1) % 3])
            counts[key] = counts.get(key, 0) + 1
    return {e for e, c in counts.items() if c == 1}


class _MidpointTable:
    def __init__(self, mesh):
        self.mesh = mesh
        self.boundary_edges = _boundary_edges(mesh)
        self.index = {}
        self.coords = []
        self.bflags = []
        self.vflags = []

    def __call__(self, a, b):
        key = _edge_key(a, b)
        if key not in self.index:
            m = self.mesh
            self.index[key] = m.n_nodes + len(self.coords)
            self.coords.append(0.5 * (m.nodes[a] + m.nodes[b]))
            self.bflags.append(key in self.boundary_edges)
            self.vflags.append(bool(m.virtual_flags[a] or m.virtual_flags[b]))
        return self.index[key]

    def build(self, triangles):
        m = self.mesh
        nodes = np.vstack([m.nodes, np.reshape(self.coords, (-1, 2))])
        bflags = np.concatenate([m.boundary_flags, np.asarray(self.bflags, bool)])
        vflags = np.concatenate([m.virtual_flags, np.asarray(self.vflags, bool)])
        return TriMesh(nodes, triangles, bflags, vflags)


def _bisect_1d(mesh):
    x = mesh.nodes
    out = np.empty(2 * x.size - 1)
    out[0::2] = x
    out[1::2] = 0.5 * (x[:-1] + x[1:])
    return Mesh1D(out)


def refine_bisection(mesh):
    """Split every element in two (2D: across its longest edge).

    In 2D the result is conforming on structured meshes, where all the
    longest edges are shared diagonals; in general it may carry hanging
    nodes.
    """
    if mesh.dim == 1:
        return _bisect_1d(mesh)
    mid = _MidpointTable(mesh)
    p = mesh.nodes
    out = []
    for tri in mesh.triangles.tolist():
        lengths = [np.sum((p[tri[(k + 2) % 3]] - p[tri[(k + 1) % 3]]) ** 2) for k in range(3)]
        k = int(np.argmax(lengths))
        a, b, c = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
        m = mid(b, c)
        out += [(a, b, m), (a, m, c)]
    return mid.build(np.asarray(out, dtype=np.int64))


def refine_midpoint(mesh):
    """Join edge mid-points: four children per triangle.

    Intervals have a single edge, so in 1D this coincides with bisection.
    """
    if mesh.dim == 1:
        return _bisect_1d(mesh)
    mid = _MidpointTable(mesh)
    out = []
    for a, b, c in mesh.triangles.tolist():
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    return mid.build(np.asarray(out, dtype=np.int64))


def patch(mesh, node):
    """Center first, then neighbors in canonical order.

    1D: left, right.  2D: counter-clockwise around the center.
    """
    if isinstance(node, bool) or not isinstance(node, (int, np.integer)):
        raise InvalidArgumentError(f"node index must be an integer, got {node!r}")
    if not 0 <= node < mesh.n_nodes:
        raise OutOfRangeError(f"node {node} outside 0..{mesh.n_nodes - 1}")
    node = int(node)
    return Patch(node, tuple([node] + mesh.neighbors(node)))


def patch_sizes(mesh):
    return np.array([1 + len(mesh.neighbors(j)) for j in range(mesh.n_nodes)])


def extend_mesh(mesh, target_patch_size=7):
    """Add one ghost layer of cells around a structured mesh.

    Original node indices are preserved; ghost nodes are appended and
    flagged virtual.
    """
    target_patch_size = check_positive_int(target_patch_size, "target_patch_size")
    sizes = patch_sizes(mesh)
    real = ~mesh.virtual_flags
    if np.all(sizes[real] == target_patch_size):
        return mesh
    if mesh.dim != 2 or mesh.grid_shape is None or np.any(mesh.virtual_flags):
        raise UnsupportedExtensionError("extension needs a structured triangulation")
    if target_patch_size != 7 or np.any(sizes > target_patch_size):
        raise UnsupportedExtensionError(
            f"patch-size {target_patch_size} is not reachable with one ghost layer")
    nx, ny = mesh.grid_shape
    ext = {}
    coords = []
    for j in range(-1, ny + 2):
        for i in range(-1, nx + 2):
            if 0 <= i <= nx and 0 <= j <= ny:
                ext[i, j] = i + j * (nx + 1)
            else:
                ext[i, j] = mesh.n_nodes + len(coords)
                coords.append((i / nx, j / ny))
    tris = [mesh.triangles]
    ghost = []
    for j in range(-1, ny + 1):
        for i in range(-1, nx + 1):
            if 0 <= i < nx and 0 <= j < ny:
                continue
            v00, v10 = ext[i, j], ext[i + 1, j]
            v01, v11 = ext[i, j + 1], ext[i + 1, j + 1]
            ghost += [(v00, v10, v11), (v00, v11, v01)]
    tris.append(np.asarray(ghost, dtype=np.int64))
    n_new = len(coords)
    out = TriMesh(
        np.vstack([mesh.nodes, np.asarray(coords)]),
        np.vstack(tris),
        np.concatenate([mesh.boundary_flags, np.zeros(n_new, bool)]),
        np.concatenate([np.zeros(mesh.n_nodes, bool), np.ones(n_new, bool)]),
    )
    if np.any(patch_sizes(out)[: mesh.n_nodes] != target_patch_size):
        raise UnsupportedExtensionError("ghost layer did not complete every patch")
    return out


def write_mesh(target, mesh):
    """Plain-text dump: header, coordinates, elements, then ``boundary virtual`` flags."""
    own = isinstance(target, (str, os.PathLike))
    fh = open(target, "w", encoding="utf-8") if own else target
    try:
        fh.write(f"{mesh.dim} {mesh.n_nodes} {mesh.n_elements}\n")
        coords = mesh.nodes.reshape(mesh.n_nodes, -1)
        for row in coords:
            fh.write(" ".join(format(v, ".17g") for v in row) + "\n")
        for el in mesh.elements:
            fh.write(" ".join(str(int(v)) for v in el) + "\n")
        for b, v in zip(mesh.boundary_flags, mesh.virtual_flags):
            fh.write(f"{int(b)} {int(v)}\n")
    finally:
        if own:
            fh.close()


def read_mesh(source):
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        raise InvalidArgumentError("source must be a path or a text stream")

    pos = 0

    def take(count, width, kind):
        nonlocal pos
        rows = []
        for _ in range(count):
            if pos >= len(lines):
                raise ParseError("unexpected end of file", pos + 1)
            parts = lines[pos].split()
            if len(parts) != width:
                raise ParseError(f"expected {width} values, got {len(parts)}", pos + 1)
            try:
                rows.append([kind(v) for v in parts])
            except ValueError as exc:
                raise ParseError(str(exc), pos + 1) from None
            pos += 1
        return rows

    dim, n_nodes, n_elements = take(1, 3, int)[0]
    if dim not in (1, 2):
        raise ParseError(f"unsupported dimension {dim}", 1)
    coords = np.asarray(take(n_nodes, dim, float), dtype=float)
    elements = np.asarray(take(n_elements, dim + 1, int), dtype=np.int64)
    flags = np.asarray(take(n_nodes, 2, int), dtype=bool)
    if any(line.strip() for line in lines[pos:]):
        raise ParseError("trailing content after mesh", pos + 1)
    if dim == 1:
        return Mesh1D(coords[:, 0])
    return TriMesh(coords, elements, flags[:, 0], flags[:, 1])
