"""Exact L2-projection transfer operators from mesh intersections.

The coupling matrix ``B[i, j] = int phi_i psi_j`` (fine basis ``phi``,
coarse basis ``psi``) is integrated over the pieces of the common
refinement of both meshes, so the result is exact up to roundoff.
"""

from dataclasses import dataclass
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgumentError, InvalidMassError, SolverFailure
from .fem import clean, csr_from_triplets
from .validation import check_matrix, check_vector

# Intersection pieces smaller than this fraction of the fine element are
# roundoff slivers from coincident edges.
SLIVER_TOL = 1e-14

_DOMAIN_TOL = 1e-12


class IntersectionCounter:
    """Counts calls into the geometric intersection kernels."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


intersection_counter = IntersectionCounter()


@dataclass(frozen=True)
class Polygon2D:
    """Convex polygon, vertices counter-clockwise."""

    vertices: np.ndarray

    @property
    def area(self):
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def __len__(self):
        return len(self.vertices)


@dataclass(frozen=True)
class TransferOperator:
    """Prolongation ``Q`` (fine x coarse); restriction is ``Q.T``."""

    Q: sp.csr_matrix
    kind: str

    KINDS = ("pseudo", "consistent", "predicted")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InvalidArgumentError(f"unknown transfer kind {self.kind!r}")
        n_h, n_H = self.Q.shape
        if n_h < n_H:
            raise InvalidArgumentError(f"prolongation must map coarse to fine, got shape {self.Q.shape}")

    @property
    def shape(self):
        return self.Q.shape

    def constant_defect(self):
        """``max |Q 1 - 1|``; zero for an exact projection."""
        return float(np.max(np.abs(self.Q @ np.ones(self.Q.shape[1]) - 1.0)))


def _check_same_domain(fine, coarse):
    if fine.dim != coarse.dim:
        raise InvalidArgumentError("meshes have different dimensions")
    if fine.dim == 1:
        scale = max(fine.measure, 1.0)
        if abs(fine.a - coarse.a) > _DOMAIN_TOL * scale or abs(fine.b - coarse.b) > _DOMAIN_TOL * scale:
            raise InvalidArgumentError(
                f"domains differ: [{fine.a}, {fine.b}] vs [{coarse.a}, {coarse.b}]")
        return
    real_f = fine.nodes[np.unique(fine.triangles[fine.real_triangles])]
    real_c = coarse.nodes[np.unique(coarse.triangles[coarse.real_triangles])]
    box_f = np.r_[real_f.min(0), real_f.max(0)]
    box_c = np.r_[real_c.min(0), real_c.max(0)]
    scale = max(1.0, float(np.abs(box_f).max()))
    if (np.abs(box_f - box_c).max() > _DOMAIN_TOL * scale
            or abs(fine.measure - coarse.measure) > _DOMAIN_TOL * scale ** 2):
        raise InvalidArgumentError("meshes do not cover the same domain")


def _segments_1d(fine, coarse):
    intersection_counter.count += 1
    breaks = np.union1d(fine.nodes, coarse.nodes)
    lo, hi = breaks[:-1], breaks[1:]
    length = hi - lo
    mid = 0.5 * (lo + hi)
    fe = np.clip(np.searchsorted(fine.nodes, mid) - 1, 0, fine.n_elements - 1)
    ce = np.clip(np.searchsorted(coarse.nodes, mid) - 1, 0, coarse.n_elements - 1)
    keep = length >= SLIVER_TOL * np.diff(fine.nodes)[fe]
    return fe[keep], ce[keep], lo[keep], hi[keep]


def intersect_1d(fine, coarse):
    """Common refinement of two interval meshes over the same domain.

    Returns ``(fine_element, coarse_element, (x0, x1))`` per segment.
    """
    _check_same_domain(fine, coarse)
    fe, ce, lo, hi = _segments_1d(fine, coarse)
    return [(int(f), int(c), (float(a), float(b))) for f, c, a, b in zip(fe, ce, lo, hi)]


def _clip(poly, a, b):
    """Keep the part of ``poly`` left of the directed line ``a -> b``."""
    ax, ay = a
    ex, ey = b[0] - ax, b[1] - ay
    out = []
    n = len(poly)
    for k in range(n):
        px, py = poly[k]
        qx, qy = poly[(k + 1) % n]
        dp = ex * (py - ay) - ey * (px - ax)
        dq = ex * (qy - ay) - ey * (qx - ax)
        if dp >= 0:
            out.append((px, py))
        if (dp >= 0) != (dq >= 0):
            t = dp / (dp - dq)
            out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def _dedupe(poly):
    xs = [p[0] for p in poly]
    ys = [p[1] for p in poly]
    tol = 1e-14 * max(max(xs) - min(xs), max(ys) - min(ys))
    out = []
    for p in poly:
        if not out or abs(p[0] - out[-1][0]) > tol or abs(p[1] - out[-1][1]) > tol:
            out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= tol and abs(out[0][1] - out[-1][1]) <= tol:
        out.pop()
    return out


def _polygon_area(poly):
    area = 0.0
    n = len(poly)
    for k in range(n):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % n]
        area += x0 * y1 - x1 * y0
    return 0.5 * area


def _intersect(t1, t2):
    intersection_counter.count += 1
    poly = t1
    for k in range(3):
        poly = _clip(poly, t2[k], t2[(k + 1) % 3])
        if len(poly) < 3:
            return None, 0.0
    poly = _dedupe(poly)
    if len(poly) < 3:
        return None, 0.0
    area = _polygon_area(poly)
    if area <= 0.0:
        return None, 0.0
    return poly, area


def intersect_tri(t1, t2):
    """Intersection of two counter-clockwise triangles, or ``None`` if empty.

    ``t1`` is clipped successively against the three edges of ``t2``.
    """
    t1 = [tuple(map(float, p)) for p in t1]
    t2 = [tuple(map(float, p)) for p in t2]
    poly, _ = _intersect(t1, t2)
    if poly is None:
        return None
    return Polygon2D(np.asarray(poly))


def triangulate_polygon(p):
    """Fan triangulation of a convex polygon from its first vertex."""
    v = p.vertices if isinstance(p, Polygon2D) else np.asarray(p, float)
    if len(v) < 3:
        return []
    return [np.array([v[0], v[k], v[k + 1]]) for k in range(1, len(v) - 1)]


def _barycentric_maps(mesh):
    """Per triangle: origin and the 2x2 inverse of the edge matrix."""
    p = mesh.nodes[mesh.triangles]
    E = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns are edges
    return p[:, 0], np.linalg.inv(E)


def _barycentric(origin, inv, pts):
    """Barycentric coordinates of ``pts[s, q]`` in triangle ``s``."""
    lam12 = np.einsum("sqd,skd->sqk", pts - origin[:, None, :], inv)
    return np.concatenate([1.0 - lam12.sum(axis=2, keepdims=True), lam12], axis=2)


class _BucketGrid:
    """Uniform bucket grid over triangle bounding boxes."""

    def __init__(self, mesh):
        p = mesh.nodes[mesh.triangles]
        lo, hi = p.min(axis=1), p.max(axis=1)
        self.lo, self.hi = lo.tolist(), hi.tolist()
        self.x0, self.y0 = (float(v) for v in lo.min(axis=0))
        extent = hi.max(axis=0) - lo.min(axis=0)
        self.size = math.sqrt(2.0 * float(np.mean(mesh.element_measures())))
        self.nx, self.ny = (max(1, int(math.ceil(v / self.size))) for v in extent)
        self.buckets = {}
        for t in range(len(p)):
            i0, j0 = self._cell(self.lo[t])
            i1, j1 = self._cell(self.hi[t])
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    self.buckets.setdefault((i, j), []).append(t)

    def _cell(self, x):
        i = min(max(int((x[0] - self.x0) // self.size), 0), self.nx - 1)
        j = min(max(int((x[1] - self.y0) // self.size), 0), self.ny - 1)
        return i, j

    def query(self, lo, hi):
        i0, j0 = self._cell(lo)
        i1, j1 = self._cell(hi)
        found = set()
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                found.update(self.buckets.get((i, j), ()))
        out = []
        for t in sorted(found):
            tl, th = self.lo[t], self.hi[t]
            if tl[0] <= hi[0] and tl[1] <= hi[1] and lo[0] <= th[0] and lo[1] <= th[1]:
                out.append(t)
        return out


def _coupling_1d(fine, coarse, rows):
    fe, ce, lo, hi = _segments_1d(fine, coarse)
    g = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])
    x = lo[:, None] + (hi - lo)[:, None] * g[None, :]
    w = 0.5 * (hi - lo)[:, None]
    xf, xc = fine.nodes, coarse.nodes
    phi_r = (x - xf[fe][:, None]) / (xf[fe + 1] - xf[fe])[:, None]
    psi_r = (x - xc[ce][:, None]) / (xc[ce + 1] - xc[ce])[:, None]
    phis = [1.0 - phi_r, phi_r]
    psis = [1.0 - psi_r, psi_r]
    R, C, V = [], [], []
    for a in range(2):
        for b in range(2):
            R.append(fe + a)
            C.append(ce + b)
            V.append(np.sum(w * phis[a] * psis[b], axis=1))
    R, C, V = np.concatenate(R), np.concatenate(C), np.concatenate(V)
    if rows is not None:
        mask = np.isin(R, rows)
        R, C, V = R[mask], C[mask], V[mask]
    return csr_from_triplets(R, C, V, (fine.n_nodes, coarse.n_nodes))


def _coupling_2d(fine, coarse, rows):
    grid = _BucketGrid(coarse)
    f_pts = fine.nodes[fine.triangles]
    f_tris = [[tuple(p) for p in tri] for tri in f_pts.tolist()]
    c_tris = [[tuple(p) for p in tri] for tri in coarse.nodes[coarse.triangles].tolist()]
    f_area = fine.element_measures().tolist()
    f_lo, f_hi = f_pts.min(axis=1).tolist(), f_pts.max(axis=1).tolist()
    wanted = None if rows is None else np.isin(np.arange(fine.n_nodes), rows)

    # collect the fan triangles of every intersection polygon, integrate later
    pieces, owner_f, owner_c = [], [], []
    for e in range(fine.n_elements):
        if wanted is not None and not wanted[fine.triangles[e]].any():
            continue
        tri = f_tris[e]
        for E in grid.query(f_lo[e], f_hi[e]):
            poly, area = _intersect(tri, c_tris[E])
            if poly is None or area < SLIVER_TOL * f_area[e]:
                continue
            for k in range(1, len(poly) - 1):
                pieces.append((poly[0], poly[k], poly[k + 1]))
                owner_f.append(e)
                owner_c.append(E)
    if not pieces:
        return sp.csr_matrix((fine.n_nodes, coarse.n_nodes))

    T = np.asarray(pieces)
    owner_f = np.asarray(owner_f)
    owner_c = np.asarray(owner_c)
    d1, d2 = T[:, 1] - T[:, 0], T[:, 2] - T[:, 0]
    weight = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / 6.0  # area / 3
    qp = 0.5 * (T + np.roll(T, -1, axis=1))  # edge midpoints, exact for quadratics
    f_origin, f_inv = _barycentric_maps(fine)
    c_origin, c_inv = _barycentric_maps(coarse)
    phi = _barycentric(f_origin[owner_f], f_inv[owner_f], qp)
    psi = _barycentric(c_origin[owner_c], c_inv[owner_c], qp)
    local = np.einsum("s,sqa,sqb->sab", weight, phi, psi)
    R = np.repeat(fine.triangles[owner_f], 3, axis=1).ravel()
    C = np.tile(coarse.triangles[owner_c], (1, 3)).ravel()
    V = local.ravel()
    if wanted is not None:
        mask = wanted[R]
        R, C, V = R[mask], C[mask], V[mask]
    return csr_from_triplets(R, C, V, (fine.n_nodes, coarse.n_nodes))


def assemble_coupling(fine, coarse, rows=None):
    """Coupling matrix ``B`` of shape ``(fine.n_nodes, coarse.n_nodes)``.

    ``rows`` optionally restricts the assembly to a subset of fine rows
    (the others are left empty), which saves work when only a few local
    rows are needed.
    """
    _check_same_domain(fine, coarse)
    if rows is not None:
        rows = np.unique(np.asarray(rows, dtype=np.int64))
    if fine.dim == 1:
        return _coupling_1d(fine, coarse, rows)
    return _coupling_2d(fine, coarse, rows)


def pseudo_projection(B, D):
    """``Q = diag(D)^-1 B`` with ``D`` the lumped fine mass."""
    B = check_matrix(B, "B")
    D = check_vector(D, "D", B.shape[0])
    if np.any(D <= 0):
        raise InvalidMassError("lumped mass must be positive")
    return TransferOperator(clean(sp.diags(1.0 / D) @ B), "pseudo")


def _cg(M, rhs, tol, maxiter):
    x, info = spla.cg(M, rhs, rtol=tol, atol=0.0, maxiter=maxiter)
    if info != 0:
        raise SolverFailure(f"CG did not reach relative residual {tol:g} in {maxiter} iterations")
    return x


def consistent_projection(B, M, tol=1e-12):
    """``Q = M^-1 B`` by conjugate gradients, one column at a time."""
    B = check_matrix(B, "B")
    M = check_matrix(M, "M", square=True)
    if M.shape[0] != B.shape[0]:
        raise InvalidArgumentError("M and B have incompatible shapes")
    n = M.shape[0]
    cols = []
    for j in range(B.shape[1]):
        q = _cg(M, B[:, [j]].toarray().ravel(), tol, 10 * n)
        q[np.abs(q) < 1e-13] = 0.0
        cols.append(sp.csr_matrix(q[:, None]))
    Q = sp.hstack(cols, format="csr") if cols else sp.csr_matrix(B.shape)
    return TransferOperator(clean(Q), "consistent")


def galerkin_coarse(Q, X):
    """Galerkin triple product ``Q^T X Q`` (symmetrized when ``X`` is)."""
    if isinstance(Q, TransferOperator):
        Q = Q.Q
    Q = check_matrix(Q, "Q")
    X = check_matrix(X, "X", square=True)
    if X.shape[0] != Q.shape[0]:
        raise InvalidArgumentError(f"cannot form Q^T X Q with Q {Q.shape} and X {X.shape}")
    R = (Q.T @ (X @ Q)).tocsr()
    diff = X - X.T
    scale = abs(X).max() if X.nnz else 0.0
    if diff.nnz == 0 or abs(diff).max() <= 1e-14 * scale:
        R = 0.5 * (R + R.T)
    return clean(R)
