"""P1 finite-element assembly for the Poisson model problem.

Matrices are ``scipy.sparse.csr_matrix`` with sorted column indices and no
stored entries below ``DROP_TOL`` times the largest entry in magnitude.
"""

import os

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateMeshError, InvalidArgumentError, InvalidMassError, ParseError
from .validation import check_matrix, check_vector

DROP_TOL = 1e-15

_MASS_1D = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
_MASS_2D = (np.ones((3, 3)) + np.eye(3)) / 12.0


def csr_from_triplets(rows, cols, vals, shape):
    """Sum duplicates, drop tiny entries and sort indices."""
    A = sp.coo_matrix((np.asarray(vals, float), (np.asarray(rows), np.asarray(cols))),
                      shape=shape).tocsr()
    return clean(A)


def clean(A, tol=DROP_TOL):
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    if A.nnz:
        A.data[np.abs(A.data) < tol * np.abs(A.data).max()] = 0.0
    A.eliminate_zeros()
    A.sort_indices()
    return A


def _measures(mesh):
    meas = mesh.element_measures()
    if np.any(meas <= 0):
        raise DegenerateMeshError("mesh has an element with non-positive measure")
    return meas


def _scatter(mesh, local):
    """Assemble per-element dense blocks ``local[e]`` into a global matrix."""
    el = mesh.elements
    k = el.shape[1]
    rows = np.repeat(el, k, axis=1).ravel()
    cols = np.tile(el, (1, k)).ravel()
    n = mesh.n_nodes
    return csr_from_triplets(rows, cols, local.ravel(), (n, n))


def assemble_mass(mesh):
    meas = _measures(mesh)
    ref = _MASS_1D if mesh.dim == 1 else _MASS_2D
    return _scatter(mesh, meas[:, None, None] * ref)


def _p1_gradients(mesh):
    """Per-triangle gradients of the three barycentric hat functions."""
    p = mesh.nodes[mesh.triangles]
    area = _measures(mesh)
    x, y = p[..., 0], p[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    return np.stack([b, c], axis=2) / (2.0 * area[:, None, None]), area


def assemble_stiffness(mesh):
    if mesh.dim == 1:
        h = _measures(mesh)
        local = np.array([[1.0, -1.0], [-1.0, 1.0]])[None] / h[:, None, None]
        return _scatter(mesh, local)
    grads, area = _p1_gradients(mesh)
    local = area[:, None, None] * np.einsum("eid,ejd->eij", grads, grads)
    return _scatter(mesh, local)


def _evaluate(f, *coords):
    shape = coords[0].shape
    return np.broadcast_to(np.asarray(f(*coords), dtype=float), shape)


def assemble_load(mesh, f):
    """Load vector ``b_i = int f phi_i``.

    1D uses two-point Gauss per element, 2D the edge-midpoint rule; both are
    exact when ``f`` is linear.
    """
    n = mesh.n_nodes
    meas = _measures(mesh)
    if mesh.dim == 1:
        x0 = mesh.nodes[:-1]
        g = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
        pts = x0[:, None] + meas[:, None] * g[None, :]
        fv = _evaluate(f, pts)
        w = 0.5 * meas[:, None] * fv
        left = np.sum(w * (1.0 - g), axis=1)
        right = np.sum(w * g, axis=1)
        return np.bincount(mesh.elements.ravel(), np.column_stack([left, right]).ravel(), n)
    p = mesh.nodes[mesh.triangles]
    mids = 0.5 * (p + np.roll(p, -1, axis=1))  # midpoint of edge (i, i+1)
    fv = _evaluate(f, mids[..., 0], mids[..., 1])
    w = meas[:, None] / 3.0 * fv
    # vertex i touches the edges (i, i+1) and (i-1, i), each with basis value 1/2
    contrib = 0.5 * (w + np.roll(w, 1, axis=1))
    return np.bincount(mesh.triangles.ravel(), contrib.ravel(), n)


def lump(M):
    """Row sums of ``M`` (the diagonal of the lumped mass matrix)."""
    M = check_matrix(M, "M", square=True)
    d = np.asarray(M.sum(axis=1)).ravel()
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise InvalidMassError("lumped mass has a non-positive entry")
    return d


def apply_dirichlet(A, b, boundary_flags):
    """Homogeneous Dirichlet elimination: boundary rows and columns become
    identity, boundary loads become zero."""
    A = check_matrix(A, "A", square=True)
    flags = np.asarray(boundary_flags, dtype=bool)
    b = check_vector(b, "b", A.shape[0])
    if flags.shape != (A.shape[0],):
        raise InvalidArgumentError("boundary_flags must have one entry per row")
    keep = sp.diags((~flags).astype(float))
    A2 = keep @ A @ keep + sp.diags(flags.astype(float))
    b2 = np.where(flags, 0.0, b)
    return clean(A2), b2


def write_sparse(target, A):
    """Matrix-market-style text: ``rows cols nnz`` then 1-based ``i j v``."""
    A = sp.coo_matrix(clean(A))
    own = isinstance(target, (str, os.PathLike))
    fh = open(target, "w", encoding="utf-8") if own else target
    try:
        fh.write(f"{A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            fh.write(f"{i + 1} {j + 1} {v:.17g}\n")
    finally:
        if own:
            fh.close()


def read_sparse(source):
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    else:
        lines = source.read().splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    try:
        n, m, nnz = (int(v) for v in lines[0].split())
    except ValueError:
        raise ParseError("bad header, expected 'rows cols nnz'", 1) from None
    if len(lines) - 1 < nnz:
        raise ParseError(f"expected {nnz} entries, found {len(lines) - 1}", len(lines))
    rows, cols, vals = [], [], []
    for k in range(1, nnz + 1):
        parts = lines[k].split()
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except (ValueError, IndexError):
            raise ParseError("bad triple", k + 1) from None
        if not (1 <= i <= n and 1 <= j <= m):
            raise ParseError(f"index ({i}, {j}) out of range", k + 1)
        rows.append(i - 1)
        cols.append(j - 1)
        vals.append(v)
    return csr_from_triplets(rows, cols, vals, (n, m))
