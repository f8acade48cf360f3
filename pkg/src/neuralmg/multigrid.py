"""Multigrid hierarchies with exact or learned transfer operators.

Homogeneous Dirichlet conditions are handled by working on the free
(non-boundary, non-virtual) nodes only.  Each level keeps the full mass
matrix ``M`` and the full transfer ``Q`` to the next finer level, while the
solver uses ``A`` and the prolongation ``P`` restricted to free nodes.

``build_hierarchy_neural`` queries each patch-size model once per level,
fine to coarse, with the records of that size stacked in ascending
coarse-node order.
"""

from dataclasses import dataclass, field
import csv
import io
import math
import time

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dataset import extract_features, stencils
from .errors import (
    InvalidArgumentError,
    InvalidMatrixError,
    MissingModelError,
    SolverFailure,
    WrongFamilyError,
)
from .fem import assemble_load, assemble_mass, assemble_stiffness, clean, lump
from .l2proj import TransferOperator, assemble_coupling, galerkin_coarse, pseudo_projection
from .mesh import coarsen
from .validation import check_matrix, check_positive_int, check_vector

DENSE_COARSE_LIMIT = 500
SMOOTHERS = ("jacobi", "gauss-seidel")
COARSE_FEATURES = ("assembled", "galerkin")
REPORT_FIELDS = ("method", "levels", "dofs", "iterations", "final_relres", "setup_ms", "solve_ms")


@dataclass(frozen=True)
class SmootherConfig:
    kind: str = "jacobi"
    pre_sweeps: int = 2
    post_sweeps: int = 2
    omega: float = 2.0 / 3.0

    def __post_init__(self):
        if self.kind not in SMOOTHERS:
            raise InvalidArgumentError(f"unknown smoother {self.kind!r}, expected one of {SMOOTHERS}")
        check_positive_int(self.pre_sweeps, "pre_sweeps", minimum=0)
        check_positive_int(self.post_sweeps, "post_sweeps", minimum=0)
        if not 0.0 < float(self.omega) <= 2.0:
            raise InvalidArgumentError(f"omega must lie in (0, 2], got {self.omega}")


@dataclass(eq=False)
class Level:
    A: sp.csr_matrix
    M: sp.csr_matrix
    Q_to_finer: TransferOperator = None
    P: sp.csr_matrix = None
    free: np.ndarray = None
    mesh: object = None
    _solver: object = field(default=None, repr=False)

    @property
    def n_dofs(self):
        return self.A.shape[0]


@dataclass(eq=False)
class Hierarchy:
    levels: list
    smoother: SmootherConfig
    provenance: str
    setup_ms: float = 0.0

    def __post_init__(self):
        if len(self.levels) < 2:
            raise InvalidArgumentError("a hierarchy needs at least two levels")
        dofs = [lv.n_dofs for lv in self.levels]
        if any(a <= b for a, b in zip(dofs, dofs[1:])):
            raise InvalidArgumentError(f"dof counts must strictly decrease, got {dofs}")

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def n_dofs(self):
        return self.levels[0].n_dofs

    def with_levels(self, n):
        """The top ``n`` levels as a new hierarchy (shares the matrices)."""
        return Hierarchy(self.levels[:n], self.smoother, self.provenance, self.setup_ms)


def _free_nodes(mesh):
    return np.flatnonzero(~(mesh.boundary_flags | mesh.virtual_flags))


def _restrict(X, rows, cols):
    return clean(X[rows][:, cols])


def _finest_level(mesh):
    free = _free_nodes(mesh)
    M = assemble_mass(mesh)
    A = _restrict(assemble_stiffness(mesh), free, free)
    return Level(A=A, M=M, free=free, mesh=mesh)


def _coarse_level(fine_level, Q, mesh):
    free = _free_nodes(mesh)
    P = _restrict(Q.Q, fine_level.free, free)
    if P.shape[1] == 0:
        raise InvalidArgumentError("coarse mesh has no free nodes")
    return Level(A=galerkin_coarse(P, fine_level.A), M=galerkin_coarse(Q, fine_level.M),
                 Q_to_finer=Q, P=P, free=free, mesh=mesh)


def build_hierarchy_sgmg(meshes, smoother=None):
    """Hierarchy whose transfers are pseudo-L2 projections from mesh intersection.

    ``setup_ms`` is the time spent on the transfer operators (coupling
    assembly and scaling by the lumped mass).
    """
    meshes = list(meshes)
    if len(meshes) < 2:
        raise InvalidArgumentError("need at least two meshes, fine to coarse")
    levels = [_finest_level(meshes[0])]
    elapsed = 0
    for mesh in meshes[1:]:
        fine = levels[-1]
        t0 = time.perf_counter_ns()
        B = assemble_coupling(fine.mesh, mesh)
        Q = pseudo_projection(B, lump(fine.M))
        elapsed += time.perf_counter_ns() - t0
        levels.append(_coarse_level(fine, Q, mesh))
    return Hierarchy(levels, smoother or SmootherConfig(), "sgmg", elapsed / 1e6)


def _n_inputs(model):
    for name in ("n_inputs", "n_features_in_"):
        value = getattr(model, name, None)
        if value is not None:
            return int(value)
    return None


def predict_coupling(M, fine_mesh, coarse_mesh, coarse_ids, models):
    """Coupling matrix assembled from per-patch predictions.

    Entries predicted by more than one record are averaged.
    """
    sts = stencils(fine_mesh, coarse_mesh, coarse_ids)
    groups = {}
    for st in sts:
        groups.setdefault(st.size, []).append(st)
    missing = sorted(s for s in groups if s not in models)
    if missing:
        raise MissingModelError(missing[0])
    rows, cols, vals = [], [], []
    for size in sorted(groups):
        group = groups[size]
        shapes = {(st.n_features, st.n_targets) for st in group}
        if len(shapes) > 1:
            raise WrongFamilyError(
                f"patch-size {size} records have mixed layouts {sorted(shapes)}")
        n_feat, n_targ = shapes.pop()
        model = models[size]
        expected = _n_inputs(model)
        if expected is not None and expected != n_feat:
            raise WrongFamilyError(
                f"patch-size {size} model takes {expected} features, records have {n_feat}")
        X = np.array([extract_features(M, st)[0] for st in group])
        Y = np.asarray(model.predict(X), dtype=float)
        if Y.shape != (len(group), n_targ):
            raise WrongFamilyError(
                f"patch-size {size} model returned shape {Y.shape}, "
                f"expected {(len(group), n_targ)}")
        for st, y in zip(group, Y):
            w = len(st.coarse_columns)
            rows.append(np.repeat(st.members, w))
            cols.append(np.tile(st.coarse_columns, st.size))
            vals.append(y)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shape = (fine_mesh.n_nodes, coarse_mesh.n_nodes)
    total = sp.coo_matrix((np.concatenate(vals), (rows, cols)), shape=shape).tocsr()
    count = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=shape).tocsr()
    total.sum_duplicates()
    count.sum_duplicates()
    # identical sparsity since both come from the same (rows, cols)
    total.data /= count.data
    return clean(total)


def build_hierarchy_neural(fine_mesh, models, n_levels, smoother=None,
                           coarse_features="assembled"):
    """Hierarchy whose coupling matrices are predicted patch by patch.

    ``models`` maps a patch size to any object with ``predict(X)``.

    Below the finest level, ``coarse_features="assembled"`` reads the
    features (and the lumped mass that scales ``B``) from the mass matrix
    assembled on the coarsened mesh, which is what the models were trained
    on.  ``"galerkin"`` reads them from the Galerkin coarse mass instead,
    whose rows reach past the patch.  Both give the same lumped mass when
    the transfers preserve constants.

    ``setup_ms`` covers coarsening, patch extraction, prediction and
    assembly of the transfers; no mesh intersection is computed.
    """
    n_levels = check_positive_int(n_levels, "n_levels", minimum=2)
    if coarse_features not in COARSE_FEATURES:
        raise InvalidArgumentError(
            f"coarse_features must be one of {COARSE_FEATURES}, got {coarse_features!r}")
    levels = [_finest_level(fine_mesh)]
    elapsed = 0
    for k in range(n_levels - 1):
        fine = levels[-1]
        t0 = time.perf_counter_ns()
        coarse_mesh, ids = coarsen(fine.mesh)
        if k == 0 or coarse_features == "galerkin":
            M = fine.M
        else:
            M = assemble_mass(fine.mesh)
        B = predict_coupling(M, fine.mesh, coarse_mesh, ids, models)
        Q = pseudo_projection(B, lump(M))
        Q = TransferOperator(Q.Q, "predicted")
        elapsed += time.perf_counter_ns() - t0
        levels.append(_coarse_level(fine, Q, coarse_mesh))
    return Hierarchy(levels, smoother or SmootherConfig(), "neural", elapsed / 1e6)


def mesh_sequence(fine_mesh, n_levels):
    """``fine_mesh`` and its ``n_levels - 1`` successive coarsenings."""
    meshes = [fine_mesh]
    for _ in range(n_levels - 1):
        meshes.append(coarsen(meshes[-1])[0])
    return meshes


def smooth(A, b, x, kind="jacobi", sweeps=1, omega=2.0 / 3.0):
    A = check_matrix(A, "A", square=True)
    b = check_vector(b, "b", A.shape[0])
    x = check_vector(x, "x", A.shape[0]).copy()
    if kind not in SMOOTHERS:
        raise InvalidArgumentError(f"unknown smoother {kind!r}")
    d = A.diagonal()
    if np.any(d == 0):
        raise InvalidMatrixError("smoother needs a nonzero diagonal")
    if kind == "jacobi":
        for _ in range(sweeps):
            x += omega * (b - A @ x) / d
        return x
    L = sp.tril(A, format="csr")
    U = sp.triu(A, k=1, format="csr")
    for _ in range(sweeps):
        x = spla.spsolve_triangular(L, b - U @ x, lower=True)
    return x


class _CoarseSolver:
    """Dense Cholesky up to ``DENSE_COARSE_LIMIT`` dofs, sparse LU above."""

    def __init__(self, A):
        n = A.shape[0]
        try:
            if n <= DENSE_COARSE_LIMIT:
                self._chol = sla.cho_factor(A.toarray())
                self._lu = None
            else:
                self._chol = None
                self._lu = spla.splu(sp.csc_matrix(A))
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            raise SolverFailure(f"coarse matrix could not be factorized: {exc}") from None

    def __call__(self, r):
        if self._chol is not None:
            return sla.cho_solve(self._chol, r)
        return self._lu.solve(r)


def _coarse_solve(level, r):
    if level._solver is None:
        level._solver = _CoarseSolver(level.A)
    return level._solver(r)


def _cycle(hier, b, x, k, last):
    lv = hier.levels[k]
    if k == last:
        return _coarse_solve(lv, b)
    cfg = hier.smoother
    x = smooth(lv.A, b, x, cfg.kind, cfg.pre_sweeps, cfg.omega)
    P = hier.levels[k + 1].P
    rc = P.T @ (b - lv.A @ x)
    ec = _cycle(hier, rc, np.zeros(P.shape[1]), k + 1, last)
    x = x + P @ ec
    return smooth(lv.A, b, x, cfg.kind, cfg.post_sweeps, cfg.omega)


def two_grid_step(hier, b, x):
    """One two-grid correction on the top two levels with an exact coarse solve."""
    b = check_vector(b, "b", hier.n_dofs)
    x = check_vector(x, "x", hier.n_dofs)
    return _cycle(hier, b, x, 0, 1)


def vcycle(hier, b, x):
    b = check_vector(b, "b", hier.n_dofs)
    x = check_vector(x, "x", hier.n_dofs)
    return _cycle(hier, b, x, 0, hier.n_levels - 1)


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    history: list
    converged: bool
    solve_ms: float = 0.0

    @property
    def final_relres(self):
        return self.history[-1] if self.history else 0.0

    def __iter__(self):
        return iter((self.x, self.iterations, self.history))


def solve(hier, b, tol=1e-8, max_iter=100, x0=None):
    """V-cycle iteration until the relative residual drops below ``tol``.

    Not converging is reported through ``converged``; the history is kept.
    """
    if not tol > 0:
        raise InvalidArgumentError(f"tol must be positive, got {tol}")
    max_iter = check_positive_int(max_iter, "max_iter", minimum=0)
    b = check_vector(b, "b", hier.n_dofs)
    x = np.zeros(hier.n_dofs) if x0 is None else check_vector(x0, "x0", hier.n_dofs).copy()
    A = hier.levels[0].A
    t0 = time.perf_counter_ns()
    norm_b = np.linalg.norm(b)
    history = []
    if norm_b == 0.0:
        return SolveResult(np.zeros_like(x), 0, history, True, 0.0)
    converged = False
    for _ in range(max_iter):
        x = _cycle(hier, b, x, 0, hier.n_levels - 1)
        rel = float(np.linalg.norm(b - A @ x) / norm_b)
        history.append(rel)
        if rel < tol:
            converged = True
            break
        if not math.isfinite(rel):
            break
    return SolveResult(x, len(history), history, converged, (time.perf_counter_ns() - t0) / 1e6)


def contraction_factor(history):
    """Geometric mean of the residual reduction per iteration."""
    h = np.asarray(history, dtype=float)
    if len(h) == 0:
        return 0.0
    return float(h[-1] ** (1.0 / len(h)))


def poisson_rhs(hier, f=None):
    """Load vector of ``-u'' = f`` (or ``-Lap u = f``) on the free fine nodes."""
    lv = hier.levels[0]
    if f is None:
        f = (lambda x: np.ones_like(x)) if lv.mesh.dim == 1 else (lambda x, y: np.ones_like(x))
    return assemble_load(lv.mesh, f)[lv.free]


def expand(hier, x):
    """Free-node vector to a full nodal vector with zero boundary values."""
    lv = hier.levels[0]
    out = np.zeros(lv.mesh.n_nodes)
    out[lv.free] = x
    return out


def report_row(method, hier, result):
    return {
        "method": method,
        "levels": hier.n_levels,
        "dofs": hier.n_dofs,
        "iterations": result.iterations,
        "final_relres": f"{result.final_relres:.6e}",
        "setup_ms": f"{hier.setup_ms:.3f}",
        "solve_ms": f"{result.solve_ms:.3f}",
    }


def write_report(target, rows):
    """Solve-report CSV with the columns of ``REPORT_FIELDS``."""
    own = not hasattr(target, "write")
    fh = open(target, "w", encoding="utf-8", newline="") if own else target
    try:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    finally:
        if own:
            fh.close()


def report_text(rows):
    buf = io.StringIO()
    write_report(buf, rows)
    return buf.getvalue()
