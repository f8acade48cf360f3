"""Patch records for learning rows of the coupling operator.

A record belongs to a coarse node ``J`` (fine index ``j``).  Its features
are the mass-matrix rows of every member of ``patch(j)`` restricted to that
member's own patch columns; its target is the coupling rows of the same
members restricted to the coarse patch of ``J``.
"""

from dataclasses import dataclass, field
import math
import os

import numpy as np

from .errors import InvalidArgumentError, ParseError, WrongFamilyError
from .fem import assemble_mass
from .l2proj import assemble_coupling
from .mesh import coarsen, jitter_mesh, patch, structured_tri_mesh, uniform_mesh_1d
from .validation import check_positive_int

INTERIOR_PATCH_SIZE = {1: 3, 2: 7}
TEST_FRACTION = 0.2
VALIDATION_FRACTION = 0.2


@dataclass(frozen=True)
class PatchStencil:
    """Where a record reads its numbers from."""

    coarse_center: int
    members: tuple
    member_columns: tuple
    coarse_columns: tuple

    @property
    def size(self):
        return len(self.members)

    @property
    def n_features(self):
        return sum(len(c) for c in self.member_columns)

    @property
    def n_targets(self):
        return len(self.members) * len(self.coarse_columns)


@dataclass(eq=False)
class PatchRecord:
    features: np.ndarray
    target: np.ndarray
    class_id: int
    patch_size: int
    aux_lumped: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, PatchRecord):
            return NotImplemented
        return (self.class_id == other.class_id and self.patch_size == other.patch_size
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.target, other.target)
                and np.array_equal(self.aux_lumped, other.aux_lumped))

    def q_rows(self):
        """Target reshaped to one row per member, scaled by the lumped mass."""
        return self.target.reshape(self.patch_size, -1) / self.aux_lumped[:, None]


@dataclass(frozen=True)
class DatasetManifest:
    dimension: int
    patch_size: int
    classes: tuple
    schedule_kind: str
    seed: int
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise InvalidArgumentError(f"dimension must be 1 or 2, got {self.dimension}")
        if self.schedule_kind not in ("linear", "refinement"):
            raise InvalidArgumentError(f"unknown schedule kind {self.schedule_kind!r}")
        classes = tuple((int(n), int(c)) for n, c in self.classes)
        if len({c for _, c in classes}) > 1:
            raise InvalidArgumentError("every class must hold the same number of records")
        object.__setattr__(self, "classes", classes)

    @property
    def class_ids(self):
        return [n for n, _ in self.classes]

    @property
    def n_records(self):
        return sum(c for _, c in self.classes)


@dataclass(frozen=True)
class BalanceReport:
    classes: tuple
    gaps: tuple
    gap_ratio: float

    def summary(self):
        gaps = ", ".join(str(g) for g in self.gaps) or "-"
        verdict = "even" if self.gap_ratio == 1.0 else "uneven"
        return (f"classes: {len(self.classes)}  gaps: [{gaps}]  "
                f"max/min gap ratio: {self.gap_ratio:g} ({verdict})")


def _row_values(A, k, cols):
    """Entries ``A[k, cols]`` of a CSR matrix with sorted indices."""
    lo, hi = A.indptr[k], A.indptr[k + 1]
    idx = A.indices[lo:hi]
    cols = np.asarray(cols)
    pos = np.searchsorted(idx, cols)
    pos_c = np.minimum(pos, max(len(idx) - 1, 0))
    hit = (pos < len(idx)) & (idx[pos_c] == cols) if len(idx) else np.zeros(len(cols), bool)
    out = np.zeros(len(cols))
    out[hit] = A.data[lo:hi][pos_c[hit]]
    return out


def stencil(fine, coarse, coarse_ids, J):
    """Layout of the record centered at coarse node ``J``."""
    p = patch(fine, int(coarse_ids[J]))
    return PatchStencil(
        coarse_center=int(J),
        members=p.members,
        member_columns=tuple(patch(fine, k).members for k in p.members),
        coarse_columns=patch(coarse, int(J)).members,
    )


def stencils(fine, coarse, coarse_ids):
    return [stencil(fine, coarse, coarse_ids, J) for J in range(coarse.n_nodes)]


def _layout_key(st):
    return (st.size, st.n_features, st.n_targets)


def family_layout(dimension, patch_size):
    """``(n_features, n_targets)`` of the record family for ``patch_size``.

    Read off a reference mesh so that interior families require every
    member to be an interior node as well.
    """
    base = uniform_mesh_1d(8) if dimension == 1 else structured_tri_mesh(8, 8)
    coarse, ids = coarsen(base)
    for st in stencils(base, coarse, ids):
        if st.size == patch_size:
            return st.n_features, st.n_targets
    raise InvalidArgumentError(f"no {dimension}D record family with patch-size {patch_size}")


def extract_record(M, B, p, class_id, layout=None):
    """Cut one record out of assembled ``M`` and ``B``.

    ``layout`` is the expected ``(n_features, n_targets)`` of the model
    family; a stencil of another shape raises :class:`WrongFamilyError`.
    """
    if layout is not None and (p.n_features, p.n_targets) != tuple(layout):
        raise WrongFamilyError(
            f"patch with {p.n_features} features / {p.n_targets} targets does not fit "
            f"family layout {tuple(layout)}")
    features, aux = extract_features(M, p)
    target = np.concatenate([_row_values(B, k, p.coarse_columns) for k in p.members])
    return PatchRecord(features, target, int(class_id), p.size, aux)


def extract_features(M, p):
    """Feature vector of stencil ``p`` and the lumped mass of its members."""
    feats = [_row_values(M, k, cols) for k, cols in zip(p.members, p.member_columns)]
    aux = np.array([M.data[M.indptr[k]:M.indptr[k + 1]].sum() for k in p.members])
    return np.concatenate(feats), aux


def class_schedule_linear(N0, K, count):
    N0 = check_positive_int(N0, "N0")
    K = check_positive_int(K, "K")
    count = check_positive_int(count, "count")
    return [N0 + i * K for i in range(count)]


def class_schedule_refinement(N0, factor, levels):
    N0 = check_positive_int(N0, "N0")
    levels = check_positive_int(levels, "levels")
    if factor not in (2, 4):
        raise InvalidArgumentError(f"refinement factor must be 2 or 4, got {factor}")
    return [N0 * factor ** i for i in range(levels)]


def class_mesh(dimension, N):
    """Unperturbed mesh with exactly ``N`` elements.

    In 2D, ``N = 2 nx ny`` with both ``nx`` and ``ny`` even (so that the
    sublattice coarsening applies); the most nearly square factorization is
    used.
    """
    N = check_positive_int(N, "N")
    if dimension == 1:
        return uniform_mesh_1d(N)
    if N % 8:
        raise InvalidArgumentError(f"a 2D class needs N divisible by 8, got {N}")
    cells = N // 8  # = (nx/2) * (ny/2)
    a = int(math.isqrt(cells))
    while cells % a:
        a -= 1
    return structured_tri_mesh(2 * (cells // a), 2 * a)


def _derive_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def generate_class(dimension, N, records_per_class, seed, patch_size=None, gamma=0.25):
    """Records of class ``C_N`` from independently jittered ``N``-element meshes.

    Every coarse node whose stencil matches the family layout contributes
    one record per mesh, in coarse-node order, until ``records_per_class``
    records are collected.
    """
    records_per_class = check_positive_int(records_per_class, "records_per_class", minimum=0)
    if patch_size is None:
        patch_size = INTERIOR_PATCH_SIZE[dimension]
    layout = family_layout(dimension, patch_size)
    base = class_mesh(dimension, N)
    try:
        coarse0, ids0 = coarsen(base)
    except InvalidArgumentError as exc:
        raise InvalidArgumentError(f"class N={N} is too small to coarsen: {exc}") from None
    eligible = [st.coarse_center for st in stencils(base, coarse0, ids0)
                if _layout_key(st) == (patch_size,) + layout]
    if not eligible:
        raise InvalidArgumentError(
            f"class N={N} has no coarse node with a full patch-size {patch_size} stencil")
    out = []
    index = 0
    while len(out) < records_per_class:
        fine = jitter_mesh(base, gamma, _derive_seed(seed, N, index))
        index += 1
        coarse, ids = coarsen(fine)
        chosen = [stencil(fine, coarse, ids, J) for J in eligible]
        chosen = chosen[: records_per_class - len(out)]
        rows = sorted({k for st in chosen for k in st.members})
        M = assemble_mass(fine)
        B = assemble_coupling(fine, coarse, rows=rows)
        out.extend(extract_record(M, B, st, N, layout) for st in chosen)
    return out


def build_dataset(dimension, schedule, records_per_class, seed, schedule_kind="linear",
                  patch_size=None, gamma=0.25):
    """Generate every class of ``schedule``; class ``i`` uses its own seed."""
    if patch_size is None:
        patch_size = INTERIOR_PATCH_SIZE[dimension]
    records = []
    for i, N in enumerate(schedule):
        class_seed = _derive_seed(seed, i)
        records.extend(generate_class(dimension, N, records_per_class, class_seed,
                                      patch_size, gamma))
    manifest = DatasetManifest(dimension, patch_size,
                               tuple((N, records_per_class) for N in schedule),
                               schedule_kind, seed, {"gamma": gamma})
    return manifest, records


def split(records, seed):
    """Stratified 64/16/20 train/validation/test split."""
    records = list(records)
    if len(records) < 5:
        raise InvalidArgumentError(f"need at least 5 records to split, got {len(records)}")
    rng = np.random.default_rng(seed)
    by_class = {}
    for r in records:
        by_class.setdefault(r.class_id, []).append(r)
    train, val, test = [], [], []
    for cid in sorted(by_class):
        group = by_class[cid]
        order = rng.permutation(len(group))
        n_test = int(round(TEST_FRACTION * len(group)))
        n_val = int(round(VALIDATION_FRACTION * (len(group) - n_test)))
        test += [group[i] for i in order[:n_test]]
        val += [group[i] for i in order[n_test:n_test + n_val]]
        train += [group[i] for i in order[n_test + n_val:]]
    return train, val, test


def as_arrays(records):
    """Stack records into ``(X, Y, aux)`` arrays."""
    if not records:
        raise InvalidArgumentError("no records")
    X = np.vstack([r.features for r in records])
    Y = np.vstack([r.target for r in records])
    aux = np.vstack([r.aux_lumped for r in records])
    return X, Y, aux


def balance_diagnostic(manifest):
    classes = tuple(sorted(manifest.class_ids))
    gaps = tuple(b - a for a, b in zip(classes[:-1], classes[1:]))
    if not gaps or min(gaps) <= 0:
        ratio = 1.0
    else:
        ratio = max(gaps) / min(gaps)
    return BalanceReport(classes, gaps, float(ratio))


def _fmt(values):
    return " ".join(format(float(v), ".17g") for v in values)


def write_dataset(path, manifest, records):
    classes = ",".join(f"{n}:{c}" for n, c in manifest.classes)
    head = {
        "dimension": manifest.dimension,
        "patch_size": manifest.patch_size,
        "schedule": manifest.schedule_kind,
        "seed": manifest.seed,
        "classes": classes or "-",
        "n_records": len(records),
    }
    head.update({k: v for k, v in manifest.extra.items() if k not in head})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(" ".join(f"{k}={v}" for k, v in head.items()) + "\n")
        for r in records:
            fh.write(f"{r.class_id} {r.patch_size} | {_fmt(r.features)} | "
                     f"{_fmt(r.target)} | {_fmt(r.aux_lumped)}\n")


def _parse_value(text):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def read_dataset(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].strip():
        raise ParseError("missing manifest line", 1)
    head = {}
    for item in lines[0].split():
        if "=" not in item:
            raise ParseError(f"manifest item {item!r} is not key=value", 1)
        k, v = item.split("=", 1)
        head[k] = v
    try:
        classes = () if head["classes"] == "-" else tuple(
            tuple(int(x) for x in c.split(":")) for c in head["classes"].split(","))
        n_records = int(head.pop("n_records"))
        manifest = DatasetManifest(int(head.pop("dimension")), int(head.pop("patch_size")),
                                   classes, head.pop("schedule"), int(head.pop("seed")))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad manifest: {exc}", 1) from None
    head.pop("classes")
    manifest = DatasetManifest(manifest.dimension, manifest.patch_size, manifest.classes,
                               manifest.schedule_kind, manifest.seed,
                               {k: _parse_value(v) for k, v in head.items()})

    body = lines[1:]
    if body and body[-1] == "":
        body = body[:-1]
    elif body:
        raise ParseError("file does not end with a newline (truncated?)", len(lines))
    if len(body) != n_records:
        raise ParseError(f"manifest announces {n_records} records, found {len(body)}",
                         len(body) + 1)
    records = []
    for lineno, line in enumerate(body, start=2):
        parts = line.split("|")
        if len(parts) != 4:
            raise ParseError("expected 4 '|'-separated fields", lineno)
        try:
            cid, psize = (int(v) for v in parts[0].split())
            f, t, a = (np.array([float(v) for v in p.split()]) for p in parts[1:])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if len(a) != psize or len(t) % psize:
            raise ParseError("field lengths disagree with the patch size", lineno)
        records.append(PatchRecord(f, t, cid, psize, a))
    return manifest, records
