"""Stand-in predictors that replay exact coupling entries.

Used to check that the neural assembly path reproduces the geometric
transfers when its predictions are perfect.
"""

import numpy as np
import scipy.sparse as sp

from neuralmg.dataset import stencils
from neuralmg.mesh import coarsen

import oracles


class SequencePredictor:
    """Returns queued batches in order, checking each call's batch size."""

    def __init__(self, n_inputs):
        self.n_inputs = n_inputs
        self.batches = []
        self.calls = 0

    def predict(self, X):
        X = np.asarray(X)
        Y = self.batches[self.calls]
        self.calls += 1
        assert X.shape == (len(Y), self.n_inputs)
        return Y


def exact_coupling(fine, coarse):
    B = oracles.coupling_1d(fine.nodes, coarse.nodes) if fine.dim == 1 else \
        oracles.coupling_2d(fine, coarse)
    return sp.csr_matrix(B)


def exact_predictors(fine_mesh, n_levels, coupling=exact_coupling):
    """Predictors keyed by patch size plus the couplings they replay, per level.

    ``coupling(fine, coarse)`` supplies the entries; by default the
    independent quadrature oracle.
    """
    models, couplings = {}, []
    mesh = fine_mesh
    for _ in range(n_levels - 1):
        coarse, ids = coarsen(mesh)
        B = coupling(mesh, coarse).toarray()
        couplings.append(B)
        groups = {}
        for st in stencils(mesh, coarse, ids):
            target = B[np.ix_(st.members, st.coarse_columns)].ravel()
            groups.setdefault(st.size, []).append((st.n_features, target))
        for size in sorted(groups):
            n_feat = groups[size][0][0]
            pred = models.setdefault(size, SequencePredictor(n_feat))
            pred.batches.append(np.array([t for _, t in groups[size]]))
        mesh = coarse
    return models, couplings

