"""scikit-learn style wrapper around the coupling network."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InvalidArgumentError
from .nn import LossConfig, forward, init_mlp, loss, train


class CouplingRegressor(RegressorMixin, BaseEstimator):
    """Predict the coupling block of one patch family from its mass features.

    Parameters
    ----------
    patch_size : int
        Number of fine nodes in the patch; the targets hold ``patch_size``
        rows of equal width.
    hidden : tuple of int
        Hidden layer widths.
    alpha, beta : float
        Weights of the constant-preservation and row-error penalties.
    epochs, batch_size, lr, lr_final, random_state
        Training controls, see :func:`neuralmg.nn.train`.
    scaled : bool
        Evaluate the network on inputs normalized by their sum.

    ``fit`` takes the lumped masses of the patch members as ``aux``.  When
    every member contributes the same number of features (interior
    families) they are recovered as row sums of the features.
    """

    def __init__(self, patch_size=3, dimension=1, hidden=(64, 64), alpha=0.5, beta=0.5,
                 epochs=100, batch_size=64, lr=1e-3, lr_final=1e-5, random_state=0,
                 scaled=True):
        self.patch_size = patch_size
        self.dimension = dimension
        self.hidden = hidden
        self.alpha = alpha
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_final = lr_final
        self.random_state = random_state
        self.scaled = scaled

    def _aux(self, X, aux):
        if aux is not None:
            aux = check_array(aux, ensure_2d=True)
            if aux.shape != (len(X), self.patch_size):
                raise InvalidArgumentError(
                    f"aux must have shape {(len(X), self.patch_size)}, got {aux.shape}")
            return aux
        if X.shape[1] % self.patch_size:
            raise InvalidArgumentError(
                "aux is required when members contribute unequal numbers of features")
        return X.reshape(len(X), self.patch_size, -1).sum(axis=2)

    def fit(self, X, y, aux=None, validation_data=None):
        X = check_array(X)
        y = check_array(y)
        if len(X) != len(y):
            raise InvalidArgumentError("X and y have different numbers of rows")
        if y.shape[1] % self.patch_size:
            raise InvalidArgumentError(
                f"target width {y.shape[1]} is not a multiple of patch_size {self.patch_size}")
        aux = self._aux(X, aux)
        self.loss_config_ = LossConfig(self.alpha, self.beta)
        sizes = (X.shape[1],) + tuple(self.hidden) + (y.shape[1],)
        model = init_mlp(sizes, self.random_state, self.patch_size, self.dimension,
                         scaled=self.scaled)
        val = None
        if validation_data is not None:
            Xv, yv = check_array(validation_data[0]), check_array(validation_data[1])
            av = validation_data[2] if len(validation_data) > 2 else None
            val = (Xv, yv, self._aux(Xv, av))
        self.model_, self.history_ = train(
            model, (X, y, aux), val, self.loss_config_, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.random_state, lr=self.lr,
            lr_final=self.lr_final)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise InvalidArgumentError(
                f"X has {X.shape[1]} features, estimator was fitted with {self.n_features_in_}")
        return forward(self.model_, X)

    def penalized_loss(self, X, y, aux=None):
        """Value of the training loss on ``(X, y)``."""
        check_is_fitted(self, "model_")
        X = check_array(X)
        return loss(check_array(y), self.predict(X), self._aux(X, aux), self.loss_config_)

    @classmethod
    def from_model(cls, model):
        """Wrap an already trained :class:`~neuralmg.nn.MLPModel`."""
        est = cls(patch_size=model.patch_size, dimension=model.dimension,
                  hidden=tuple(model.layer_sizes[1:-1]), scaled=model.scaled)
        est.model_ = model
        est.history_ = []
        est.loss_config_ = LossConfig(est.alpha, est.beta)
        est.n_features_in_ = model.n_inputs
        return est
