import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from neuralmg import CouplingRegressor
from neuralmg.dataset import as_arrays, build_dataset, split
from neuralmg.errors import InvalidArgumentError
from neuralmg.nn import forward, init_mlp, models_equal


@pytest.fixture(scope="module")
def data_1d():
    _, recs = build_dataset(1, [10, 20, 30], 100, seed=2)
    return [as_arrays(part) for part in split(recs, 0)]


def test_params_and_clone():
    est = CouplingRegressor(hidden=(8,), epochs=3)
    params = est.get_params()
    assert params["hidden"] == (8,) and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_fit_predict(data_1d):
    (X, y, aux), val, (Xt, yt, at) = data_1d
    est = CouplingRegressor(hidden=(16, 16), epochs=100, batch_size=16, lr_final=1e-4)
    est.fit(X, y, aux, validation_data=val)
    assert est.predict(Xt).shape == yt.shape
    assert len(est.history_) == 100 and est.n_features_in_ == 9
    assert est.score(Xt, yt) > 0.5
    assert est.penalized_loss(Xt, yt, at) < est.history_[0]["train_loss"]


def test_aux_inferred_for_interior_family(data_1d):
    (X, y, aux), _, _ = data_1d
    a = CouplingRegressor(hidden=(8,), epochs=2).fit(X, y, aux)
    b = CouplingRegressor(hidden=(8,), epochs=2).fit(X, y)
    assert models_equal(a.model_, b.model_)


def test_errors(data_1d):
    (X, y, aux), _, _ = data_1d
    with pytest.raises(NotFittedError):
        CouplingRegressor().predict(X)
    with pytest.raises(InvalidArgumentError):
        CouplingRegressor(patch_size=4).fit(X, y)
    with pytest.raises(InvalidArgumentError):
        CouplingRegressor().fit(X, y, aux[:, :2])
    est = CouplingRegressor(hidden=(4,), epochs=1).fit(X, y)
    with pytest.raises(InvalidArgumentError):
        est.predict(X[:, :5])


def test_from_model():
    m = init_mlp((9, 4, 9), 1, 3, 1, scaled=True)
    est = CouplingRegressor.from_model(m)
    assert est.hidden == (4,) and est.scaled
    x = np.random.default_rng(0).random((2, 9))
    np.testing.assert_array_equal(est.predict(x), forward(m, x))
