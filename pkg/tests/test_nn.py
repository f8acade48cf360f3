import math

import numpy as np
import pytest

from neuralmg.errors import (
    CorruptModelError,
    InvalidArgumentError,
    TrainingFailure,
    WrongFamilyError,
)
from neuralmg.nn import (
    AdamState,
    LossConfig,
    MLPModel,
    adam_step,
    backward,
    decode_model,
    forward,
    init_mlp,
    load_model,
    loss,
    loss_components,
    models_equal,
    penalty,
    predict_b_rows,
    save_model,
    train,
    write_history,
    _encode,
)

import oracles

CFG = LossConfig()


def random_problem(rng, sizes=(9, 12, 12, 9), n=5, patch=3, scaled=False):
    model = init_mlp(sizes, int(rng.integers(1 << 30)), patch, 1, scaled=scaled)
    for b in model.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    X = rng.uniform(0.01, 1.0, (n, sizes[0]))
    Y = rng.uniform(0.0, 1.0, (n, sizes[-1]))
    aux = rng.uniform(0.5, 2.0, (n, patch))
    return model, X, Y, aux


def relative_gradient_error(model, X, Y, aux, cfg=CFG, h=1e-6):
    _, grads = backward(model, X, Y, aux, cfg)
    fd = oracles.central_difference(lambda: loss(Y, forward(model, X), aux, cfg),
                                    model.parameters(), h)
    a = np.concatenate([g.ravel() for g in grads])
    b = np.concatenate([g.ravel() for g in fd])
    return np.max(np.abs(a - b) / (np.abs(a) + 1e-8)), np.linalg.norm(a - b) / np.linalg.norm(b)


class TestInit:
    def test_determinism_and_biases(self):
        a, b = init_mlp((9, 32, 32, 6), 4), init_mlp((9, 32, 32, 6), 4)
        assert models_equal(a, b)
        assert all(not bias.any() for bias in a.biases)
        assert not models_equal(a, init_mlp((9, 32, 32, 6), 5))

    def test_parameter_count(self):
        sizes = (9, 32, 32, 6)
        expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        assert expected == 1574
        assert init_mlp(sizes, 0).n_parameters == expected

    def test_he_scale(self):
        m = init_mlp((400, 300), 0)
        assert abs(m.weights[0].std() - math.sqrt(2 / 400)) < 0.005

    @pytest.mark.parametrize("sizes", [(5,), (3, 0, 2), (3, -1), (2.5, 3)])
    def test_invalid(self, sizes):
        with pytest.raises(InvalidArgumentError):
            init_mlp(sizes, 0)


class TestForward:
    def test_zero_weights_give_bias(self):
        m = init_mlp((3, 4, 2), 0)
        for w in m.weights:
            w[:] = 0
        m.biases[-1][:] = [0.3, -0.7]
        np.testing.assert_array_equal(forward(m, np.ones(3)), [0.3, -0.7])

    def test_identity_layer(self):
        m = init_mlp((4, 4), 0)
        m.weights[0][:] = np.eye(4)
        x = np.array([0.1, -2.0, 3.0, 4.5])
        np.testing.assert_array_equal(forward(m, x), x)

    def test_hand_computed(self):
        m = MLPModel((2, 2, 1), [np.array([[1.0, -1.0], [2.0, 0.5]]), np.array([[3.0], [-2.0]])],
                     [np.array([0.5, 0.0]), np.array([0.25])])
        # hidden = relu([1 + 4 + 0.5, -1 + 1 + 0]) = [5.5, 0]; out = 16.5 + 0.25
        assert forward(m, np.array([1.0, 2.0]))[0] == 16.75
        # second input drives the second unit positive
        # hidden = relu([-1 + 0 + 0.5, 1 + 0]) = [0, 1]; out = -2 + 0.25
        assert forward(m, np.array([-1.0, 0.0]))[0] == -1.75

    def test_batch_matches_single(self, rng):
        m, X, _, _ = random_problem(rng)
        np.testing.assert_allclose(forward(m, X)[2], forward(m, X[2]), rtol=0, atol=1e-15)

    def test_scaled_is_homogeneous(self, rng):
        m, X, _, _ = random_problem(rng, scaled=True)
        np.testing.assert_allclose(forward(m, 7.5 * X), 7.5 * forward(m, X), rtol=1e-13)

    def test_wrong_width(self):
        with pytest.raises(InvalidArgumentError):
            forward(init_mlp((3, 2), 0), np.ones(4))


class TestLoss:
    def test_penalty_examples(self):
        assert penalty([0.2, 0.8], [0.2, 0.8], CFG) == 0.0
        assert penalty([0.5, 0.5], [0.5, 0.5], LossConfig(0.1, 0.9)) == 0.0
        assert abs(penalty([1.0, 0.0], [0.5, 0.5], CFG) - 2 * math.sqrt(0.5)) < 1e-15

    def test_penalty_permutation_invariant(self, rng):
        p, q = rng.random(6), rng.random(6)
        perm = rng.permutation(6)
        assert abs(penalty(p, q, CFG) - penalty(p[perm], q[perm], CFG)) < 1e-15

    def test_zero_when_exact(self):
        aux = np.array([[1.0, 2.0]])
        y = np.array([[0.25, 0.75, 1.0, 1.0]])
        assert loss(y, y, aux, CFG) == 0.0

    def test_row_sum_defect(self):
        aux = np.array([[1.0, 1.0]])
        y = np.array([[0.5, 0.4, 0.5, 0.5]])  # first true row sums to 0.9
        assert abs(loss(y, y, aux, LossConfig(0.5, 0.5)) - 0.2) < 1e-15

    def test_mse_only(self, rng):
        y_true = rng.random((4, 6))
        y_pred = rng.random((4, 6))
        aux = np.ones((4, 2))
        mse, pen = loss_components(y_true, y_pred, aux, CFG)
        assert mse == pytest.approx(np.mean((y_pred - y_true) ** 2), abs=1e-15)
        assert loss(y_true, y_pred, aux, CFG) == pytest.approx(mse + pen, abs=1e-15)

    def test_nonnegative(self, rng):
        for _ in range(20):
            y = rng.normal(size=(3, 6))
            assert loss(y, rng.normal(size=(3, 6)), rng.uniform(0.1, 1, (3, 2)), CFG) >= 0

    def test_config_range(self):
        for a, b in ((0, 0.5), (0.5, 1), (1.5, 0.5), (0.5, -0.1)):
            with pytest.raises(InvalidArgumentError):
                LossConfig(a, b)


class TestBackward:
    @pytest.mark.parametrize("scaled", [False, True])
    def test_gradient_check(self, rng, scaled):
        m, X, Y, aux = random_problem(rng, scaled=scaled)
        worst, _ = relative_gradient_error(m, X, Y, aux)
        assert worst < 1e-5

    def test_zero_loss_zero_grad(self):
        m = init_mlp((2, 3, 4), 0)
        m.biases[-1][:] = 0.5
        X = np.array([[0.3, 0.7]])
        Y = forward(m, X)
        assert np.all(Y > 0)
        aux = np.array([[Y[0, :2].sum(), Y[0, 2:].sum()]])
        value, grads = backward(m, X, Y, aux, CFG)
        assert value == 0.0
        assert all(not g.any() for g in grads)

    def test_mse_gradient_at_output(self, rng):
        # one linear layer: d(mse)/dW = x^T 2(y_pred - y)/m
        m = init_mlp((3, 4), 0)
        X = rng.random((1, 3))
        Y = rng.random((1, 4))
        tiny = LossConfig(0.999999, 0.999999)
        from neuralmg.nn import loss_gradient
        _, g = loss_gradient(Y, forward(m, X), np.ones((1, 2)) * 1e12, tiny)
        np.testing.assert_allclose(g, 2 * (forward(m, X) - Y) / 4, rtol=1e-9)


class TestAdam:
    def test_zero_gradient(self):
        p = [np.array([1.0, -2.0])]
        adam_step(AdamState(), p, [np.zeros(2)])
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = [np.array([0.0, 0.0, 0.0])]
        adam_step(AdamState(lr=1e-3), p, [np.array([5.0, -0.01, 1e3])])
        np.testing.assert_allclose(p[0], [-1e-3, 1e-3, -1e-3], rtol=1e-5)

    def test_determinism(self):
        runs = []
        for _ in range(2):
            p = [np.array([0.5, 0.1])]
            s = AdamState()
            for g in ([1.0, 2.0], [0.5, -1.0]):
                adam_step(s, p, [np.array(g)])
            runs.append(p[0].copy())
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            adam_step(AdamState(), [np.zeros(2)], [np.zeros(3)])


def _small_data(rng, n=200):
    X = rng.uniform(0.1, 1.0, (n, 4))
    W = rng.normal(size=(4, 4))
    Y = np.abs(X @ W) * 0.1
    aux = np.column_stack([Y[:, :2].sum(1), Y[:, 2:].sum(1)])
    return X, Y, aux


class TestTrain:
    def test_zero_epochs(self, rng):
        m = init_mlp((4, 8, 4), 1, patch_size=2)
        best, hist = train(m, _small_data(rng), epochs=0)
        assert hist == [] and models_equal(best, m)

    def test_determinism(self, rng):
        data = _small_data(rng)
        m = init_mlp((4, 8, 4), 1, patch_size=2)
        a = train(m, data, data, epochs=5, batch_size=16, seed=3)
        b = train(m, data, data, epochs=5, batch_size=16, seed=3)
        assert a[1] == b[1] and models_equal(a[0], b[0])

    def test_best_epoch_returned(self, rng):
        data = _small_data(rng)
        m = init_mlp((4, 8, 4), 1, patch_size=2)
        best, hist = train(m, data, data, epochs=8, batch_size=16)
        k = best.metadata["best_epoch"]
        assert hist[k]["val_loss"] == min(h["val_loss"] for h in hist)
        assert loss(data[1], forward(best, data[0]), data[2], CFG) == pytest.approx(
            hist[k]["val_loss"], rel=1e-12)

    def test_divergence(self, rng):
        X, Y, aux = _small_data(rng)
        m = init_mlp((4, 8, 4), 1, patch_size=2)
        m.weights[0][0, 0] = np.inf
        with pytest.raises(TrainingFailure) as err, np.errstate(all="ignore"):
            train(m, (X, Y, aux), epochs=3)
        assert err.value.epoch == 0

    def test_smoothed_loss_decreases_on_1d_data(self):
        from neuralmg.dataset import as_arrays, build_dataset, split
        _, recs = build_dataset(1, [10, 20, 30, 40], 200, seed=0)
        tr, va, _ = split(recs, 0)
        m = init_mlp((9, 32, 32, 9), 0, 3, 1, scaled=True)
        _, hist = train(m, as_arrays(tr), as_arrays(va), epochs=30, lr_final=1e-5)
        smooth = np.convolve([h["train_loss"] for h in hist], np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(smooth) <= 1e-12)

    def test_history_csv(self, rng, tmp_path):
        data = _small_data(rng)
        _, hist = train(init_mlp((4, 4), 0, 2), data, data, epochs=3)
        write_history(tmp_path / "h.csv", hist)
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 4


class TestPredictRows:
    def test_shape_and_family(self, rng):
        m = init_mlp((9, 9), 0, patch_size=3)
        assert predict_b_rows(m, rng.random(9)).shape == (3, 3)
        assert predict_b_rows(m, rng.random((4, 9))).shape == (4, 3, 3)
        with pytest.raises(WrongFamilyError):
            predict_b_rows(m, rng.random(5))

    def test_untrained_output_is_bias(self):
        m = init_mlp((9, 9), 0, patch_size=3)
        m.weights[-1][:] = 0
        m.biases[-1][:] = np.arange(9.0)
        np.testing.assert_array_equal(predict_b_rows(m, np.ones(9)), np.arange(9.0).reshape(3, 3))


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        m, *_ = random_problem(rng, scaled=True)
        m.metadata["note"] = "x"
        save_model(tmp_path / "m.bin", m)
        back = load_model(tmp_path / "m.bin")
        assert models_equal(m, back)
        assert (back.patch_size, back.dimension, back.metadata["note"]) == (3, 1, "x")

    def test_altered_header(self, rng):
        m, *_ = random_problem(rng)
        blob = bytearray(_encode(m))
        blob[12] += 1  # dimension field
        with pytest.raises(CorruptModelError):
            decode_model(bytes(blob))

    def test_bad_shapes_even_with_valid_checksum(self, rng):
        import hashlib
        m, *_ = random_problem(rng)
        body = bytearray(_encode(m)[:-32])
        n_layers_at = 8 + 16
        body[n_layers_at + 8] += 1  # first layer size
        body = bytes(body)
        with pytest.raises(CorruptModelError):
            decode_model(body + hashlib.sha256(body).digest())

    def test_not_a_checkpoint(self):
        with pytest.raises(CorruptModelError):
            decode_model(b"hello world" * 10)
