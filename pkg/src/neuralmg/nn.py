"""A small fully connected network trained with Adam on a regularized loss.

The loss of one example is the mean squared error on the raw coupling
entries plus, for every patch member ``k``, the penalty

    p_k = |sum(q_k) - 1| / alpha + ||q_k - q_k_true|| / beta

where ``q_k`` is the member's coupling row divided by its lumped mass, i.e.
its row of the transfer operator.  The first term asks the predicted
operator to preserve constants.
"""

from dataclasses import dataclass, field
import copy
import csv
import hashlib
import io
import json
import math
import struct

import numpy as np

from .errors import (
    CorruptModelError,
    InvalidArgumentError,
    InvalidMassError,
    TrainingFailure,
    WrongFamilyError,
)
from .validation import check_open_unit, check_positive_int

MAGIC = b"NMGMODEL"
VERSION = 1


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "alpha", check_open_unit(self.alpha, "alpha"))
        object.__setattr__(self, "beta", check_open_unit(self.beta, "beta"))


@dataclass(eq=False)
class MLPModel:
    """Weights map a row vector ``x`` to ``x @ W + b``; ReLU between layers.

    With ``scaled`` set the network is evaluated as ``s * net(x / s)`` with
    ``s = sum(|x|)``, which makes the prediction scale with the mesh size
    exactly as the coupling entries do.
    """

    layer_sizes: tuple
    weights: list
    biases: list
    patch_size: int = None
    dimension: int = None
    metadata: dict = field(default_factory=dict)
    scaled: bool = False

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_outputs(self):
        return self.layer_sizes[-1]

    @property
    def n_parameters(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self):
        """Flat list ``[W1, b1, W2, b2, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return copy.deepcopy(self)

    def predict(self, X):
        return forward(self, X)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None


def init_mlp(layer_sizes, seed, patch_size=None, dimension=None, scaled=False):
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    sizes = tuple(layer_sizes)
    if len(sizes) < 2:
        raise InvalidArgumentError("an MLP needs at least an input and an output layer")
    sizes = tuple(check_positive_int(s, "layer size") for s in sizes)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLPModel(sizes, weights, biases, patch_size, dimension, {"seed": int(seed)},
                    bool(scaled))


def _as_batch(model, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.n_inputs:
        raise InvalidArgumentError(
            f"input has {X.shape[-1]} features, model expects {model.n_inputs}")
    return X, single


def _input_scale(model, X):
    if not model.scaled:
        return np.ones((len(X), 1))
    s = np.abs(X).sum(axis=1, keepdims=True)
    return np.where(s > 0.0, s, 1.0)


def _forward_trace(model, X):
    """Pre-activations ``zs``, activations ``acts`` and the input scale.

    ``acts[0]`` is the scaled input and ``acts[-1]`` the raw network output,
    before multiplying back by the scale.
    """
    scale = _input_scale(model, X)
    acts, zs = [X / scale], []
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ W + b
        zs.append(z)
        acts.append(z if i == last else np.maximum(z, 0.0))
    return zs, acts, scale


def forward(model, x):
    X, single = _as_batch(model, x)
    _, acts, scale = _forward_trace(model, X)
    out = scale * acts[-1]
    return out[0] if single else out


def penalty(q_pred_row, q_true_row, cfg):
    q_pred_row = np.asarray(q_pred_row, float)
    q_true_row = np.asarray(q_true_row, float)
    return (abs(q_pred_row.sum() - 1.0) / cfg.alpha
            + float(np.linalg.norm(q_pred_row - q_true_row)) / cfg.beta)


def _prepare(y_true, y_pred, aux):
    y_true = np.atleast_2d(np.asarray(y_true, float))
    y_pred = np.atleast_2d(np.asarray(y_pred, float))
    aux = np.atleast_2d(np.asarray(aux, float))
    if y_true.shape != y_pred.shape:
        raise InvalidArgumentError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    if aux.shape[0] != y_true.shape[0] or y_true.shape[1] % aux.shape[1]:
        raise InvalidArgumentError("aux_lumped does not match the target layout")
    if np.any(aux <= 0):
        raise InvalidMassError("lumped mass must be positive")
    n, s = aux.shape
    w = y_true.shape[1] // s
    return y_true, y_pred, aux, n, s, w


def loss_components(y_true, y_pred, aux_lumped, cfg):
    """Batch means of the squared-error term and of the summed penalties."""
    y_true, y_pred, aux, n, s, w = _prepare(y_true, y_pred, aux_lumped)
    mse = np.mean((y_pred - y_true) ** 2, axis=1)
    qp = y_pred.reshape(n, s, w) / aux[:, :, None]
    qt = y_true.reshape(n, s, w) / aux[:, :, None]
    pen = (np.abs(qp.sum(axis=2) - 1.0) / cfg.alpha
           + np.linalg.norm(qp - qt, axis=2) / cfg.beta).sum(axis=1)
    return float(mse.mean()), float(pen.mean())


def loss(y_true, y_pred, aux_lumped, cfg):
    mse, pen = loss_components(y_true, y_pred, aux_lumped, cfg)
    return mse + pen


def loss_gradient(y_true, y_pred, aux_lumped, cfg):
    """Loss value and its gradient with respect to ``y_pred``.

    Non-differentiable points of the norms get the zero subgradient.
    """
    y_true, y_pred, aux, n, s, w = _prepare(y_true, y_pred, aux_lumped)
    m = y_true.shape[1]
    diff = y_pred - y_true
    qp = y_pred.reshape(n, s, w) / aux[:, :, None]
    qt = y_true.reshape(n, s, w) / aux[:, :, None]
    defect = qp.sum(axis=2) - 1.0
    dq = qp - qt
    norm = np.linalg.norm(dq, axis=2)
    value = np.mean(np.mean(diff ** 2, axis=1)
                    + (np.abs(defect) / cfg.alpha + norm / cfg.beta).sum(axis=1))
    safe = np.where(norm > 0.0, norm, 1.0)
    g_q = (np.sign(defect)[:, :, None] / cfg.alpha
           + np.where(norm[:, :, None] > 0.0, dq / safe[:, :, None], 0.0) / cfg.beta)
    grad = 2.0 * diff / m + (g_q / aux[:, :, None]).reshape(n, m)
    return float(value), grad / n


def backward(model, X, Y, aux, cfg):
    """Loss on the batch and gradients ``[dW1, db1, dW2, db2, ...]``."""
    X, _ = _as_batch(model, X)
    zs, acts, scale = _forward_trace(model, X)
    value, delta = loss_gradient(Y, scale * acts[-1], aux, cfg)
    delta = delta * scale
    grads = [None] * (2 * len(model.weights))
    for i in range(len(model.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i].T) * (zs[i - 1] > 0.0)
    return value, grads


def adam_step(state, params, grads):
    """One bias-corrected Adam update, applied in place."""
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise InvalidArgumentError("gradient list does not match the parameters")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def evaluate(model, X, Y, aux, cfg):
    return loss(Y, forward(model, X), aux, cfg)


def train(model, train_data, val_data=None, cfg=None, epochs=100, batch_size=64, seed=0,
          lr=1e-3, lr_final=None, callback=None):
    """Mini-batch Adam training.

    ``train_data`` and ``val_data`` are ``(X, Y, aux)`` triples.  When
    ``lr_final`` is given the step size decays geometrically from ``lr`` to
    ``lr_final`` over the epochs.  Returns a
    copy of the model holding the parameters of the epoch with the lowest
    validation loss (training loss when no validation data is given), and
    the per-epoch history.
    """
    cfg = cfg or LossConfig()
    epochs = check_positive_int(epochs, "epochs", minimum=0)
    batch_size = check_positive_int(batch_size, "batch_size")
    X, Y, A = (np.asarray(a, float) for a in train_data)
    if len(X) == 0:
        raise InvalidArgumentError("empty training split")
    model = model.copy()
    history = []
    if epochs == 0:
        return model, history
    state = AdamState(lr=lr)
    params = model.parameters()
    best, best_loss = model.copy(), math.inf
    if lr_final is not None and not 0.0 < lr_final <= lr:
        raise InvalidArgumentError(f"lr_final must lie in (0, lr], got {lr_final}")
    for epoch in range(epochs):
        if lr_final is not None and epochs > 1:
            state.lr = lr * (lr_final / lr) ** (epoch / (epochs - 1))
        order = np.random.default_rng([int(seed), epoch]).permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            value, grads = backward(model, X[idx], Y[idx], A[idx], cfg)
            if not math.isfinite(value):
                raise TrainingFailure(epoch)
            adam_step(state, params, grads)
        train_loss = evaluate(model, X, Y, A, cfg)
        val_loss = evaluate(model, *val_data, cfg) if val_data is not None else math.nan
        if not math.isfinite(train_loss):
            raise TrainingFailure(epoch)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        score = val_loss if val_data is not None else train_loss
        if score < best_loss:
            best, best_loss = model.copy(), score
        if callback is not None:
            callback(history[-1])
    best.metadata = dict(model.metadata, best_epoch=int(np.argmin(
        [h["val_loss" if val_data is not None else "train_loss"] for h in history])))
    return best, history


def predict_b_rows(model, record_features):
    """Predicted coupling block, one row per patch member."""
    x = np.asarray(record_features, float)
    if x.shape[-1] != model.n_inputs:
        raise WrongFamilyError(
            f"record has {x.shape[-1]} features, model expects {model.n_inputs}")
    if model.patch_size is None or model.n_outputs % model.patch_size:
        raise WrongFamilyError("model does not describe a patch family")
    y = forward(model, x)
    return y.reshape(y.shape[:-1] + (model.patch_size, -1))


def write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "train_loss", "val_loss"])
        for h in history:
            out.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"])])


def _encode(model):
    meta = json.dumps(model.metadata, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    sizes = model.layer_sizes
    buf.write(struct.pack("<6I", VERSION, model.dimension or 0, model.patch_size or 0,
                          int(model.scaled), len(sizes), len(meta)))
    buf.write(struct.pack(f"<{len(sizes)}I", *sizes))
    buf.write(meta)
    for p in model.parameters():
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_model(path, model):
    with open(path, "wb") as fh:
        fh.write(_encode(model))


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_model(blob)


def decode_model(blob):
    head = len(MAGIC) + 24
    if len(blob) < head + 32 or blob[:len(MAGIC)] != MAGIC:
        raise CorruptModelError("not a model checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptModelError("checksum mismatch")
    version, dim, psize, scaled, n_layers, meta_len = struct.unpack("<6I", body[len(MAGIC):head])
    if version != VERSION:
        raise CorruptModelError(f"unsupported checkpoint version {version}")
    pos = head
    sizes = struct.unpack(f"<{n_layers}I", body[pos:pos + 4 * n_layers])
    pos += 4 * n_layers
    try:
        metadata = json.loads(body[pos:pos + meta_len].decode())
    except ValueError:
        raise CorruptModelError("unreadable metadata") from None
    pos += meta_len
    expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if n_layers < 2 or len(body) - pos != 8 * expected:
        raise CorruptModelError("parameter block does not match the layer sizes")
    flat = np.frombuffer(body, dtype="<f8", offset=pos).astype(float)
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[:a * b].reshape(a, b).copy())
        flat = flat[a * b:]
        biases.append(flat[:b].copy())
        flat = flat[b:]
    return MLPModel(tuple(sizes), weights, biases, psize or None, dim or None, metadata,
                    bool(scaled))


def models_equal(a, b):
    return (a.layer_sizes == b.layer_sizes and a.patch_size == b.patch_size
            and a.dimension == b.dimension and a.scaled == b.scaled
            and all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters())))
