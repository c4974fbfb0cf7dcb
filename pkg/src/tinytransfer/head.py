"""Classification head: GAP -> dropout -> dense -> softmax/sigmoid, trained by backprop.

The backbone is frozen, so the head is trained directly on cached features.
Global average pooling has no parameters, which lets :func:`train` pool every
cached sample once up front instead of once per epoch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ClassMismatch, DegenerateDataset, ShapeMismatch
from .graph import GraphBuilder, ModelGraph

HEAD_ACTIVATIONS = ("softmax", "sigmoid")


@dataclass(eq=False)
class HeadModel:
    input_shape: tuple
    weights: np.ndarray
    bias: np.ndarray
    class_names: list
    activation: str = "softmax"
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        k = len(self.class_names)
        if k < 2:
            raise ValueError("a head needs at least two classes")
        if self.weights.shape != (self.input_shape[-1], k) or self.bias.shape != (k,):
            raise ShapeMismatch(
                f"weights {self.weights.shape} / bias {self.bias.shape} do not fit "
                f"{self.input_shape[-1]} features and {k} classes"
            )
        if self.activation not in HEAD_ACTIVATIONS:
            raise ValueError(f"activation must be one of {HEAD_ACTIVATIONS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def num_features(self):
        return self.input_shape[-1]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate must be >= 0, epochs and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def rows(self):
        for i in range(len(self)):
            yield i + 1, self.train_loss[i], self.train_acc[i], self.val_loss[i], self.val_acc[i]


# -- forward / backward -------------------------------------------------------


def _pool(features, input_shape):
    f = np.asarray(features, dtype=np.float64)
    if tuple(f.shape[1:]) != tuple(input_shape):
        raise ShapeMismatch(f"features {f.shape} do not match head input (N, {input_shape})")
    return f.mean(axis=tuple(range(1, f.ndim - 1))) if f.ndim > 2 else f


def _dropout_mask(rng, shape, rate):
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _probs(z, activation):
    return np.exp(_log_softmax(z)) if activation == "softmax" else _sigmoid(z)


def _logits(weights, bias, pooled, mask=None):
    x = pooled if mask is None else pooled * mask
    return x, x @ weights + bias


def head_forward(head: HeadModel, features, training: bool = False, rng=None):
    """Returns ``(probs, mask)``; ``mask`` is None outside training."""
    pooled = _pool(features, head.input_shape)
    mask = None
    if training and head.dropout_rate > 0:
        if rng is None:
            raise ValueError("training mode with dropout needs an rng")
        mask = _dropout_mask(rng, pooled.shape, head.dropout_rate)
    _, z = _logits(head.weights.astype(np.float64), head.bias.astype(np.float64), pooled, mask)
    return _probs(z, head.activation), mask


def _loss_and_dlogits(z, y, activation):
    n = z.shape[0]
    if activation == "softmax":
        logp = _log_softmax(z)
        loss = -(y * logp).sum() / n
        dz = (np.exp(logp) - y) / n
    else:
        # mean over batch and classes of softplus(z) - y*z
        loss = (np.logaddexp(0.0, z) - y * z).mean()
        dz = (_sigmoid(z) - y) / z.size
    return float(loss), dz


def _loss_grad_pooled(weights, bias, pooled, y, activation, mask=None):
    x, z = _logits(weights, bias, pooled, mask)
    loss, dz = _loss_and_dlogits(z, y, activation)
    return loss, x.T @ dz, dz.sum(axis=0)


def head_loss_grad(head: HeadModel, features, labels, rng=None):
    """Mean loss and its gradients ``{"weights": dW, "bias": db}``.

    Passing ``rng`` puts the head in training mode (dropout active); the same
    seed gives the same mask, which is what finite-difference checks rely on.
    """
    pooled = _pool(features, head.input_shape)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (pooled.shape[0], len(head.class_names)):
        raise ShapeMismatch(f"labels {y.shape} vs expected {(pooled.shape[0], len(head.class_names))}")
    mask = None
    if rng is not None and head.dropout_rate > 0:
        mask = _dropout_mask(rng, pooled.shape, head.dropout_rate)
    loss, dw, db = _loss_grad_pooled(
        head.weights.astype(np.float64), head.bias.astype(np.float64), pooled, y, head.activation, mask
    )
    return loss, {"weights": dw, "bias": db}


# -- training -----------------------------------------------------------------


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


class _Adam:
    def __init__(self, cfg, shapes):
        self.cfg = cfg
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            m_hat = m / (1 - c.beta1**self.t)
            v_hat = v / (1 - c.beta2**self.t)
            p -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.epsilon)


class _SGD:
    def __init__(self, cfg, shapes):
        self.cfg = cfg

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.cfg.learning_rate * g


def _evaluate_pooled(w, b, pooled, y, activation):
    if pooled.shape[0] == 0:
        return float("nan"), float("nan")
    loss, _, _ = _loss_grad_pooled(w, b, pooled, y, activation)
    _, z = _logits(w, b, pooled)
    acc = float(np.mean(np.argmax(z, axis=1) == np.argmax(y, axis=1)))
    return loss, acc


def train(cache, val_cache=None, cfg: TrainConfig | None = None, activation: str = "softmax", dropout_rate: float = 0.5):
    """Fit a fresh head on cached features; returns ``(HeadModel, TrainHistory)``.

    ``cache`` may also be a list of caches holding differently augmented
    copies of the same rows; epoch ``e`` then trains on copy ``e % len``.
    Per-epoch metrics are measured after the epoch's updates, in eval mode,
    over the whole train and validation sets.
    """
    cfg = cfg or TrainConfig()
    views = list(cache) if isinstance(cache, (list, tuple)) else [cache]
    if not views:
        raise DegenerateDataset("no training cache given")
    cache = views[0]
    for other in views[1:]:
        if other.features.shape != cache.features.shape or not np.array_equal(other.labels, cache.labels):
            raise ClassMismatch("augmented copies must share rows, labels and feature shape")
    if val_cache is not None:
        if list(val_cache.class_names) != list(cache.class_names):
            raise ClassMismatch(f"train classes {cache.class_names} != val classes {val_cache.class_names}")
        if val_cache.features.shape[1:] != cache.features.shape[1:]:
            raise ClassMismatch(f"feature shapes differ: {cache.features.shape[1:]} vs {val_cache.features.shape[1:]}")
    counts = cache.labels.sum(axis=0)
    empty = [name for name, c in zip(cache.class_names, counts) if c == 0]
    if empty:
        raise DegenerateDataset(f"classes with no training rows: {empty}")

    input_shape = tuple(cache.features.shape[1:])
    pooled_views = [_pool(v.features, input_shape) for v in views]
    y = cache.labels.astype(np.float64)
    if val_cache is not None:
        val_pooled, val_y = _pool(val_cache.features, input_shape), val_cache.labels.astype(np.float64)
    else:
        val_pooled, val_y = np.zeros((0, pooled_views[0].shape[1])), np.zeros((0, y.shape[1]))

    rng = np.random.default_rng(cfg.seed)
    n, f = pooled_views[0].shape
    k = y.shape[1]
    w = glorot_uniform(rng, f, k)
    b = np.zeros(k)
    opt = (_Adam if cfg.optimizer == "adam" else _SGD)(cfg, [w.shape, b.shape])
    history = TrainHistory()

    for epoch in range(cfg.epochs):
        pooled = pooled_views[epoch % len(pooled_views)]
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            mask = _dropout_mask(rng, (len(idx), f), dropout_rate) if dropout_rate > 0 else None
            _, dw, db = _loss_grad_pooled(w, b, pooled[idx], y[idx], activation, mask)
            opt.step([w, b], [dw, db])
        tl, ta = _evaluate_pooled(w, b, pooled, y, activation)
        vl, va = _evaluate_pooled(w, b, val_pooled, val_y, activation)
        history.train_loss.append(tl)
        history.train_acc.append(ta)
        history.val_loss.append(vl)
        history.val_acc.append(va)

    head = HeadModel(input_shape, w, b, list(cache.class_names), activation, dropout_rate)
    return head, history


def export_head(head: HeadModel, train_config: TrainConfig | None = None) -> ModelGraph:
    """GAP -> dropout_marker -> dense -> activation as a graph fed by backbone features."""
    meta = {
        "class_names": json.dumps(list(head.class_names)),
        "head_activation": head.activation,
        "head_dropout": repr(float(head.dropout_rate)),
    }
    if train_config is not None:
        meta["train_config"] = json.dumps(asdict(train_config), sort_keys=True)
    b = GraphBuilder("head", (None,) + head.input_shape, meta)
    if len(head.input_shape) == 3:
        b.add("global_average_pool", node_id="head_gap")
    b.add("dropout_marker", {"rate": float(head.dropout_rate)}, node_id="head_dropout")
    b.add("dense", weights=[head.weights.copy(), head.bias.copy()], node_id="head_dense")
    b.add("activation", {"kind": head.activation}, node_id="head_activation")
    return b.build()
