"""MLP backbone, softmax head, cross-entropy, optimizers, LR schedule, EMA."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import NumericError, Tensor


class MlpBackbone:
    """Fully-connected feature extractor with tanh between layers.

    The last layer is affine (no activation) so features can occupy all of
    feature space rather than [-1, 1]^d.
    """

    def __init__(self, input_dim, hidden=(64, 64), feature_dim=8, rng=None):
        rng = np.random.default_rng(rng)
        dims = [input_dim, *hidden, feature_dim]
        self.input_dim = input_dim
        self.feature_dim = feature_dim
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros((1, d_out)), requires_grad=True))

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.input_dim:
            raise dc.ShapeError(
                f"backbone expects [batch, {self.input_dim}], got {x.data.shape}"
            )
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dc.broadcast_add_row(dc.matmul(h, w), b)
            if i != last:
                h = dc.tanh(h)
        return h

    def parameters(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"backbone.w{i}"] = w
            out[f"backbone.b{i}"] = b
        return out


class SoftmaxHead:
    """Linear classifier head; one weight column per class, no bias."""

    def __init__(self, feature_dim, n_classes, rng=None):
        if n_classes < 2:
            raise ValueError("softmax head needs at least 2 classes")
        rng = np.random.default_rng(rng)
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        w = rng.normal(0.0, 1.0 / math.sqrt(feature_dim), size=(feature_dim, n_classes))
        self.weight = Tensor(w, requires_grad=True)

    def logprob(self, z: Tensor) -> Tensor:
        """Log class probabilities per row; rows logsumexp to zero."""
        return dc.log_softmax(dc.matmul(z, self.weight))

    def parameters(self) -> dict:
        return {"head.W": self.weight}


def head_logprob(z: Tensor, head: SoftmaxHead) -> Tensor:
    return head.logprob(z)


def cross_entropy(target, logprob: Tensor) -> Tensor:
    """Mean over the batch of -sum(target * logprob) per row.

    Targets are treated as constants (soft distributions or one-hot rows);
    gradients flow only through `logprob`.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != logprob.data.shape:
        raise dc.ShapeError(f"cross_entropy: target {t.shape} vs logprob {logprob.data.shape}")
    if np.any(t < 0.0):
        raise ValueError("cross_entropy: negative target entry")
    if np.any(np.abs(t.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("cross_entropy: target rows must sum to 1")
    n = t.shape[0]
    return dc.scale(dc.reduce_sum(dc.mul(Tensor(t), logprob)), -1.0 / n)


def one_hot(labels, n_classes) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label outside [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _grad_array(name, grad):
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient for parameter '{name}'")
    return g


@dataclass
class SgdNesterovState:
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)


def sgd_nesterov_step(params: dict, grads: dict, state: SgdNesterovState, lr: float):
    """v <- m*v + g; p <- p - lr*(g + m*v)."""
    m = state.momentum
    for name, p in params.items():
        g = _grad_array(name, grads[name])
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = m * state.velocity.get(name, 0.0) + g
        state.velocity[name] = v
        p.data = p.data - lr * (g + m * v)


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float):
    """Adaptive moments with bias correction; decay applied to the weights."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = _grad_array(name, grads[name])
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps) - lr * state.weight_decay * p.data


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay over 7/16 of a half period, FixMatch style."""
    if total_steps <= 0:
        raise ValueError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return base_lr * math.cos(7.0 * math.pi * step / (16.0 * total_steps))


@dataclass
class EmaState:
    decay: float
    shadow: dict = field(default_factory=dict)


def ema_init(params: dict, decay: float = 0.999) -> EmaState:
    return EmaState(decay=decay, shadow={k: np.array(p.data, copy=True) for k, p in params.items()})


def ema_update(ema: EmaState, params: dict) -> EmaState:
    """shadow <- d*shadow + (1-d)*param, elementwise."""
    d = ema.decay
    for name, p in params.items():
        s = ema.shadow[name]
        if s.shape != p.data.shape:
            raise dc.ShapeError(f"ema shadow for '{name}': {s.shape} vs {p.data.shape}")
        ema.shadow[name] = d * s + (1.0 - d) * p.data
    return ema
