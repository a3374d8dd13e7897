"""Normalizing-flow classifier: affine coupling stack with a GMM prior.

The flow maps features to latent space where a per-class diagonal Gaussian
gives exact class-conditional densities via the change of variables; class
posteriors, the marginal likelihood of unlabeled data, and the flow losses
all come out of the same log-domain computation.
"""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from . import nn
from .diffcore import Tensor

LOG_2PI = math.log(2.0 * math.pi)

# GMM means are drawn once from a fixed generator so every run of a given
# dimensionality starts from the same latent layout.
GMM_MEAN_SEED = 7


def _ones_col(n):
    return Tensor(np.ones((n, 1)))


def _ones_row(m):
    return Tensor(np.ones((1, m)))


def _row_sum(x: Tensor) -> Tensor:
    """[n, d] -> [n, 1] sum over columns."""
    return dc.matmul(x, _ones_col(x.data.shape[1]))


def _tile_col(col: Tensor, width: int) -> Tensor:
    """[n, 1] -> [n, width] by repetition."""
    return dc.matmul(col, _ones_row(width))


def _squeeze_col(col: Tensor) -> Tensor:
    """[n, 1] -> [n]."""
    return dc.gather_class(col, np.zeros(col.data.shape[0], dtype=np.int64))


class _CouplingNet:
    """Two-layer tanh MLP; final layer zero-initialized."""

    def __init__(self, in_dim, out_dim, hidden, rng):
        self.w1 = Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros((1, hidden)), requires_grad=True)
        self.w2 = Tensor(np.zeros((hidden, out_dim)), requires_grad=True)
        self.b2 = Tensor(np.zeros((1, out_dim)), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        h = dc.tanh(dc.broadcast_add_row(dc.matmul(x, self.w1), self.b1))
        return dc.broadcast_add_row(dc.matmul(h, self.w2), self.b2)

    def parameters(self, prefix):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


class CouplingLayer:
    """Affine coupling over a front/back split of the coordinates.

    The masked half passes through unchanged and drives two small nets that
    rescale and shift the other half. Scales go through tanh times a learned
    per-layer bound (init 1.0) so exp(s) can never overflow; zero-initialized
    net outputs make every layer start as the identity.
    """

    def __init__(self, dim, masked_first=True, hidden=32, rng=None):
        if dim < 2:
            raise ValueError("coupling layer needs dim >= 2")
        rng = np.random.default_rng(rng)
        self.dim = dim
        self.masked_first = masked_first
        self.split = (dim + 1) // 2
        masked = self.split if masked_first else dim - self.split
        unmasked = dim - masked
        self.s_net = _CouplingNet(masked, unmasked, hidden, rng)
        self.t_net = _CouplingNet(masked, unmasked, hidden, rng)
        self.s_bound = Tensor(np.ones((1, 1)), requires_grad=True)

    def _split(self, x: Tensor):
        left, right = dc.split_last(x, self.split)
        return (left, right) if self.masked_first else (right, left)

    def _join(self, x_masked: Tensor, x_free: Tensor) -> Tensor:
        parts = [x_masked, x_free] if self.masked_first else [x_free, x_masked]
        return dc.concat_last(parts)

    def _scale_shift(self, x_masked: Tensor):
        n = x_masked.data.shape[0]
        free_dim = self.dim - x_masked.data.shape[1]
        bound = _tile_col(dc.matmul(_ones_col(n), self.s_bound), free_dim)
        s = dc.mul(bound, dc.tanh(self.s_net.forward(x_masked)))
        t = self.t_net.forward(x_masked)
        return s, t

    def forward(self, x: Tensor):
        """Returns (y, logdet) with logdet a [n, 1] column."""
        x_masked, x_free = self._split(x)
        s, t = self._scale_shift(x_masked)
        y_free = dc.add(dc.mul(x_free, dc.exp(s)), t)
        return self._join(x_masked, y_free), _row_sum(s)

    def inverse(self, y: Tensor) -> Tensor:
        y_masked, y_free = self._split(y)
        s, t = self._scale_shift(y_masked)
        x_free = dc.mul(dc.sub(y_free, t), dc.exp(dc.negate(s)))
        return self._join(y_masked, x_free)

    def parameters(self, prefix):
        out = self.s_net.parameters(f"{prefix}.s")
        out.update(self.t_net.parameters(f"{prefix}.t"))
        out[f"{prefix}.bound"] = self.s_bound
        return out


def coupling_forward(x: Tensor, layer: CouplingLayer):
    return layer.forward(x)


def coupling_inverse(y: Tensor, layer: CouplingLayer) -> Tensor:
    return layer.inverse(y)


class FlowStack:
    """Composition of coupling layers with alternating masked halves."""

    def __init__(self, dim, n_layers=6, hidden=32, rng=None):
        rng = np.random.default_rng(rng)
        self.dim = dim
        self.layers = [
            CouplingLayer(dim, masked_first=(i % 2 == 0), hidden=hidden, rng=rng)
            for i in range(n_layers)
        ]

    def forward(self, z: Tensor):
        """Returns (latent, total_logdet [n, 1])."""
        u = z
        total = Tensor(np.zeros((z.data.shape[0], 1)))
        for layer in self.layers:
            u, logdet = layer.forward(u)
            total = dc.add(total, logdet)
        return u, total

    def inverse(self, u: Tensor) -> Tensor:
        z = u
        for layer in reversed(self.layers):
            z = layer.inverse(z)
        return z

    def parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"flow.{i}"))
        return out


def flow_transform(z: Tensor, stack: FlowStack):
    return stack.forward(z)


class GmmPrior:
    """Per-class diagonal Gaussians in latent space, uniform class weights.

    Means start on a sphere of radius 2*sqrt(dim) (one draw per class from a
    fixed generator); log-variances start at zero. Means and log-variances
    are trainable, class weights stay uniform.
    """

    def __init__(self, dim, n_classes, mean_seed=GMM_MEAN_SEED):
        if n_classes < 1:
            raise ValueError("prior needs at least one class")
        rng = np.random.default_rng(mean_seed)
        radius = 2.0 * math.sqrt(dim)
        self.dim = dim
        self.n_classes = n_classes
        self.means = []
        self.log_vars = []
        for _ in range(n_classes):
            v = rng.normal(size=dim)
            v = radius * v / np.linalg.norm(v)
            self.means.append(Tensor(v.reshape(1, dim), requires_grad=True))
            self.log_vars.append(Tensor(np.zeros((dim, 1)), requires_grad=True))
        self.class_weights = np.full(n_classes, 1.0 / n_classes)

    @property
    def log_class_weights(self):
        return np.log(self.class_weights).reshape(1, -1)

    def parameters(self) -> dict:
        out = {}
        for k in range(self.n_classes):
            out[f"gmm.mean{k}"] = self.means[k]
            out[f"gmm.logvar{k}"] = self.log_vars[k]
        return out


def _gaussian_logprob_col(u: Tensor, mean: Tensor, log_var: Tensor) -> Tensor:
    """Log density of one diagonal Gaussian, as a [n, 1] column."""
    d = u.data.shape[1]
    diff = dc.broadcast_add_row(u, dc.negate(mean))
    quad = dc.matmul(dc.mul(diff, diff), dc.exp(dc.negate(log_var)))
    log_det_cov = dc.matmul(_ones_row(d), log_var)
    const = Tensor(np.full((1, 1), d * LOG_2PI))
    total = dc.broadcast_add_row(quad, dc.add(log_det_cov, const))
    return dc.scale(total, -0.5)


def class_conditional_logprob(z: Tensor, stack: FlowStack, prior: GmmPrior) -> Tensor:
    """log p(z | class k) for every k, shape [n, C]."""
    u, total_logdet = stack.forward(z)
    cols = [_gaussian_logprob_col(u, m, lv) for m, lv in zip(prior.means, prior.log_vars)]
    cc = cols[0] if prior.n_classes == 1 else dc.concat_last(cols)
    return dc.add(cc, _tile_col(total_logdet, prior.n_classes))


def _log_joint(cc: Tensor, prior: GmmPrior) -> Tensor:
    return dc.broadcast_add_row(cc, Tensor(prior.log_class_weights))


def log_posterior_from_conditional(cc: Tensor, prior: GmmPrior) -> Tensor:
    return dc.log_softmax(_log_joint(cc, prior))


def marginal_from_conditional(cc: Tensor, prior: GmmPrior) -> Tensor:
    """Row-wise logsumexp of the joint, shape [n]."""
    joint = _log_joint(cc, prior)
    zeros = np.zeros(joint.data.shape[0], dtype=np.int64)
    # logsumexp(row) = row[0] - log_softmax(row)[0], stable in log domain
    return dc.sub(dc.gather_class(joint, zeros), dc.gather_class(dc.log_softmax(joint), zeros))


def nfc_posterior(z: Tensor, stack: FlowStack, prior: GmmPrior) -> Tensor:
    """Class posterior p(y | z), rows summing to one."""
    return dc.exp(log_posterior_from_conditional(class_conditional_logprob(z, stack, prior), prior))


def marginal_logprob(z: Tensor, stack: FlowStack, prior: GmmPrior) -> Tensor:
    return marginal_from_conditional(class_conditional_logprob(z, stack, prior), prior)


def num_loss(z: Tensor, stack: FlowStack, prior: GmmPrior) -> Tensor:
    """Mean negative log-likelihood of the batch under the flow."""
    if z.data.shape[0] == 0:
        raise ValueError("num_loss: empty batch")
    return dc.scale(dc.reduce_mean(marginal_logprob(z, stack, prior)), -1.0)


def nfc_supervised_loss(z: Tensor, labels, stack: FlowStack, prior: GmmPrior) -> Tensor:
    """Cross-entropy of the flow posterior against integer labels."""
    target = nn.one_hot(labels, prior.n_classes)
    logp = log_posterior_from_conditional(class_conditional_logprob(z, stack, prior), prior)
    return nn.cross_entropy(target, logp)


class FlowModel:
    """Coupling stack plus GMM prior; the full generative classifier."""

    def __init__(self, dim, n_classes, n_layers=6, hidden=32, rng=None):
        self.stack = FlowStack(dim, n_layers=n_layers, hidden=hidden, rng=rng)
        self.prior = GmmPrior(dim, n_classes)

    def parameters(self) -> dict:
        out = self.stack.parameters()
        out.update(self.prior.parameters())
        return out

    def posterior(self, z: Tensor) -> Tensor:
        return nfc_posterior(z, self.stack, self.prior)
