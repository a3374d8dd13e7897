"""The semi-supervised objective: pseudo-labels, consensus weights, losses.

Per step, weak views of unlabeled data give pseudo-labels from the softmax
head and a consensus check against the flow classifier; agreement keeps a
sample at full weight, disagreement downweights it by the smaller of the two
classifiers' confidences. The weighted cross-entropy supervises the strong
views. The flow trains on the same features behind a gradient stop so its
losses never touch the backbone.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import flow as fl
from . import nn
from .data import BatchPair
from .diffcore import NumericError, Tensor


@dataclass(frozen=True)
class WeightPolicy:
    kind: str  # "ncue" | "ncue-zero" | "threshold" | "none"
    threshold: float | None = None
    # disagreement rule for the ncue kind: "min-of-max" compares the two
    # classifiers' top probabilities; "pd-argmax" compares their probability
    # of the discriminative argmax class
    disagree_rule: str = "min-of-max"

    def __post_init__(self):
        if self.kind not in ("ncue", "ncue-zero", "threshold", "none"):
            raise ValueError(f"unknown weight policy kind {self.kind!r}")
        if self.kind == "threshold" and not (self.threshold and 0.0 < self.threshold <= 1.0):
            raise ValueError("threshold policy needs a threshold in (0, 1]")
        if self.disagree_rule not in ("min-of-max", "pd-argmax"):
            raise ValueError(f"unknown disagree rule {self.disagree_rule!r}")

    @property
    def needs_flow_posterior(self):
        return self.kind in ("ncue", "ncue-zero")


def parse_policy(text: str) -> WeightPolicy:
    """Parse 'ncue', 'ncue-zero', 'none', or 'threshold:0.95'."""
    text = text.strip().lower()
    if text.startswith("threshold:"):
        return WeightPolicy(kind="threshold", threshold=float(text.split(":", 1)[1]))
    return WeightPolicy(kind=text)


def policy_to_string(policy: WeightPolicy) -> str:
    if policy.kind == "threshold":
        return f"threshold:{policy.threshold}"
    return policy.kind


class DaState:
    """Sliding-window running average of unlabeled predictions.

    The average starts at the target marginal (uniform by default) and
    tracks the mean prediction of the last `window` batches.
    """

    def __init__(self, n_classes, window=32, target=None):
        self.n_classes = n_classes
        self.window = window
        self.target = np.full(n_classes, 1.0 / n_classes) if target is None else np.asarray(target, dtype=np.float64)
        self.history = deque(maxlen=window)

    @property
    def running_average(self) -> np.ndarray:
        if not self.history:
            return self.target.copy()
        return np.mean(np.stack(self.history), axis=0)

    def update(self, batch_mean):
        self.history.append(np.asarray(batch_mean, dtype=np.float64))


def distribution_align(p: np.ndarray, da: DaState) -> np.ndarray:
    """Rescale rows by target/running-average and renormalize.

    The running average is advanced with the pre-alignment batch mean after
    the alignment is computed.
    """
    p = np.asarray(p, dtype=np.float64)
    avg = np.clip(da.running_average, 1e-6, None)
    scaled = p * (da.target / avg)
    aligned = scaled / scaled.sum(axis=1, keepdims=True)
    da.update(p.mean(axis=0))
    return aligned


def make_pseudo_labels(p_d_weak: np.ndarray, mode: str, da: DaState) -> np.ndarray:
    """Training targets from weak-view predictions; never sharpened."""
    p = np.asarray(p_d_weak, dtype=np.float64)
    if mode == "one-hot":
        return nn.one_hot(p.argmax(axis=1), p.shape[1])
    if mode == "soft-da":
        return distribution_align(p, da)
    raise ValueError(f"unknown pseudo-label mode {mode!r}")


def _check_rows_normalized(name, p):
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError(f"{name}: rows must sum to 1")


def ncue_weight(p_d: np.ndarray, p_n: np.ndarray | None, policy: WeightPolicy) -> np.ndarray:
    """Per-sample weights in [0, 1]; ties break toward the lowest class."""
    p_d = np.asarray(p_d, dtype=np.float64)
    _check_rows_normalized("ncue_weight: p_d", p_d)
    m = p_d.shape[0]
    if policy.kind == "none":
        return np.ones(m)
    if policy.kind == "threshold":
        return (p_d.max(axis=1) >= policy.threshold).astype(np.float64)
    if p_n is None:
        raise ValueError(f"policy {policy.kind!r} needs flow posteriors")
    p_n = np.asarray(p_n, dtype=np.float64)
    _check_rows_normalized("ncue_weight: p_n", p_n)
    a_d = p_d.argmax(axis=1)
    agree = a_d == p_n.argmax(axis=1)
    if policy.kind == "ncue-zero":
        return agree.astype(np.float64)
    if policy.disagree_rule == "min-of-max":
        alt = np.minimum(p_d.max(axis=1), p_n.max(axis=1))
    else:
        rows = np.arange(m)
        alt = np.minimum(p_d[rows, a_d], p_n[rows, a_d])
    return np.where(agree, 1.0, alt)


def unlabeled_loss_d(targets: np.ndarray, tau: np.ndarray, logprob_strong: Tensor) -> Tensor:
    """Weighted pseudo-label cross-entropy on strong views.

    Targets and weights are constants; only the strong-view branch carries
    gradient.
    """
    targets = np.asarray(targets, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    m = logprob_strong.data.shape[0]
    if targets.shape != logprob_strong.data.shape or tau.shape != (m,):
        raise dc.ShapeError(
            f"unlabeled_loss_d: targets {targets.shape}, tau {tau.shape}, "
            f"logprob {logprob_strong.data.shape}"
        )
    weighted = tau[:, None] * targets
    return dc.scale(dc.reduce_sum(dc.mul(Tensor(weighted), logprob_strong)), -1.0 / m)


@dataclass
class TrainConfig:
    total_steps: int = 3000
    lam: float = 1e-6
    policy: WeightPolicy = field(default_factory=lambda: WeightPolicy(kind="ncue"))
    pseudo_label_mode: str = "soft-da"  # "soft-da" | "one-hot"
    stop_gradient: bool = True
    train_nfc_on_pseudo_labels: bool = False
    sgd_lr: float = 0.03
    sgd_momentum: float = 0.9
    sgd_weight_decay: float = 0.0
    adamw_lr: float = 0.001
    adamw_weight_decay: float = 0.01
    ema_decay: float = 0.999
    da_window: int = 32

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.pseudo_label_mode not in ("soft-da", "one-hot"):
            raise ValueError(f"unknown pseudo-label mode {self.pseudo_label_mode!r}")


@dataclass
class Models:
    backbone: nn.MlpBackbone
    head: nn.SoftmaxHead
    flow: fl.FlowModel

    def discriminative_parameters(self) -> dict:
        return {**self.backbone.parameters(), **self.head.parameters()}

    def flow_parameters(self) -> dict:
        return self.flow.parameters()


@dataclass
class LossReport:
    loss_x_d: float
    loss_u_d: float
    loss_x_n: float
    loss_u_n: float
    total: float
    tau: np.ndarray | None = None
    max_p_d: np.ndarray | None = None
    argmax_p_d: np.ndarray | None = None
    agreement: np.ndarray | None = None


def _term(name, thunk):
    try:
        t = thunk()
    except NumericError as err:
        raise NumericError(f"loss term '{name}': {err}") from err
    if not np.isfinite(t.data):
        raise NumericError(f"loss term '{name}' is non-finite")
    return t


def total_loss(models: Models, batch: BatchPair, cfg: TrainConfig, da: DaState,
               pseudo: tuple[np.ndarray, np.ndarray] | None = None):
    """Assemble the full objective for one batch.

    Returns (loss tensor, report). `pseudo` optionally injects precomputed
    (targets, tau) so the loss can be probed as a function of parameters
    with the pseudo-label constants held fixed.
    """
    backbone, head = models.backbone, models.head
    stack, prior = models.flow.stack, models.flow.prior

    z_l = backbone.forward(Tensor(batch.labeled_x))
    target_l = nn.one_hot(batch.labeled_y, head.n_classes)
    loss_x_d = _term("sup-d", lambda: nn.cross_entropy(target_l, head.logprob(z_l)))
    loss = loss_x_d

    tau = targets = None
    max_p_d = argmax_p_d = agreement = None
    loss_u_d_val = float("nan")
    if batch.has_unlabeled:
        if cfg.stop_gradient:
            with dc.no_grad():
                z_uw = backbone.forward(Tensor(batch.unlabeled_weak))
        else:
            z_uw = backbone.forward(Tensor(batch.unlabeled_weak))
        with dc.no_grad():
            p_d_weak = dc.exp(head.logprob(z_uw)).data
            p_n_weak = models.flow.posterior(z_uw).data if cfg.policy.needs_flow_posterior else None
        max_p_d = p_d_weak.max(axis=1)
        argmax_p_d = p_d_weak.argmax(axis=1)
        if p_n_weak is not None:
            agreement = argmax_p_d == p_n_weak.argmax(axis=1)
        if pseudo is None:
            tau = ncue_weight(p_d_weak, p_n_weak, cfg.policy)
            targets = make_pseudo_labels(p_d_weak, cfg.pseudo_label_mode, da)
        else:
            targets, tau = pseudo
        z_us = backbone.forward(Tensor(batch.unlabeled_strong))
        loss_u_d = _term(
            "unsup-d", lambda: unlabeled_loss_d(targets, tau, head.logprob(z_us))
        )
        loss_u_d_val = loss_u_d.item()
        loss = dc.add(loss, loss_u_d)

    feats_l = dc.detach(z_l) if cfg.stop_gradient else z_l
    loss_x_n = _term(
        "sup-n", lambda: fl.nfc_supervised_loss(feats_l, batch.labeled_y, stack, prior)
    )
    loss = dc.add(loss, loss_x_n)

    loss_u_n_val = float("nan")
    if batch.has_unlabeled and (cfg.lam > 0.0 or cfg.train_nfc_on_pseudo_labels):
        feats_u = dc.detach(z_uw) if cfg.stop_gradient else z_uw
        cc_u = fl.class_conditional_logprob(feats_u, stack, prior)
        if cfg.lam > 0.0:
            loss_u_n = _term(
                "unsup-n",
                lambda: dc.scale(dc.reduce_mean(fl.marginal_from_conditional(cc_u, prior)), -1.0),
            )
            loss_u_n_val = loss_u_n.item()
            loss = dc.add(loss, dc.scale(loss_u_n, cfg.lam))
        if cfg.train_nfc_on_pseudo_labels:
            logp_n = fl.log_posterior_from_conditional(cc_u, prior)
            loss = dc.add(loss, _term("pl-n", lambda: unlabeled_loss_d(targets, tau, logp_n)))

    report = LossReport(
        loss_x_d=loss_x_d.item(),
        loss_u_d=loss_u_d_val,
        loss_x_n=loss_x_n.item(),
        loss_u_n=loss_u_n_val,
        total=loss.item(),
        tau=tau,
        max_p_d=max_p_d,
        argmax_p_d=argmax_p_d,
        agreement=agreement,
    )
    return loss, report


@dataclass
class TrainState:
    models: Models
    sgd: nn.SgdNesterovState
    adamw: nn.AdamWState
    ema: nn.EmaState
    da: DaState
    rng: np.random.Generator
    step: int = 0


def init_train_state(models: Models, cfg: TrainConfig, rng) -> TrainState:
    return TrainState(
        models=models,
        sgd=nn.SgdNesterovState(momentum=cfg.sgd_momentum, weight_decay=cfg.sgd_weight_decay),
        adamw=nn.AdamWState(weight_decay=cfg.adamw_weight_decay),
        ema=nn.ema_init(models.discriminative_parameters(), decay=cfg.ema_decay),
        da=DaState(models.head.n_classes, window=cfg.da_window),
        rng=rng,
        step=0,
    )


@dataclass
class StepStats:
    loss_x_d: float
    loss_u_d: float
    loss_x_n: float
    loss_u_n: float
    loss_total: float
    mean_tau: float
    high_conf_count: float
    thresh95_count: float
    correct_pl_count: float
    pl_acc: float
    r_hc: float


def train_step(state: TrainState, batch: BatchPair, cfg: TrainConfig) -> StepStats:
    """One full iteration; deterministic given (models, batch, state)."""
    loss, report = total_loss(state.models, batch, cfg, state.da)

    params_d = state.models.discriminative_parameters()
    params_n = state.models.flow_parameters()
    tensors = list(params_d.values()) + list(params_n.values())
    grad_map = dc.backward(loss, tensors)
    grads_d = {name: grad_map[p] for name, p in params_d.items()}
    grads_n = {name: grad_map[p] for name, p in params_n.items()}

    nn.sgd_nesterov_step(params_d, grads_d, state.sgd, nn.cosine_lr(cfg.sgd_lr, state.step, cfg.total_steps))
    nn.adamw_step(params_n, grads_n, state.adamw, nn.cosine_lr(cfg.adamw_lr, state.step, cfg.total_steps))
    nn.ema_update(state.ema, params_d)
    state.step += 1

    if report.tau is None:
        return StepStats(report.loss_x_d, report.loss_u_d, report.loss_x_n, report.loss_u_n,
                         report.total, float("nan"), 0.0, 0.0, 0.0, float("nan"), float("nan"))
    m = report.tau.shape[0]
    if state.models.head.n_classes and cfg.policy.kind == "threshold":
        high_conf = float((report.max_p_d >= cfg.policy.threshold).sum())
    else:
        high_conf = float((report.tau >= 1.0).sum())
    correct = float((report.argmax_p_d == batch.sealed_labels).sum())
    return StepStats(
        loss_x_d=report.loss_x_d,
        loss_u_d=report.loss_u_d,
        loss_x_n=report.loss_x_n,
        loss_u_n=report.loss_u_n,
        loss_total=report.total,
        mean_tau=float(report.tau.mean()),
        high_conf_count=high_conf,
        thresh95_count=float((report.max_p_d > 0.95).sum()),
        correct_pl_count=correct,
        pl_acc=correct / m,
        r_hc=float((report.max_p_d > 0.95).mean()),
    )
