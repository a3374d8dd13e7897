"""Synthetic 2-d datasets, labeled/unlabeled splits, weak/strong augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    features: np.ndarray  # [N, input_dim]
    labels: np.ndarray  # [N] ints in [0, C)
    n_classes: int
    split: str = "train"
    seed: int | None = None

    def __len__(self):
        return self.features.shape[0]

    def per_class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)

    def to_csv(self, path):
        dim = self.features.shape[1]
        header = ",".join(f"x{i + 1}" for i in range(dim)) + ",label,split"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(header + "\n")
            for row, label in zip(self.features, self.labels):
                coords = ",".join(repr(float(v)) for v in row)
                fh.write(f"{coords},{int(label)},{self.split}\n")


def _check_size(n, n_classes):
    if n < 2 * n_classes or n % n_classes != 0:
        raise ValueError(f"need n >= {2 * n_classes} and divisible by {n_classes}, got n={n}")


def make_two_moons(n, noise, seed, split="train") -> Dataset:
    """Two interleaving unit half-circles, the second shifted to (1, 0.5)."""
    _check_size(n, 2)
    rng = np.random.default_rng(seed)
    half = n // 2
    t0 = rng.uniform(0.0, np.pi, size=half)
    t1 = rng.uniform(0.0, np.pi, size=half)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.concatenate([upper, lower]) + rng.normal(0.0, noise, size=(n, 2)) if noise else np.concatenate([upper, lower])
    y = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    order = rng.permutation(n)
    return Dataset(x[order], y[order], n_classes=2, split=split, seed=seed)


def blob_centers(n_classes, radius=4.0):
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    return np.column_stack([radius * np.cos(angles), radius * np.sin(angles)])


def make_blobs(n, n_classes, spread, seed, split="train") -> Dataset:
    """Isotropic Gaussian clusters on a circle of centers."""
    _check_size(n, n_classes)
    rng = np.random.default_rng(seed)
    per = n // n_classes
    centers = blob_centers(n_classes)
    xs, ys = [], []
    for k in range(n_classes):
        xs.append(centers[k] + rng.normal(0.0, spread, size=(per, 2)) if spread else np.tile(centers[k], (per, 1)))
        ys.append(np.full(per, k, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = rng.permutation(n)
    return Dataset(x[order], y[order], n_classes=n_classes, split=split, seed=seed)


def make_circles(n, noise, seed, split="train") -> Dataset:
    """Concentric rings of radius 1.0 (class 0) and 0.5 (class 1)."""
    _check_size(n, 2)
    rng = np.random.default_rng(seed)
    half = n // 2
    t0 = rng.uniform(0.0, 2.0 * np.pi, size=half)
    t1 = rng.uniform(0.0, 2.0 * np.pi, size=half)
    outer = np.column_stack([np.cos(t0), np.sin(t0)])
    inner = 0.5 * np.column_stack([np.cos(t1), np.sin(t1)])
    x = np.concatenate([outer, inner])
    if noise:
        x = x + rng.normal(0.0, noise, size=(n, 2))
    y = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    order = rng.permutation(n)
    return Dataset(x[order], y[order], n_classes=2, split=split, seed=seed)


DATASET_MAKERS = {
    "two_moons": lambda n, noise, seed, split="train": make_two_moons(n, noise, seed, split),
    "blobs": lambda n, noise, seed, split="train": make_blobs(n, 2, noise, seed, split),
    "circles": lambda n, noise, seed, split="train": make_circles(n, noise, seed, split),
}


def split_labels(ds: Dataset, labels_per_class: int, seed):
    """Uniformly pick labels_per_class samples per class as the labeled set.

    The unlabeled remainder keeps its ground-truth labels in a sealed field
    that only diagnostics may read.
    """
    counts = ds.per_class_counts()
    if labels_per_class < 1 or np.any(counts < labels_per_class):
        raise ValueError(
            f"labels_per_class={labels_per_class} exceeds a class count {counts.tolist()}"
        )
    rng = np.random.default_rng(seed)
    labeled_idx = []
    for k in range(ds.n_classes):
        pool = np.flatnonzero(ds.labels == k)
        labeled_idx.append(rng.choice(pool, size=labels_per_class, replace=False))
    labeled_idx = np.sort(np.concatenate(labeled_idx))
    mask = np.zeros(len(ds), dtype=bool)
    mask[labeled_idx] = True
    labeled = Dataset(ds.features[mask], ds.labels[mask], ds.n_classes, ds.split, ds.seed)
    unlabeled = UnlabeledSet(features=ds.features[~mask], sealed_labels=ds.labels[~mask],
                             n_classes=ds.n_classes)
    return labeled, unlabeled


@dataclass
class UnlabeledSet:
    """Unlabeled pool; `sealed_labels` exists for diagnostics only and must
    never feed a training target."""

    features: np.ndarray
    sealed_labels: np.ndarray
    n_classes: int

    def __len__(self):
        return self.features.shape[0]


@dataclass
class AugPolicy:
    kind: str  # "weak" | "strong"
    sigma: float
    scale_jitter: float = 0.0  # per-coordinate scaling in [1-rho, 1+rho]
    p_drop: float = 0.0  # coordinate dropout probability


def weak_policy(sigma=0.05) -> AugPolicy:
    return AugPolicy(kind="weak", sigma=sigma)


def strong_policy(sigma=0.20, scale_jitter=0.15, p_drop=0.1) -> AugPolicy:
    return AugPolicy(kind="strong", sigma=sigma, scale_jitter=scale_jitter, p_drop=p_drop)


def augment(x: np.ndarray, policy: AugPolicy, rng) -> np.ndarray:
    """Jitter (weak) or scale+jitter+dropout (strong); shape preserved."""
    out = np.array(x, dtype=np.float64, copy=True)
    if policy.scale_jitter:
        out = out * rng.uniform(1.0 - policy.scale_jitter, 1.0 + policy.scale_jitter, size=out.shape)
    if policy.sigma:
        out = out + rng.normal(0.0, policy.sigma, size=out.shape)
    if policy.p_drop:
        out = out * (rng.random(out.shape) >= policy.p_drop)
    return out


@dataclass
class BatchPair:
    """One training step's worth of data.

    Weak and strong unlabeled views at index i come from the same source
    sample; `sealed_labels` ride along for pseudo-label diagnostics.
    """

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_weak: np.ndarray
    unlabeled_strong: np.ndarray
    sealed_labels: np.ndarray
    unlabeled_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def has_unlabeled(self):
        return self.unlabeled_weak.shape[0] > 0


def sample_batches(labeled: Dataset, unlabeled, batch_size: int, mu: int, rng,
                   weak: AugPolicy | None = None, strong: AugPolicy | None = None) -> BatchPair:
    """Draw one labeled batch of size B and one unlabeled batch of size mu*B.

    Pools smaller than the request are sampled with replacement so tiny
    labeled sets still fill a batch. Pass unlabeled=None for supervised-only
    training.
    """
    if len(labeled) == 0:
        raise ValueError("sample_batches: empty labeled pool")
    weak = weak or weak_policy()
    strong = strong or strong_policy()
    li = rng.choice(len(labeled), size=batch_size, replace=len(labeled) < batch_size)
    lx = augment(labeled.features[li], weak, rng)
    ly = labeled.labels[li]
    if unlabeled is None or len(unlabeled) == 0:
        empty = np.zeros((0, labeled.features.shape[1]))
        return BatchPair(lx, ly, empty, empty.copy(), np.zeros(0, dtype=np.int64))
    n_u = mu * batch_size
    ui = rng.choice(len(unlabeled), size=n_u, replace=len(unlabeled) < n_u)
    base = unlabeled.features[ui]
    return BatchPair(
        labeled_x=lx,
        labeled_y=ly,
        unlabeled_weak=augment(base, weak, rng),
        unlabeled_strong=augment(base, strong, rng),
        sealed_labels=unlabeled.sealed_labels[ui],
        unlabeled_indices=np.asarray(ui, dtype=np.int64),
    )
