"""Experiment harness: config, seeded runs, metrics CSV, checkpoints, sweeps."""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as dat
from . import diffcore as dc
from . import flow as fl
from . import nn
from . import training as tr
from .diffcore import Tensor

SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Bad or unknown configuration content."""


class CheckpointError(ValueError):
    """Unreadable, truncated, or incompatible checkpoint file."""


@dataclass
class DatasetSpec:
    kind: str = "two_moons"
    n: int = 2000
    noise: float = 0.1
    n_test: int = 500

    def __post_init__(self):
        if self.kind not in dat.DATASET_MAKERS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass
class ModelSpec:
    hidden: tuple = (64, 64)
    feature_dim: int = 8
    flow_layers: int = 6
    flow_hidden: int = 32


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    labels_per_class: int = 4
    batch_size: int = 32
    mu: int = 7
    supervised_only: bool = False
    total_steps: int = 3000
    lam: float = 1e-6
    weight_policy: str = "ncue"
    ncue_disagree_rule: str = "min-of-max"
    pseudo_label_mode: str = "soft-da"
    stop_gradient: bool = True
    train_nfc_on_pseudo_labels: bool = False
    sgd_lr: float = 0.03
    sgd_momentum: float = 0.9
    sgd_weight_decay: float = 0.0
    adamw_lr: float = 0.001
    adamw_weight_decay: float = 0.01
    ema_decay: float = 0.999
    da_window: int = 32
    seeds: tuple = (0, 1, 2, 3, 4)
    eval_interval: int = 100
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        # validates the policy string
        self.policy()

    def policy(self) -> tr.WeightPolicy:
        base = tr.parse_policy(self.weight_policy)
        if base.kind == "ncue":
            return tr.WeightPolicy(kind="ncue", disagree_rule=self.ncue_disagree_rule)
        return base

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(
            total_steps=self.total_steps,
            lam=self.lam,
            policy=self.policy(),
            pseudo_label_mode=self.pseudo_label_mode,
            stop_gradient=self.stop_gradient,
            train_nfc_on_pseudo_labels=self.train_nfc_on_pseudo_labels,
            sgd_lr=self.sgd_lr,
            sgd_momentum=self.sgd_momentum,
            sgd_weight_decay=self.sgd_weight_decay,
            adamw_lr=self.adamw_lr,
            adamw_weight_decay=self.adamw_weight_decay,
            ema_decay=self.ema_decay,
            da_window=self.da_window,
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["schema_version"] = SCHEMA_VERSION
        out["dataset"] = dataclasses.asdict(self.dataset)
        out["model"] = dataclasses.asdict(self.model)
        out["model"]["hidden"] = list(self.model.hidden)
        out["seeds"] = list(self.seeds)
        return out


def _take(section: dict, allowed: dict, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return {k: section[k] for k in section}


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    top_fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    kwargs = _take(raw, top_fields, "config")
    try:
        if "dataset" in kwargs:
            ds = _take(kwargs["dataset"], {f.name: f for f in dataclasses.fields(DatasetSpec)}, "dataset")
            kwargs["dataset"] = DatasetSpec(**ds)
        if "model" in kwargs:
            ms = _take(kwargs["model"], {f.name: f for f in dataclasses.fields(ModelSpec)}, "model")
            if "hidden" in ms:
                ms["hidden"] = tuple(ms["hidden"])
            kwargs["model"] = ModelSpec(**ms)
        if "seeds" in kwargs:
            kwargs["seeds"] = tuple(kwargs["seeds"])
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from err


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return config_from_dict(raw)


METRICS_COLUMNS = [
    "step", "loss_x_d", "loss_u_d", "loss_x_n", "loss_u_n", "loss_total",
    "mean_tau", "high_conf_count", "thresh95_count", "correct_pl_count",
    "pl_acc", "r_hc", "train_acc", "train_acc_ema", "test_acc", "test_acc_ema",
]


@dataclass
class MetricsRow:
    step: int
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
    train_acc: float
    train_acc_ema: float
    test_acc: float
    test_acc_ema: float

    def as_csv(self) -> str:
        parts = [str(self.step)]
        for name in METRICS_COLUMNS[1:]:
            parts.append(repr(float(getattr(self, name))))
        return ",".join(parts)


def write_metrics_csv(path, rows):
    """Per-step stats are averaged over each eval interval before landing here."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION} aggregation=interval-mean\n")
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            fh.write(row.as_csv() + "\n")


@dataclass
class RunData:
    labeled: dat.Dataset
    unlabeled: dat.UnlabeledSet | None
    test: dat.Dataset
    train_features: np.ndarray
    train_labels: np.ndarray


def build_data(cfg: ExperimentConfig, seed: int) -> RunData:
    ss = np.random.SeedSequence(seed)
    data_seed, test_seed, split_seed, _ = ss.spawn(4)
    make = dat.DATASET_MAKERS[cfg.dataset.kind]
    train = make(cfg.dataset.n, cfg.dataset.noise, data_seed, "train")
    test = make(cfg.dataset.n_test, cfg.dataset.noise, test_seed, "test")
    labeled, unlabeled = dat.split_labels(train, cfg.labels_per_class, split_seed)
    if cfg.supervised_only or len(unlabeled) == 0:
        unlabeled = None
    return RunData(labeled, unlabeled, test, train.features, train.labels)


def build_models(cfg: ExperimentConfig, seed: int, n_classes: int, input_dim: int) -> tr.Models:
    ss = np.random.SeedSequence(seed)
    _, _, _, init_seed = ss.spawn(4)
    init_rng = np.random.default_rng(init_seed)
    backbone = nn.MlpBackbone(input_dim, hidden=cfg.model.hidden,
                              feature_dim=cfg.model.feature_dim, rng=init_rng)
    head = nn.SoftmaxHead(cfg.model.feature_dim, n_classes, rng=init_rng)
    flow_model = fl.FlowModel(cfg.model.feature_dim, n_classes,
                              n_layers=cfg.model.flow_layers,
                              hidden=cfg.model.flow_hidden, rng=init_rng)
    return tr.Models(backbone=backbone, head=head, flow=flow_model)


def init_run(cfg: ExperimentConfig, seed: int):
    data = build_data(cfg, seed)
    models = build_models(cfg, seed, data.labeled.n_classes, data.labeled.features.shape[1])
    train_rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xA5)))
    state = tr.init_train_state(models, cfg.train_config(), train_rng)
    return data, state


def _predict(backbone: nn.MlpBackbone, head: nn.SoftmaxHead, features) -> np.ndarray:
    with dc.no_grad():
        logprob = head.logprob(backbone.forward(Tensor(features)))
    return logprob.data.argmax(axis=1)


def eval_accuracy(backbone, head, dataset, param_values: dict | None = None) -> float:
    """Top-1 accuracy of the discriminative path; the flow plays no part.

    `param_values` optionally maps parameter names to replacement arrays
    (e.g. EMA shadows); live values are restored afterwards.
    """
    if len(dataset) == 0:
        raise ValueError("eval_accuracy: empty dataset")
    params = {**backbone.parameters(), **head.parameters()}
    saved = {}
    if param_values:
        for name, arr in param_values.items():
            saved[name] = params[name].data
            params[name].data = arr
    try:
        pred = _predict(backbone, head, dataset.features)
    finally:
        for name, arr in saved.items():
            params[name].data = arr
    return float((pred == dataset.labels).mean())


def _evaluate(cfg, data: RunData, state: tr.TrainState, stats_buffer) -> MetricsRow:
    models = state.models
    train_ds = dat.Dataset(data.train_features, data.train_labels,
                           data.labeled.n_classes, "train")
    test_acc = eval_accuracy(models.backbone, models.head, data.test)
    test_acc_ema = eval_accuracy(models.backbone, models.head, data.test, state.ema.shadow)
    train_acc = eval_accuracy(models.backbone, models.head, train_ds)
    train_acc_ema = eval_accuracy(models.backbone, models.head, train_ds, state.ema.shadow)

    def agg(name):
        return float(np.mean([getattr(s, name) for s in stats_buffer])) if stats_buffer else float("nan")

    return MetricsRow(
        step=state.step,
        loss_x_d=agg("loss_x_d"),
        loss_u_d=agg("loss_u_d"),
        loss_x_n=agg("loss_x_n"),
        loss_u_n=agg("loss_u_n"),
        loss_total=agg("loss_total"),
        mean_tau=agg("mean_tau"),
        high_conf_count=agg("high_conf_count"),
        thresh95_count=agg("thresh95_count"),
        correct_pl_count=agg("correct_pl_count"),
        pl_acc=agg("pl_acc"),
        r_hc=agg("r_hc"),
        train_acc=train_acc,
        train_acc_ema=train_acc_ema,
        test_acc=test_acc,
        test_acc_ema=test_acc_ema,
    )


def run_steps(cfg: ExperimentConfig, data: RunData, state: tr.TrainState, n_steps: int):
    """Advance training n_steps, emitting a metrics row per eval interval."""
    tcfg = cfg.train_config()
    rows = []
    buffer = []
    for _ in range(n_steps):
        batch = dat.sample_batches(data.labeled, data.unlabeled, cfg.batch_size, cfg.mu, state.rng)
        buffer.append(tr.train_step(state, batch, tcfg))
        if state.step % cfg.eval_interval == 0 or state.step == cfg.total_steps:
            rows.append(_evaluate(cfg, data, state, buffer))
            buffer = []
    return rows


@dataclass
class SeedRun:
    seed: int
    rows: list
    csv_path: str | None
    final_test_acc_ema: float


@dataclass
class ExperimentResult:
    runs: list
    mean_acc: float
    std_acc: float


def _prepare_output_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write_probe")
        with open(probe, "w") as fh:
            fh.write("ok")
        os.remove(probe)
    except OSError as err:
        raise ConfigError(f"output dir {path!r} not writable: {err}") from err


def run_experiment(cfg: ExperimentConfig, write_csv: bool = True) -> ExperimentResult:
    """Train once per seed; returns per-seed rows and the mean/std summary."""
    if write_csv:
        _prepare_output_dir(cfg.output_dir)
    runs = []
    for seed in cfg.seeds:
        data, state = init_run(cfg, seed)
        rows = run_steps(cfg, data, state, cfg.total_steps)
        csv_path = None
        if write_csv:
            csv_path = os.path.join(cfg.output_dir, f"seed{seed}.csv")
            write_metrics_csv(csv_path, rows)
        runs.append(SeedRun(seed, rows, csv_path, rows[-1].test_acc_ema))
    finals = np.array([r.final_test_acc_ema for r in runs])
    return ExperimentResult(runs=runs, mean_acc=float(finals.mean()), std_acc=float(finals.std()))


def _policy_tag(policy_text: str) -> str:
    return policy_text.replace(":", "-")


def compare_policies(cfg: ExperimentConfig, policies) -> dict:
    """Run identical seeds/data under each weighting policy.

    Returns {policy string: ExperimentResult}; per-step curve data for each
    run lands in the per-seed CSVs, and a summary table in comparison.csv.
    """
    _prepare_output_dir(cfg.output_dir)
    results = {}
    for policy_text in policies:
        sub = dataclasses.replace(
            cfg,
            weight_policy=policy_text,
            output_dir=os.path.join(cfg.output_dir, _policy_tag(policy_text)),
        )
        results[policy_text] = run_experiment(sub)
    table_path = os.path.join(cfg.output_dir, "comparison.csv")
    with open(table_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("policy,mean_acc,std_acc\n")
        for text, res in results.items():
            fh.write(f"{text},{res.mean_acc!r},{res.std_acc!r}\n")
    return results


def lambda_sweep(cfg: ExperimentConfig, values) -> list:
    """Re-run the experiment across flow-loss weights; one summary row each."""
    _prepare_output_dir(cfg.output_dir)
    results = []
    for lam in values:
        sub = dataclasses.replace(
            cfg, lam=lam, output_dir=os.path.join(cfg.output_dir, f"lam{lam:g}")
        )
        results.append((lam, run_experiment(sub)))
    table_path = os.path.join(cfg.output_dir, "lambda_sweep.csv")
    with open(table_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("lam,mean_acc,std_acc\n")
        for lam, res in results:
            fh.write(f"{lam!r},{res.mean_acc!r},{res.std_acc!r}\n")
    return results


def _named_arrays(state: tr.TrainState) -> dict:
    out = {}
    params = {**state.models.discriminative_parameters(), **state.models.flow_parameters()}
    for name, p in params.items():
        out[f"param/{name}"] = p.data
    for name, arr in state.ema.shadow.items():
        out[f"ema/{name}"] = arr
    for name, arr in state.sgd.velocity.items():
        out[f"sgd_v/{name}"] = np.asarray(arr, dtype=np.float64)
    for name, arr in state.adamw.m.items():
        out[f"adam_m/{name}"] = np.asarray(arr, dtype=np.float64)
    for name, arr in state.adamw.v.items():
        out[f"adam_v/{name}"] = np.asarray(arr, dtype=np.float64)
    if state.da.history:
        out["da/history"] = np.stack(state.da.history)
    return out


def save_checkpoint(path, state: tr.TrainState, cfg: ExperimentConfig, seed: int):
    """JSON header line + concatenated little-endian float64 arrays."""
    arrays = _named_arrays(state)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "seed": int(seed),
        "step": int(state.step),
        "adam_step": int(state.adamw.step),
        "rng_state": state.rng.bit_generator.state,
        "da_len": len(state.da.history),
        "arrays": [[name, list(arr.shape)] for name, arr in arrays.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for _, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild (cfg, seed, TrainState) bit-exactly from a checkpoint file."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    newline = blob.find(b"\n")
    if newline < 0:
        raise CheckpointError("checkpoint has no header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupted checkpoint header: {err}") from err
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')!r} not supported")
    payload = blob[newline + 1 :]
    expected = sum(int(np.prod(shape)) for _, shape in header["arrays"]) * 8
    if len(payload) != expected:
        raise CheckpointError(f"truncated checkpoint payload: {len(payload)} != {expected} bytes")

    cfg = config_from_dict(header["config"])
    seed = header["seed"]
    data = build_data(cfg, seed)
    models = build_models(cfg, seed, data.labeled.n_classes, data.labeled.features.shape[1])
    state = tr.init_train_state(models, cfg.train_config(), np.random.default_rng(0))
    state.rng.bit_generator.state = header["rng_state"]
    state.step = header["step"]
    state.adamw.step = header["adam_step"]

    arrays = {}
    offset = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[name] = np.array(arr, copy=True)
        offset += count * 8

    params = {**models.discriminative_parameters(), **models.flow_parameters()}
    for name, p in params.items():
        p.data = arrays[f"param/{name}"]
    state.ema.shadow = {n[len("ema/"):]: a for n, a in arrays.items() if n.startswith("ema/")}
    state.sgd.velocity = {n[len("sgd_v/"):]: a for n, a in arrays.items() if n.startswith("sgd_v/")}
    state.adamw.m = {n[len("adam_m/"):]: a for n, a in arrays.items() if n.startswith("adam_m/")}
    state.adamw.v = {n[len("adam_v/"):]: a for n, a in arrays.items() if n.startswith("adam_v/")}
    if "da/history" in arrays:
        for row in arrays["da/history"]:
            state.da.update(row)
    return cfg, seed, state


def export_datasets(cfg: ExperimentConfig, out_dir) -> list:
    """Write the train/test splits for each seed as CSV files."""
    _prepare_output_dir(out_dir)
    paths = []
    for seed in cfg.seeds:
        data = build_data(cfg, seed)
        train = dat.Dataset(data.train_features, data.train_labels,
                            data.labeled.n_classes, "train", seed)
        for ds, tag in ((train, "train"), (data.test, "test")):
            path = os.path.join(out_dir, f"seed{seed}_{tag}.csv")
            ds.to_csv(path)
            paths.append(path)
    return paths


def summarize(result: ExperimentResult) -> str:
    pct = 100.0 * result.mean_acc
    spread = 100.0 * result.std_acc
    return f"accuracy {pct:.2f} +/- {spread:.2f} over {len(result.runs)} seed(s)"
