"""Training loops: staged COLAM, the label baselines, and expected accuracy."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from ._seeding import substream
from .data import Dataset, NormStats, augment_batch, dataset_from_config, normalize_dataset
from .labels import (BaselineSpec, SoftLabelTable, disturb_labels, one_hot, smooth_targets,
                     update_soft_labels)
from .nn import (Batch, Network, OptimizerState, cross_entropy_soft, sgd_step,
                 softmax_tempered, tempered_loss)

METHODS = ("colam", "hard", "smooth", "disturb", "confidence-penalty")
METRICS_HEADER = "epoch,stage,split,loss,top1,seconds"


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


class TrainingDiverged(FloatingPointError):
    def __init__(self, stage: int, epoch: int, detail: str):
        super().__init__(f"training diverged at stage {stage}, epoch {epoch}: {detail}")
        self.stage = stage
        self.epoch = epoch


@dataclass
class TrainConfig:
    stages: int = 4
    epochs_per_stage: int = 10
    temperature: float = 1.5
    peers: int = 10
    batch_size: int = 32
    lr: float = 0.1
    lr_milestones: List[float] = field(default_factory=lambda: [0.5, 0.75])
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    hidden: List[int] = field(default_factory=lambda: [256, 256])
    method: str = "colam"
    epsilon: float = 0.1
    alpha: float = 0.1
    beta: float = 0.1
    augment: bool = False
    normalize: bool = False
    deterministic: bool = True
    data: dict = field(default_factory=lambda: {"kind": "synthetic", "preset": "triblob"})

    @property
    def total_epochs(self) -> int:
        return self.stages * self.epochs_per_stage

    def validate(self) -> "TrainConfig":
        p = []
        for name in ("stages", "epochs_per_stage", "peers", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                p.append(f"{name}: must be an integer >= 1, got {v!r}")
        if not (isinstance(self.temperature, (int, float)) and 0 < self.temperature < float("inf")):
            p.append(f"temperature: must be positive, got {self.temperature!r}")
        if not (isinstance(self.lr, (int, float)) and self.lr > 0):
            p.append(f"lr: must be positive, got {self.lr!r}")
        if not all(isinstance(m, (int, float)) and 0 < m < 1 for m in self.lr_milestones):
            p.append(f"lr_milestones: fractions of training must lie in (0, 1), got {self.lr_milestones!r}")
        if not (isinstance(self.lr_decay, (int, float)) and 0 < self.lr_decay <= 1):
            p.append(f"lr_decay: must lie in (0, 1], got {self.lr_decay!r}")
        if not (isinstance(self.momentum, (int, float)) and 0 <= self.momentum < 1):
            p.append(f"momentum: must lie in [0, 1), got {self.momentum!r}")
        if not (isinstance(self.weight_decay, (int, float)) and self.weight_decay >= 0):
            p.append(f"weight_decay: must be >= 0, got {self.weight_decay!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            p.append(f"seed: must be a nonnegative integer, got {self.seed!r}")
        if not (isinstance(self.hidden, list) and all(isinstance(h, int) and h >= 1 for h in self.hidden)):
            p.append(f"hidden: must be a list of positive widths, got {self.hidden!r}")
        if self.method not in METHODS:
            p.append(f"method: must be one of {METHODS}, got {self.method!r}")
        for name, hi in (("epsilon", 1), ("alpha", 1), ("beta", None)):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or v < 0 or (hi is not None and v > hi):
                p.append(f"{name}: out of range, got {v!r}")
        if not isinstance(self.data, dict):
            p.append("data: must be an object")
        if p:
            raise ConfigError(p)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        return cls(**doc).validate()

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
        if not isinstance(doc, dict):
            raise ConfigError([f"{path}: top level must be an object"])
        return cls.from_dict(doc)

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None}).validate()

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def baseline_spec(self) -> BaselineSpec:
        variant = "hard" if self.method == "colam" else self.method
        return BaselineSpec(variant, self.epsilon, self.alpha, self.beta)

    def lr_at(self, epoch: int) -> float:
        """Step schedule; ``epoch`` is 1-based."""
        lr = self.lr
        for frac in self.lr_milestones:
            if epoch - 1 >= round(frac * self.total_epochs):
                lr *= self.lr_decay
        return lr


@dataclass
class MetricRow:
    epoch: int
    stage: int
    split: str
    loss: float
    top1: float
    seconds: float

    def csv(self) -> str:
        return f"{self.epoch},{self.stage},{self.split},{self.loss:.17g},{self.top1:.17g},{self.seconds:.17g}"


@dataclass
class RunRecord:
    method: str
    config_hash: str
    seed: int
    rows: List[MetricRow] = field(default_factory=list)
    soft_labels: List[SoftLabelTable] = field(default_factory=list)
    net: Optional[Network] = None
    norm_stats: Optional[NormStats] = None
    wall_seconds: float = 0.0

    def final(self, split: str = "test") -> MetricRow:
        return [r for r in self.rows if r.split == split][-1]

    @property
    def final_test_top1(self) -> float:
        return self.final("test").top1

    @property
    def epochs(self) -> int:
        return max((r.epoch for r in self.rows), default=0)

    def metrics_csv(self, provenance: bool = True) -> str:
        lines = [f"# config_hash={self.config_hash}"] if provenance else []
        lines.append(METRICS_HEADER)
        lines.extend(r.csv() for r in self.rows)
        return "\n".join(lines) + "\n"


def prepare_dataset(config: TrainConfig) -> Tuple[Dataset, Optional[NormStats]]:
    """Build the configured dataset; the data seed defaults to the run seed."""
    doc = dict(config.data)
    if doc.get("kind", "synthetic") == "synthetic":
        doc.setdefault("seed", config.seed)
    ds = dataset_from_config(doc)
    ds.require_all_classes()
    if not (~ds.is_train).any():
        raise ValueError("dataset has no test split")
    if config.normalize:
        return normalize_dataset(ds)
    return ds, None


def evaluate(net: Network, x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    """(top-1 accuracy, mean hard-label cross entropy at T=1). Ties go to the lowest index."""
    if len(x) == 0:
        raise ValueError("cannot evaluate an empty split")
    logits = net.forward(x)
    acc = float((logits.argmax(axis=1) == y).mean())
    p = softmax_tempered(logits, 1.0)
    loss = float(np.mean([cross_entropy_soft(t, q) for t, q in zip(one_hot(y, net.num_classes), p)]))
    return acc, loss


# maps (stage, epoch, train labels) -> (N_train, C) targets for that epoch
TargetFn = Callable[[int, int, np.ndarray], np.ndarray]


def _fit(config: TrainConfig, ds: Dataset, method: str, targets_for: TargetFn, beta: float = 0.0,
         after_stage: Optional[Callable[[Network, int], None]] = None,
         on_batch: Optional[Callable[[int, int, np.ndarray], None]] = None) -> RunRecord:
    """The shared epoch loop. Every method runs through here so that runs with
    identical targets follow bitwise-identical trajectories."""
    seed = config.seed
    net = Network.init([ds.dim, *config.hidden, ds.num_classes], substream(seed, "init"))
    opt = OptimizerState.for_network(net, config.lr, config.momentum, config.weight_decay)
    shuffle = substream(seed, "shuffle")
    train_idx = np.flatnonzero(ds.is_train)
    x_train, y_train = ds.features[train_idx], ds.labels[train_idx]
    x_test, y_test = ds.split("test")
    use_aug = config.augment and ds.image_shape is not None
    record = RunRecord(method, config.config_hash(), seed)
    start = time.perf_counter()
    epoch = 0
    for stage in range(1, config.stages + 1):
        for _ in range(config.epochs_per_stage):
            epoch += 1
            t0 = time.perf_counter()
            opt.lr = config.lr_at(epoch)
            targets = targets_for(stage, epoch, y_train)
            order = shuffle.permutation(len(train_idx))
            loss_sum, correct = 0.0, 0
            for lo in range(0, len(order), config.batch_size):
                sel = order[lo:lo + config.batch_size]
                xb = x_train[sel]
                if use_aug:
                    xb = augment_batch(xb, ds.image_shape, seed, epoch, train_idx[sel])
                if on_batch is not None:
                    on_batch(stage, epoch, targets)
                batch = Batch(xb, targets[sel])
                try:
                    loss, grads, logits = tempered_loss(net, batch, config.temperature, confidence_beta=beta,
                                                        return_logits=True)
                    if not np.isfinite(loss):
                        raise FloatingPointError(f"loss is {loss}")
                    sgd_step(net, grads, opt)
                except FloatingPointError as exc:
                    raise TrainingDiverged(stage, epoch, str(exc)) from exc
                loss_sum += loss * len(sel)
                correct += int((logits.argmax(axis=1) == y_train[sel]).sum())
            secs = 0.0 if config.deterministic else time.perf_counter() - t0
            record.rows.append(MetricRow(epoch, stage, "train", loss_sum / len(order), correct / len(order), secs))
            acc, test_loss = evaluate(net, x_test, y_test)
            record.rows.append(MetricRow(epoch, stage, "test", test_loss, acc, secs))
        if after_stage is not None:
            after_stage(net, stage)
    record.net = net
    record.wall_seconds = time.perf_counter() - start
    return record


def run_colam(config: TrainConfig, dataset: Dataset, on_batch=None) -> RunRecord:
    """Staged alternating minimisation: hard labels in stage 1, then per-class
    soft labels re-estimated from peer logits at the end of every stage."""
    config.validate()
    c = dataset.num_classes
    tables: List[SoftLabelTable] = []

    def targets_for(stage, epoch, labels):
        table = tables[-1] if stage > 1 else SoftLabelTable.one_hot(c, 0, config.temperature)
        return table.targets(labels)

    def after_stage(net, stage):
        rng = substream(config.seed, "peers", stage)
        tables.append(update_soft_labels(net, dataset, config.peers, config.temperature, rng, stage))

    record = _fit(config, dataset, "colam", targets_for, after_stage=after_stage, on_batch=on_batch)
    record.soft_labels = tables
    return record


def run_baseline(spec: BaselineSpec, config: TrainConfig, dataset: Dataset, on_batch=None) -> RunRecord:
    config.validate()
    c = dataset.num_classes
    eye = np.eye(c)
    beta = 0.0
    if spec.variant == "hard":
        def targets_for(stage, epoch, labels):
            return eye[labels]
    elif spec.variant == "smooth":
        def targets_for(stage, epoch, labels):
            return smooth_targets(labels, spec.epsilon, c)
    elif spec.variant == "disturb":
        def targets_for(stage, epoch, labels):
            return eye[disturb_labels(labels, spec.alpha, c, substream(config.seed, "disturb", epoch))]
    else:
        beta = spec.beta

        def targets_for(stage, epoch, labels):
            return eye[labels]
    return _fit(config, dataset, spec.variant, targets_for, beta=beta, on_batch=on_batch)


def run_method(config: TrainConfig, dataset: Dataset) -> RunRecord:
    if config.method == "colam":
        return run_colam(config, dataset)
    return run_baseline(config.baseline_spec(), config, dataset)


def train_with_table(table: SoftLabelTable, config: TrainConfig, dataset: Dataset) -> RunRecord:
    """Fresh network trained on the frozen per-class targets of ``table``."""
    config.validate()
    if table.num_classes != dataset.num_classes:
        raise ValueError(f"checkpoint has {table.num_classes} classes, dataset has {dataset.num_classes}")
    return _fit(config, dataset, "expected-accuracy", lambda stage, epoch, labels: table.targets(labels))


def expected_accuracy(table: SoftLabelTable, config: TrainConfig, dataset: Dataset) -> float:
    return train_with_table(table, config, dataset).final_test_top1


def write_run(record: RunRecord, config: TrainConfig, run_dir) -> Path:
    """Persist a run as config.json, metrics.csv, softlabels_stage<k>.csv and params_final.bin."""
    from .nn import save_params

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=False)
    comment = f"config_hash={record.config_hash}"
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    (run_dir / "metrics.csv").write_text(record.metrics_csv())
    for table in record.soft_labels:
        table.save(run_dir / f"softlabels_stage{table.stage}.csv", comment)
    save_params(run_dir / "params_final.bin", record.net,
                {"seed": record.seed, "epoch": record.epochs, "config_hash": record.config_hash})
    if record.norm_stats is not None:
        record.norm_stats.save(run_dir / "normalization.json")
    return run_dir
