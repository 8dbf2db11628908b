"""Datasets: synthetic Gaussian blobs, IDX / CIFAR binary loaders, augmentation."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._seeding import substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_IMAGE_BYTES = 3 * 32 * 32


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64, labels the learner sees
    num_classes: int
    is_train: np.ndarray  # (N,) bool
    provenance: dict = field(default_factory=dict)
    image_shape: Optional[Tuple[int, int, int]] = None  # (H, W, ch), features flattened HWC
    clean_labels: Optional[np.ndarray] = None  # generating labels before noise

    def __post_init__(self):
        n = len(self.features)
        if self.features.ndim != 2 or self.labels.shape != (n,) or self.is_train.shape != (n,):
            raise DataError("features, labels and split mask must share the sample axis")
        if not np.isfinite(self.features).all():
            raise DataError("features must be finite")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != self.features.shape[1]:
            raise DataError(f"image shape {self.image_shape} does not match feature width {self.features.shape[1]}")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def split(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """(features, labels) of the ``"train"`` or ``"test"`` split."""
        if name not in ("train", "test"):
            raise DataError(f"unknown split {name!r}")
        mask = self.is_train if name == "train" else ~self.is_train
        return self.features[mask], self.labels[mask]

    def require_all_classes(self) -> None:
        present = np.bincount(self.labels[self.is_train], minlength=self.num_classes)
        missing = np.flatnonzero(present == 0)
        if missing.size:
            raise DataError(f"classes {missing.tolist()} have no training samples")


@dataclass
class SyntheticSpec:
    means: List[List[float]]  # one row per class
    train_per_class: int = 500
    test_per_class: int = 200
    sigma: float = 1.2
    noise_rate: float = 0.1
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return len(self.means[0]) if self.means else 0

    def validate(self) -> None:
        problems = []
        m = np.asarray(self.means, dtype=np.float64) if self.means else np.zeros((0, 0))
        if m.ndim != 2 or len(m) < 2:
            problems.append("means: need at least two equal-length mean vectors")
        else:
            if not np.isfinite(m).all():
                problems.append("means: must be finite")
            d = np.linalg.norm(m[:, None] - m[None], axis=-1)
            if (d[~np.eye(len(m), dtype=bool)] == 0).any():
                problems.append("means: must be pairwise distinct")
        if self.train_per_class < 1:
            problems.append("train_per_class: must be >= 1")
        if self.test_per_class < 0:
            problems.append("test_per_class: must be >= 0")
        if not self.sigma >= 0:
            problems.append("sigma: must be >= 0")
        if not 0 <= self.noise_rate < 1:
            problems.append("noise_rate: must lie in [0, 1)")
        if problems:
            raise DataError("invalid synthetic spec: " + "; ".join(problems))

    @classmethod
    def from_json(cls, doc) -> "SyntheticSpec":
        if isinstance(doc, (str, Path)):
            doc = json.loads(Path(doc).read_text())
        doc = dict(doc)
        doc.pop("kind", None)
        if "means" not in doc and "groups" in doc:
            doc["means"] = tree_means(doc.pop("groups"), doc.pop("dim"), doc.pop("group_distance"),
                                      doc.pop("within_distance"))
        try:
            return cls(**doc)
        except TypeError as exc:
            raise DataError(f"invalid synthetic spec: {exc}") from None

    def to_json(self) -> dict:
        return {"kind": "synthetic", **asdict(self)}


def tree_means(groups: Sequence[int], dim: int, group_distance: float, within_distance: float) -> List[List[float]]:
    """Class means for a two-level similarity tree.

    Group centres sit at pairwise distance ``group_distance``; classes inside a
    group sit at pairwise distance ``within_distance`` around their centre.
    Every group and every class gets its own axis, so ``dim`` must be at least
    ``len(groups) + sum(groups)``.
    """
    need = len(groups) + sum(groups)
    if dim < need:
        raise DataError(f"tree layout needs dim >= {need}, got {dim}")
    means = []
    axis = len(groups)
    for g, size in enumerate(groups):
        centre = np.zeros(dim)
        centre[g] = group_distance / np.sqrt(2.0)
        for _ in range(size):
            mu = centre.copy()
            if size > 1:
                mu[axis] = within_distance / np.sqrt(2.0)
            axis += 1
            means.append(mu.tolist())
    return means


def triblob_spec(seed: int = 0, dim: int = 32) -> SyntheticSpec:
    """Default three-class benchmark: A and B 2 apart, C 10 away from A."""
    means = np.zeros((3, dim))
    means[1, 0] = 2.0
    means[2, 1] = 10.0
    return SyntheticSpec(means=means.tolist(), seed=seed)


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian blobs at the given means; train labels are uniformly resampled at ``noise_rate``."""
    spec.validate()
    means = np.asarray(spec.means, dtype=np.float64)
    c, d = means.shape
    rng = substream(spec.seed, "synthetic")
    feats, labels, train = [], [], []
    for is_train, per_class in ((True, spec.train_per_class), (False, spec.test_per_class)):
        y = np.repeat(np.arange(c), per_class)
        x = means[y] + spec.sigma * rng.standard_normal((len(y), d))
        feats.append(x)
        labels.append(y)
        train.append(np.full(len(y), is_train))
    features = np.concatenate(feats)
    clean = np.concatenate(labels).astype(np.int64)
    is_train = np.concatenate(train)
    noisy = clean.copy()
    flip = is_train & (substream(spec.seed, "label-noise").random(len(clean)) < spec.noise_rate)
    noisy[flip] = substream(spec.seed, "label-noise-class").integers(0, c, size=int(flip.sum()))
    ds = Dataset(features, noisy, c, is_train, provenance=spec.to_json(), clean_labels=clean)
    ds.require_all_classes()
    return ds


def _read_header(data: bytes, offset: int, fmt: str, what: str):
    size = struct.calcsize(fmt)
    if len(data) < offset + size:
        raise ParseError(f"truncated {what} header", len(data))
    return struct.unpack_from(fmt, data, offset)


def parse_idx(data: bytes, expected_magic: int) -> np.ndarray:
    (magic,) = _read_header(data, 0, ">I", "IDX")
    if magic != expected_magic:
        raise ParseError(f"wrong IDX magic: expected 0x{expected_magic:08x}, got 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    dims = _read_header(data, 4, f">{ndim}I", "IDX")
    offset = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(data) < offset + count:
        raise ParseError(f"truncated IDX payload: need {count} bytes, have {len(data) - offset}", len(data))
    if len(data) > offset + count:
        raise ParseError(f"{len(data) - offset - count} trailing bytes after IDX payload", offset + count)
    return np.frombuffer(data, np.uint8, count, offset).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, train: bool = True) -> Dataset:
    """Load an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = parse_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC)
    labels = parse_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    if labels.size and labels.max() >= num_classes:
        raise DataError(f"label {int(labels.max())} out of range for {num_classes} classes")
    n, h, w = images.shape
    return Dataset(
        images.reshape(n, h * w).astype(np.float64) / 255.0,
        labels.astype(np.int64),
        num_classes,
        np.full(n, train),
        provenance={"kind": "idx", "images": str(images_path), "labels": str(labels_path)},
        image_shape=(h, w, 1),
    )


def parse_cifar(data: bytes, num_classes: int = 10) -> Tuple[np.ndarray, np.ndarray]:
    """Records of label byte(s) + 3072 channel-major pixels -> (N, 32*32*3 HWC floats, labels).

    ``num_classes=100`` reads the coarse/fine two-byte layout and keeps the fine label.
    """
    label_bytes = 2 if num_classes == 100 else 1
    record = label_bytes + CIFAR_IMAGE_BYTES
    if len(data) % record:
        raise ParseError(f"file size {len(data)} is not a multiple of the {record}-byte record", len(data) - len(data) % record)
    raw = np.frombuffer(data, np.uint8).reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise ParseError(f"record {i}: label {labels[i]} out of range for {num_classes} classes", i * record + label_bytes - 1)
    pixels = raw[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pixels.reshape(len(raw), -1).astype(np.float64) / 255.0, labels


def load_cifar_bin(train_paths: Sequence, test_paths: Sequence = (), num_classes: int = 10) -> Dataset:
    feats, labels, train = [], [], []
    for is_train, paths in ((True, train_paths), (False, test_paths)):
        for p in paths:
            x, y = parse_cifar(Path(p).read_bytes(), num_classes)
            feats.append(x)
            labels.append(y)
            train.append(np.full(len(y), is_train))
    if not feats:
        raise DataError("no CIFAR files given")
    return Dataset(
        np.concatenate(feats), np.concatenate(labels), num_classes, np.concatenate(train),
        provenance={"kind": "cifar", "train": [str(p) for p in train_paths],
                    "test": [str(p) for p in test_paths], "num_classes": num_classes},
        image_shape=(32, 32, 3),
    )


def crop_flip(image: np.ndarray, top: int, left: int, flip: bool, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, crop the original size at (top, left), optionally mirror."""
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    out = padded[top:top + h, left:left + w]
    return out[:, ::-1] if flip else out


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random pad-and-crop plus a horizontal flip with probability 0.5 on an (H, W, ch) image."""
    if image.ndim != 3:
        raise DataError(f"augmentation needs (H, W, ch) images, got shape {image.shape}")
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    return crop_flip(image, int(top), int(left), bool(rng.random() < 0.5), pad)


def augment_batch(features: np.ndarray, image_shape: Optional[Tuple[int, int, int]], seed: int, epoch: int,
                  indices: np.ndarray) -> np.ndarray:
    """Augment flattened images, each from its own (seed, epoch, sample) sub-stream."""
    if image_shape is None:
        raise DataError("augmentation is only defined for image datasets")
    out = np.empty_like(features)
    for row, idx in enumerate(indices):
        rng = substream(seed, "augment", epoch, int(idx))
        out[row] = augment(features[row].reshape(image_shape), rng).reshape(-1)
    return out


@dataclass
class NormStats:
    mean: List[float]
    std: List[float]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls(**json.loads(Path(path).read_text()))


def _channel_view(ds: Dataset, x: np.ndarray) -> np.ndarray:
    ch = ds.image_shape[2] if ds.image_shape else ds.dim
    return x.reshape(len(x), -1, ch)


def compute_norm_stats(ds: Dataset) -> NormStats:
    """Per-channel (per-feature for vector data) mean/std over the train split."""
    x = _channel_view(ds, ds.features[ds.is_train])
    return NormStats(x.mean(axis=(0, 1)).tolist(), x.std(axis=(0, 1)).tolist())


def normalize_dataset(ds: Dataset, stats: Optional[NormStats] = None) -> Tuple[Dataset, NormStats]:
    if stats is None:
        stats = compute_norm_stats(ds)
    std = np.asarray(stats.std)
    zero = np.flatnonzero(std <= 0)
    if zero.size:
        raise DataError(f"channels {zero.tolist()} have zero standard deviation")
    x = (_channel_view(ds, ds.features) - np.asarray(stats.mean)) / std
    return replace(ds, features=x.reshape(ds.features.shape)), stats


def dataset_from_config(doc: dict) -> Dataset:
    """Build a dataset from the ``data`` section of a run config."""
    kind = doc.get("kind", "synthetic")
    if kind == "synthetic":
        if doc.get("preset") == "triblob":
            spec = triblob_spec(doc.get("seed", 0), doc.get("dim", 32))
            overrides = {k: v for k, v in doc.items() if k not in ("kind", "preset", "dim")}
            spec = replace(spec, **overrides)
        else:
            spec = SyntheticSpec.from_json(doc)
        return gen_synthetic(spec)
    if kind == "idx":
        train = load_idx(doc["train_images"], doc["train_labels"], doc.get("num_classes", 10), train=True)
        if "test_images" not in doc:
            return train
        test = load_idx(doc["test_images"], doc["test_labels"], doc.get("num_classes", 10), train=False)
        return Dataset(np.concatenate([train.features, test.features]),
                       np.concatenate([train.labels, test.labels]), train.num_classes,
                       np.concatenate([train.is_train, test.is_train]), provenance=dict(doc),
                       image_shape=train.image_shape)
    if kind == "cifar":
        return load_cifar_bin(doc["train"], doc.get("test", ()), doc.get("num_classes", 10))
    raise DataError(f"unknown dataset kind {kind!r}")
