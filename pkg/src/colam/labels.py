"""Label transformations: smoothing, DisturbLabel, confidence penalty, and
COLAM's per-class soft labels learned from peer-sample logits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .data import Dataset
from .nn import Network, ShapeError, entropy, softmax_tempered

VARIANTS = ("hard", "smooth", "disturb", "confidence-penalty")


def one_hot(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    out = np.zeros(y.shape + (num_classes,))
    np.put_along_axis(out, y[..., None], 1.0, axis=-1)
    return out


def label_smooth(y: int, epsilon: float, num_classes: int) -> np.ndarray:
    """(1 - eps) * onehot(y) + eps / C."""
    if not 0 <= epsilon <= 1:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if not 0 <= y < num_classes:
        raise ValueError(f"class {y} out of range for {num_classes} classes")
    out = np.full(num_classes, epsilon / num_classes)
    out[y] = (1 - epsilon) + epsilon / num_classes
    return out


def smooth_targets(labels: np.ndarray, epsilon: float, num_classes: int) -> np.ndarray:
    """Row-wise ``label_smooth`` for an array of labels."""
    rows = np.stack([label_smooth(c, epsilon, num_classes) for c in range(num_classes)])
    return rows[labels]


def disturb_labels(labels: np.ndarray, alpha: float, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Each label is kept with probability 1 - alpha, else redrawn uniformly from all classes.

    Redrawing over all classes (the true one included) makes the expected
    one-hot equal ``label_smooth(y, alpha, C)`` exactly.
    """
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    labels = np.asarray(labels)
    hit = rng.random(labels.shape) < alpha
    draw = rng.integers(0, num_classes, size=labels.shape)
    return np.where(hit, draw, labels)


def disturb_label(y: int, alpha: float, num_classes: int, rng: np.random.Generator) -> int:
    return int(disturb_labels(np.array([y]), alpha, num_classes, rng)[0])


def confidence_penalty(p, beta: float) -> float:
    """-beta * H(p); adding it to the loss rewards high-entropy predictions."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return float(-beta * entropy(p))


def half_sq_dist(y, y_prime) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_prime = np.asarray(y_prime, dtype=np.float64)
    if y.shape != y_prime.shape:
        raise ShapeError(f"length mismatch: {y.shape} vs {y_prime.shape}")
    return 0.5 * float(((y - y_prime) ** 2).sum())


@dataclass(frozen=True)
class BaselineSpec:
    variant: str = "hard"
    epsilon: float = 0.1
    alpha: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown baseline {self.variant!r}; expected one of {VARIANTS}")
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class PeerSet:
    class_id: int
    indices: np.ndarray  # dataset row indices, ascending
    seed: Optional[int] = None


def get_peer_samples(class_id: int, k: int, dataset: Dataset, rng: np.random.Generator,
                     seed: Optional[int] = None) -> PeerSet:
    """Up to ``k`` distinct training samples labelled ``class_id``, drawn without replacement."""
    if k < 1:
        raise ValueError(f"peer count must be >= 1, got {k}")
    members = np.flatnonzero(dataset.is_train & (dataset.labels == class_id))
    if members.size == 0:
        raise ValueError(f"class {class_id} has no training samples to draw peers from")
    if k >= members.size:
        chosen = members
    else:
        chosen = np.sort(rng.choice(members, size=k, replace=False))
    return PeerSet(class_id, chosen, seed)


def mean_logits(logits: np.ndarray) -> np.ndarray:
    """Column means with exactly-rounded sums, so row order cannot change the result.

    This is the closed-form argmin over y of sum_i 0.5 * ||y - logits_i||^2.
    """
    logits = np.asarray(logits, dtype=np.float64)
    return np.array([math.fsum(col) for col in logits.T]) / len(logits)


def soft_label_row(peer_logits: np.ndarray, T: float) -> np.ndarray:
    return softmax_tempered(mean_logits(peer_logits), T)


@dataclass(frozen=True)
class SoftLabelTable:
    probs: np.ndarray  # (C, C); row c is the target for every class-c sample
    stage: int
    temperature: float

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] != probs.shape[1]:
            raise ShapeError(f"soft-label table must be C x C, got {probs.shape}")
        if (probs < 0).any() or np.abs(probs.sum(axis=1) - 1).max() > 1e-9:
            raise ValueError("soft-label rows must be probability vectors")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def one_hot(cls, num_classes: int, stage: int = 0, temperature: float = 1.0) -> "SoftLabelTable":
        return cls(np.eye(num_classes), stage, temperature)

    @classmethod
    def uniform(cls, num_classes: int, stage: int = 0, temperature: float = 1.0) -> "SoftLabelTable":
        return cls(np.full((num_classes, num_classes), 1.0 / num_classes), stage, temperature)

    def targets(self, labels: np.ndarray) -> np.ndarray:
        return self.probs[labels]

    def digest(self) -> bytes:
        return self.probs.tobytes()

    def to_csv(self, comment: Optional[str] = None) -> str:
        c = self.num_classes
        lines = [f"# {comment}"] if comment else []
        lines.append(",".join(["class", "stage", "T"] + [f"p{j}" for j in range(c)]))
        for i, row in enumerate(self.probs):
            lines.append(",".join([str(i), str(self.stage), f"{self.temperature:.17g}"] + [f"{v:.17g}" for v in row]))
        return "\n".join(lines) + "\n"

    def save(self, path, comment: Optional[str] = None) -> None:
        Path(path).write_text(self.to_csv(comment))

    @classmethod
    def from_csv(cls, text: str) -> "SoftLabelTable":
        rows = [l for l in text.splitlines() if l and not l.startswith("#")]
        header, body = rows[0].split(","), [r.split(",") for r in rows[1:]]
        if header[:3] != ["class", "stage", "T"]:
            raise ValueError(f"unexpected soft-label header {header[:3]}")
        body.sort(key=lambda r: int(r[0]))
        if [int(r[0]) for r in body] != list(range(len(body))):
            raise ValueError("soft-label rows must cover classes 0..C-1 once each")
        probs = np.array([[float(v) for v in r[3:]] for r in body])
        return cls(probs, int(body[0][1]), float(body[0][2]))

    @classmethod
    def load(cls, path) -> "SoftLabelTable":
        return cls.from_csv(Path(path).read_text())


def update_soft_labels(net: Network, dataset: Dataset, k: int, T: float, rng: np.random.Generator,
                       stage: int = 0) -> SoftLabelTable:
    """Recompute every class's soft label from ``k`` random peers.

    Peer logits come from the raw (un-augmented) training inputs; their mean
    minimises the summed half squared distance and is then passed through
    the tempered softmax.
    """
    rows: List[np.ndarray] = []
    for c in range(dataset.num_classes):
        peers = get_peer_samples(c, k, dataset, rng)
        logits = net.forward(dataset.features[peers.indices])
        bad = np.flatnonzero(~np.isfinite(logits).all(axis=1))
        if bad.size:
            raise FloatingPointError(f"class {c}: non-finite logits for sample {int(peers.indices[bad[0]])}")
        rows.append(soft_label_row(logits, T))
    return SoftLabelTable(np.stack(rows), stage, T)
