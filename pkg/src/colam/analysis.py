"""Representation geometry: class templates, normalized distances, ADT/ADC and
the projection onto the plane spanned by three templates."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .data import Dataset
from .nn import Network, ShapeError


class AnalysisError(ValueError):
    pass


def normalize_rows(v: np.ndarray) -> np.ndarray:
    """Unit-normalize along the last axis; zero rows and rows already of unit
    length (to within a few ulps) pass through untouched, which makes the
    operation exactly idempotent."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    unit = np.abs(norms - 1.0) <= 8 * np.finfo(np.float64).eps
    return v / np.where((norms > 0) & ~unit, norms, 1.0)


@dataclass(frozen=True)
class RepresentationSet:
    vectors: np.ndarray  # (N, hidden)
    labels: np.ndarray  # (N,)
    split: str

    def of_class(self, c: int) -> np.ndarray:
        members = self.vectors[self.labels == c]
        if len(members) == 0:
            raise AnalysisError(f"class {c} has no representations in the {self.split} split")
        return members


@dataclass(frozen=True)
class TemplateSet:
    weights: np.ndarray  # (C, hidden), final-layer weight rows; bias excluded

    @classmethod
    def from_network(cls, net: Network) -> "TemplateSet":
        return cls(net.layers[-1].weight.copy())

    def normalized(self) -> np.ndarray:
        zero = np.flatnonzero(np.linalg.norm(self.weights, axis=1) == 0)
        if zero.size:
            raise AnalysisError(f"template of class {int(zero[0])} has zero norm")
        return normalize_rows(self.weights)


def extract_representations(net: Network, dataset: Dataset, split: str = "train") -> RepresentationSet:
    if len(net.layers) < 2:
        raise ShapeError("single-layer network has no penultimate layer")
    x, y = dataset.split(split)
    return RepresentationSet(net.penultimate(x), y.copy(), split)


def template_distances(templates: TemplateSet) -> np.ndarray:
    """Pairwise Euclidean distances between unit-normalized templates."""
    w = templates.normalized()
    diff = w[:, None, :] - w[None, :, :]
    d = np.sqrt((diff ** 2).sum(-1))
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def mean_offdiag(d: np.ndarray) -> float:
    return float(d[~np.eye(len(d), dtype=bool)].mean())


def avg_dist_to_template(reps: RepresentationSet, templates: TemplateSet, a: int, b: int) -> float:
    """ADT: mean distance from normalized template ``a`` to class ``b``'s normalized representations."""
    w = templates.normalized()[a]
    x = normalize_rows(reps.of_class(b))
    return float(np.linalg.norm(x - w, axis=1).mean())


def avg_dist_to_centroid(reps: RepresentationSet, a: int, b: int) -> float:
    """ADC: mean distance from class ``a``'s centroid to class ``b``'s samples (all normalized)."""
    centroid = normalize_rows(reps.of_class(a)).mean(axis=0)
    x = normalize_rows(reps.of_class(b))
    return float(np.linalg.norm(x - centroid, axis=1).mean())


@dataclass(frozen=True)
class Projection:
    origin: np.ndarray
    basis: np.ndarray  # (2, hidden), orthonormal rows
    class_ids: tuple
    template_uv: np.ndarray  # (3, 2)
    sample_uv: np.ndarray  # (n, 2)
    sample_labels: np.ndarray
    residuals: np.ndarray  # distance of each sample from the plane

    def project(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.origin) @ self.basis.T


def template_plane(templates: TemplateSet, class_ids: Sequence[int], rtol: float = 1e-10):
    """(origin, orthonormal basis) of the plane through three template points."""
    if len(set(class_ids)) != 3:
        raise AnalysisError(f"need three distinct classes, got {list(class_ids)}")
    a, b, c = (templates.weights[i] for i in class_ids)
    u = b - a
    if np.linalg.norm(u) == 0:
        raise AnalysisError("templates are degenerate: two coincide")
    u = u / np.linalg.norm(u)
    v = (c - a) - ((c - a) @ u) * u
    scale = max(np.linalg.norm(b - a), np.linalg.norm(c - a))
    if np.linalg.norm(v) <= rtol * scale:
        raise AnalysisError("templates are collinear; no unique plane")
    return a, np.stack([u, v / np.linalg.norm(v)])


def project_template_plane(reps: RepresentationSet, templates: TemplateSet, class_ids: Sequence[int]) -> Projection:
    """Orthogonal projection of the three classes' samples and templates onto the template plane."""
    origin, basis = template_plane(templates, class_ids)
    mask = np.isin(reps.labels, list(class_ids))
    pts = reps.vectors[mask]
    uv = (pts - origin) @ basis.T
    residual = np.linalg.norm((pts - origin) - uv @ basis, axis=1)
    t_uv = (templates.weights[list(class_ids)] - origin) @ basis.T
    return Projection(origin, basis, tuple(class_ids), t_uv, uv, reps.labels[mask], residual)


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_analysis(net: Network, dataset: Dataset, out_dir, method: str, class_ids: Optional[Sequence[int]] = None,
                   comment: Optional[str] = None) -> Dict[str, Path]:
    """Emit template_distances / adt / adc / projection_<split> CSVs; returns the written paths.

    Projection files are skipped when fewer than three classes exist.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    head = [f"# {comment}"] if comment else []
    c = dataset.num_classes
    templates = TemplateSet.from_network(net)
    written = {}

    d = template_distances(templates)
    rows = head + ["pair,method,distance"]
    rows += [f"{a}-{b},{method},{_fmt(d[a, b])}" for a in range(c) for b in range(c) if a != b]
    rows.append(f"average,{method},{_fmt(mean_offdiag(d))}")
    written["template_distances"] = out_dir / "template_distances.csv"
    written["template_distances"].write_text("\n".join(rows) + "\n")

    train = extract_representations(net, dataset, "train")
    for name, fn in (("adt", lambda a, b: avg_dist_to_template(train, templates, a, b)),
                     ("adc", lambda a, b: avg_dist_to_centroid(train, a, b))):
        rows = head + ["from_class,to_class,value"]
        rows += [f"{a},{b},{_fmt(fn(a, b))}" for a in range(c) for b in range(c)]
        written[name] = out_dir / f"{name}.csv"
        written[name].write_text("\n".join(rows) + "\n")

    if c < 3:
        return written
    ids = tuple(class_ids) if class_ids is not None else (0, 1, 2)
    for split in ("train", "test"):
        reps = extract_representations(net, dataset, split)
        proj = project_template_plane(reps, templates, ids)
        rows = head + ["kind,class,u,v"]
        rows += [f"template,{k},{_fmt(u)},{_fmt(v)}" for k, (u, v) in zip(ids, proj.template_uv)]
        rows += [f"sample,{k},{_fmt(u)},{_fmt(v)}" for k, (u, v) in zip(proj.sample_labels, proj.sample_uv)]
        written[f"projection_{split}"] = out_dir / f"projection_{split}.csv"
        written[f"projection_{split}"].write_text("\n".join(rows) + "\n")
    return written
