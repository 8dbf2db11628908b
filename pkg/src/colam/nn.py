"""Small deterministic multilayer perceptron with manual backprop.

Everything runs in float64. Hidden layers use ReLU; the last layer emits raw
logits. Batches are processed sequentially in a fixed order, so identical
seeds and inputs give bitwise-identical parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

LOG_CLAMP = 1e-12
CHECKPOINT_MAGIC = b"CLNN"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, layer: int, which: str):
        super().__init__(f"non-finite gradient in layer {layer} ({which})")
        self.layer = layer
        self.which = which


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weight.shape


@dataclass
class Network:
    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise ShapeError(f"layer {i}: bias shape {layer.bias.shape} does not match weight {layer.weight.shape}")
            if i > 0 and self.layers[i - 1].weight.shape[0] != layer.weight.shape[1]:
                raise ShapeError(
                    f"layer {i} expects {layer.weight.shape[1]} inputs, previous layer emits "
                    f"{self.layers[i - 1].weight.shape[0]}"
                )

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "Network":
        """He-initialised MLP with layer widths ``sizes`` (input first, classes last)."""
        if len(sizes) < 2:
            raise ShapeError("sizes must contain at least input and output widths")
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
            layers.append(Layer(w, np.zeros(fan_out)))
        return cls(layers)

    @property
    def sizes(self) -> List[int]:
        return [self.layers[0].weight.shape[1]] + [l.weight.shape[0] for l in self.layers]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self) -> List[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]``; the arrays are live views."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Network":
        return Network([Layer(l.weight.copy(), l.bias.copy()) for l in self.layers])

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.parameters())

    def forward(self, x: np.ndarray, cache: bool = False):
        """Logits for a (B, d) input. With ``cache=True`` also returns layer inputs."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.layers[0].weight.shape[1]:
            raise ShapeError(f"input shape {h.shape} incompatible with input width {self.sizes[0]}")
        inputs = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            inputs.append(h)
            h = h @ layer.weight.T + layer.bias
            if i < last:
                h = np.maximum(h, 0.0)
        return (h, inputs) if cache else h

    def penultimate(self, x: np.ndarray) -> np.ndarray:
        """Activations that feed the final linear layer."""
        if len(self.layers) < 2:
            raise ShapeError("single-layer network has no penultimate layer")
        _, inputs = self.forward(x, cache=True)
        return inputs[-1]

    def backward(self, inputs: List[np.ndarray], dlogits: np.ndarray) -> List[np.ndarray]:
        """Gradients ``[dW0, db0, ...]`` given the cached layer inputs and dL/dlogits."""
        grads: List[Optional[np.ndarray]] = [None] * (2 * len(self.layers))
        delta = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            grads[2 * i] = delta.T @ inputs[i]
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                # inputs[i] is the ReLU output of layer i-1; zero where inactive
                delta = (delta @ layer.weight) * (inputs[i] > 0)
        return grads


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_network(cls, net: Network, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {weight_decay}")
        return cls(lr, momentum, weight_decay, [np.zeros_like(p) for p in net.parameters()])


@dataclass
class Batch:
    x: np.ndarray  # (B, d)
    y: np.ndarray  # (B, C), rows are distributions

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ShapeError(f"batch shapes x={self.x.shape} y={self.y.shape} do not align")
        if len(self.x) == 0:
            raise ValueError("empty batch")
        if (self.y < 0).any() or np.abs(self.y.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("target rows must be probability vectors")

    def __len__(self):
        return len(self.x)


def _check_temperature(T: float):
    if not np.isfinite(T) or T <= 0:
        raise ValueError(f"temperature must be positive and finite, got {T}")


def softmax_tempered(z, T: float = 1.0) -> np.ndarray:
    """Normalized softmax of ``z / T`` along the last axis."""
    _check_temperature(T)
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("logits must be finite")
    u = z / T
    u = u - u.max(axis=-1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_tempered(z, T: float = 1.0) -> np.ndarray:
    _check_temperature(T)
    u = np.asarray(z, dtype=np.float64) / T
    u = u - u.max(axis=-1, keepdims=True)
    return u - np.log(np.exp(u).sum(axis=-1, keepdims=True))


def cross_entropy_soft(y, p) -> float:
    """-sum_j y_j log p_j with p clamped below at 1e-12."""
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"target shape {y.shape} != prediction shape {p.shape}")
    return float(-(y * np.log(np.maximum(p, LOG_CLAMP))).sum())


def entropy(p) -> np.ndarray:
    """Shannon entropy along the last axis, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=-1)


def tempered_loss(net: Network, batch: Batch, T: float, confidence_beta: float = 0.0, return_logits: bool = False):
    """Mean tempered cross entropy over the batch and its parameter gradients.

    With ``confidence_beta > 0`` the term ``-beta * H(softmax(z / T))`` is
    added per sample (the confidence-penalty baseline). No T**2 rescaling.
    """
    _check_temperature(T)
    if batch.y.shape[1] != net.num_classes:
        raise ShapeError(f"targets have {batch.y.shape[1]} classes, network emits {net.num_classes}")
    logits, inputs = net.forward(batch.x, cache=True)
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    n = len(batch)
    p = softmax_tempered(logits, T)
    live = p >= LOG_CLAMP
    y_eff = np.where(live, batch.y, 0.0)
    per_sample = -(y_eff * np.log(np.where(live, p, 1.0))).sum(axis=1) - (
        (batch.y * ~live).sum(axis=1) * np.log(LOG_CLAMP)
    )
    # clamped entries contribute a constant, hence nothing to the gradient
    dlogits = (p * y_eff.sum(axis=1, keepdims=True) - y_eff) / T
    if confidence_beta:
        logp = log_softmax_tempered(logits, T)
        h = -(p * logp).sum(axis=1)
        per_sample = per_sample - confidence_beta * h
        dlogits = dlogits + confidence_beta * p * (logp + h[:, None]) / T
    grads = net.backward(inputs, dlogits / n)
    if return_logits:
        return float(per_sample.mean()), grads, logits
    return float(per_sample.mean()), grads


def sgd_step(net: Network, grads: Sequence[np.ndarray], opt: OptimizerState) -> None:
    """In-place momentum SGD: g' = g + wd*p; v = mu*v + g'; p -= lr*v."""
    params = net.parameters()
    if len(grads) != len(params):
        raise ShapeError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(i // 2, "weight" if i % 2 == 0 else "bias")
    for p, g, v in zip(params, grads, opt.velocity):
        if opt.weight_decay:
            g = g + opt.weight_decay * p
        v *= opt.momentum
        v += g
        p -= opt.lr * v


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: Tuple[int, int]  # (parameter array, flat position)
    tolerance: float
    num_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(net: Network, batch: Batch, T: float = 1.0, step: float = 1e-5, tolerance: float = 1e-4,
               grads: Optional[Sequence[np.ndarray]] = None, floor: float = 1e-6,
               max_params: int = 5000) -> GradCheckReport:
    """Compare backprop (or the supplied ``grads``) against central differences.

    Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
    gradients that are zero up to round-off from dominating the report.
    """
    if len(batch) == 0:
        raise ValueError("grad_check needs a nonempty batch")
    if net.num_parameters() > max_params:
        raise ValueError(f"network has {net.num_parameters()} parameters, limit is {max_params}")
    if grads is None:
        _, grads = tempered_loss(net, batch, T)
    probe = net.copy()
    worst, worst_idx, count = 0.0, (0, 0), 0
    for k, p in enumerate(probe.parameters()):
        flat = p.reshape(-1)
        g = np.asarray(grads[k]).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up, _ = tempered_loss(probe, batch, T)
            flat[j] = orig - step
            down, _ = tempered_loss(probe, batch, T)
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            err = abs(g[j] - numeric) / max(abs(g[j]), abs(numeric), floor)
            if err > worst:
                worst, worst_idx = err, (k, j)
            count += 1
    return GradCheckReport(worst, worst_idx, tolerance, count)


def save_params(path, net: Network, meta: Optional[dict] = None) -> None:
    """Write the little-endian ``CLNN`` checkpoint, plus ``<path>.json`` if ``meta`` is given."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(net.layers)))
        for layer in net.layers:
            f.write(struct.pack("<II", *layer.weight.shape))
        for layer in net.layers:
            f.write(layer.weight.astype("<f8").tobytes())
            f.write(layer.bias.astype("<f8").tobytes())
    if meta is not None:
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_params(path) -> Network:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dims = [struct.unpack_from("<II", data, 12 + 8 * i) for i in range(n_layers)]
    offset = 12 + 8 * n_layers
    layers = []
    for out_dim, in_dim in dims:
        nw, nb = out_dim * in_dim * 8, out_dim * 8
        if offset + nw + nb > len(data):
            raise ValueError(f"{path}: truncated at byte {offset}")
        w = np.frombuffer(data, "<f8", out_dim * in_dim, offset).reshape(out_dim, in_dim).astype(np.float64)
        b = np.frombuffer(data, "<f8", out_dim, offset + nw).astype(np.float64)
        layers.append(Layer(w, b))
        offset += nw + nb
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return Network(layers)
