"""Layered float64 tensors and a small MLP classifier with manual backprop.

Parameters of an ``[d0, d1, ..., dn]`` network are stored as the flat layer
sequence ``[W1, b1, W2, b2, ...]`` with ``W`` of shape ``(d_in, d_out)``.
Every weight matrix and every bias vector counts as its own layer for the
purposes of per-layer sparsification.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ConformabilityError


class LayeredTensor:
    """An ordered list of dense float64 arrays with fixed shapes."""

    __slots__ = ("layers",)

    def __init__(self, layers: Iterable[np.ndarray]):
        self.layers = [np.asarray(a, dtype=np.float64) for a in layers]

    @classmethod
    def zeros(cls, shapes: Sequence[Sequence[int]]) -> "LayeredTensor":
        return cls(np.zeros(tuple(s)) for s in shapes)

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes: Sequence[Sequence[int]]) -> "LayeredTensor":
        flat = np.asarray(flat, dtype=np.float64)
        sizes = [int(np.prod(s)) for s in shapes]
        if flat.size != sum(sizes):
            raise ConformabilityError(f"flat vector has {flat.size} elements, shapes need {sum(sizes)}")
        out, pos = [], 0
        for shape, n in zip(shapes, sizes):
            out.append(flat[pos : pos + n].reshape(tuple(shape)).copy())
            pos += n
        return cls(out)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.layers]

    @property
    def sizes(self) -> list[int]:
        return [a.size for a in self.layers]

    @property
    def total_len(self) -> int:
        return sum(a.size for a in self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.layers[i]

    def flatten(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.layers])

    def copy(self) -> "LayeredTensor":
        return LayeredTensor(a.copy() for a in self.layers)

    def zeros_like(self) -> "LayeredTensor":
        return LayeredTensor(np.zeros_like(a) for a in self.layers)

    def conformable(self, other: "LayeredTensor") -> bool:
        return self.shapes == other.shapes

    def check_conformable(self, other: "LayeredTensor") -> None:
        if not self.conformable(other):
            raise ConformabilityError(f"shape mismatch: {self.shapes} vs {other.shapes}")

    def __add__(self, other: "LayeredTensor") -> "LayeredTensor":
        self.check_conformable(other)
        return LayeredTensor(a + b for a, b in zip(self.layers, other.layers))

    def __sub__(self, other: "LayeredTensor") -> "LayeredTensor":
        self.check_conformable(other)
        return LayeredTensor(a - b for a, b in zip(self.layers, other.layers))

    def __mul__(self, c: float) -> "LayeredTensor":
        return LayeredTensor(a * c for a in self.layers)

    __rmul__ = __mul__

    def __truediv__(self, c: float) -> "LayeredTensor":
        return LayeredTensor(a / c for a in self.layers)

    def equals(self, other: "LayeredTensor") -> bool:
        """Exact elementwise equality (same shapes, same values)."""
        return self.conformable(other) and all(
            np.array_equal(a, b) for a, b in zip(self.layers, other.layers)
        )

    def max_abs_diff(self, other: "LayeredTensor") -> float:
        self.check_conformable(other)
        if not self.layers:
            return 0.0
        return max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(self.layers, other.layers))

    def __repr__(self) -> str:
        return f"LayeredTensor(shapes={self.shapes})"


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise ConfigError("batch inputs must be a non-empty 2-D matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ConfigError("batch needs exactly one label per input row")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def layer_dims_of(model: LayeredTensor) -> list[int]:
    weights = model.layers[0::2]
    return [weights[0].shape[0]] + [w.shape[1] for w in weights]


def init_model(layer_dims: Sequence[int], seed: int) -> LayeredTensor:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    dims = list(layer_dims)
    if len(dims) < 2 or any(int(d) <= 0 for d in dims):
        raise ConfigError(f"layer_dims must have >= 2 positive entries, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        layers.append(np.zeros(fan_out))
    return LayeredTensor(layers)


def _check_model(model: LayeredTensor) -> None:
    if len(model) < 2 or len(model) % 2:
        raise ConformabilityError("model must alternate weight matrices and bias vectors")
    for w, b in zip(model.layers[0::2], model.layers[1::2]):
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ConformabilityError(f"bad layer pair shapes {w.shape}, {b.shape}")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(model: LayeredTensor, inputs: np.ndarray) -> np.ndarray:
    _check_model(model)
    if inputs.shape[1] != model[0].shape[0]:
        raise ConformabilityError(f"input dim {inputs.shape[1]} != model input dim {model[0].shape[0]}")
    h = inputs
    n_pairs = len(model) // 2
    for i in range(n_pairs):
        h = h @ model[2 * i] + model[2 * i + 1]
        if i < n_pairs - 1:
            h = np.maximum(h, 0.0)
    return h


def forward_loss_grad(model: LayeredTensor, batch: Batch) -> tuple[float, LayeredTensor]:
    """Mean softmax cross-entropy over ``batch`` and its exact gradient."""
    _check_model(model)
    x, y = batch.inputs, batch.labels
    if x.shape[1] != model[0].shape[0]:
        raise ConformabilityError(f"input dim {x.shape[1]} != model input dim {model[0].shape[0]}")
    n_out = model[-1].shape[0]
    if np.any(y < 0) or np.any(y >= n_out):
        raise ConformabilityError(f"labels must lie in [0, {n_out})")

    n_pairs = len(model) // 2
    acts = [x]
    pre = []
    h = x
    for i in range(n_pairs):
        z = h @ model[2 * i] + model[2 * i + 1]
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n_pairs - 1 else z
        acts.append(h)

    logp = _log_softmax(acts[-1])
    n = x.shape[0]
    rows = np.arange(n)
    loss = float(-logp[rows, y].mean())

    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta /= n
    grads: list[np.ndarray] = [None] * len(model)  # type: ignore[list-item]
    for i in reversed(range(n_pairs)):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model[2 * i].T) * (pre[i - 1] > 0)
    return loss, LayeredTensor(grads)


def evaluate(model: LayeredTensor, inputs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Return ``(accuracy, mean cross-entropy)`` on a labelled set."""
    z = logits(model, inputs)
    logp = _log_softmax(z)
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    acc = float(np.mean(z.argmax(axis=1) == labels))
    return acc, loss


def apply_update(model: LayeredTensor, update: LayeredTensor, step: float) -> LayeredTensor:
    model.check_conformable(update)
    return LayeredTensor(w - step * u for w, u in zip(model.layers, update.layers))
