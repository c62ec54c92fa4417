"""Top-k gradient sparsification: flat, per-layer (time-varying hierarchical), and the wire codec.

Wire format of an encoded update, for each layer in order::

    u32 count                        (big-endian, framing)
    count x (u32 index, f64 value)   (big-endian, 96 bits per entry)

Indices are positions within the flattened layer and strictly increase.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CodecError, ConfigError, ConformabilityError
from .tensor import LayeredTensor

INDEX_BITS = 32
VALUE_BITS = 64
ENTRY_BITS = INDEX_BITS + VALUE_BITS
COUNT_BITS = 32

_ENTRY_DTYPE = np.dtype([("index", ">u4"), ("value", ">f8")])
_MAX_INDEX = 2**32 - 1


@dataclass(frozen=True)
class SparsitySchedule:
    s_0: float
    alpha: float
    s_min: float
    rates: tuple[float, ...]


def schedule_rates(s_0: float, alpha: float, s_min: float, L: int) -> SparsitySchedule:
    """Per-layer rates: the first layer gets ``s_0``, each later layer the
    previous rate times ``alpha``, floored at ``s_min``."""
    if not 0 < s_min <= s_0 <= 1:
        raise ConfigError(f"need 0 < s_min <= s_0 <= 1, got s_0={s_0}, s_min={s_min}")
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    if L < 1:
        raise ConfigError(f"layer count must be >= 1, got {L}")
    rates = [float(s_0)]
    for _ in range(L - 1):
        nxt = rates[-1] * alpha
        rates.append(nxt if nxt > s_min else float(s_min))
    return SparsitySchedule(float(s_0), float(alpha), float(s_min), tuple(rates))


def top_count(n: int, rate: float) -> int:
    """Number of entries kept from ``n`` at ``rate``; never less than one."""
    return max(1, math.floor(n * rate))


def topk_threshold(values, k: int) -> float:
    """The k-th largest absolute value."""
    a = np.abs(np.asarray(values, dtype=np.float64).ravel())
    if not 1 <= k <= a.size:
        raise ConfigError(f"k={k} out of range for {a.size} values")
    return float(np.partition(a, a.size - k)[a.size - k])


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Sorted positions of the ``k`` largest ``|values|``; ties go to the lowest index."""
    a = np.abs(np.asarray(values).ravel())
    if k >= a.size:
        return np.arange(a.size)
    delta = topk_threshold(a, k)
    above = np.flatnonzero(a > delta)
    at = np.flatnonzero(a == delta)[: k - above.size]
    return np.sort(np.concatenate([above, at]))


@dataclass
class SparseUpdate:
    """Per-layer ``(indices, values)`` pairs plus the dense shapes they index into."""

    indices: list[np.ndarray]
    values: list[np.ndarray]
    layer_shapes: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        self.indices = [np.asarray(i, dtype=np.int64).ravel() for i in self.indices]
        self.values = [np.asarray(v, dtype=np.float64).ravel() for v in self.values]
        self.layer_shapes = [tuple(int(d) for d in s) for s in self.layer_shapes]
        if not (len(self.indices) == len(self.values) == len(self.layer_shapes)):
            raise CodecError("indices, values and layer_shapes must have one entry per layer")

    @property
    def counts(self) -> list[int]:
        return [i.size for i in self.indices]

    @property
    def nnz(self) -> int:
        return sum(self.counts)

    @property
    def payload_bits(self) -> int:
        return ENTRY_BITS * self.nnz

    @property
    def framing_bits(self) -> int:
        return COUNT_BITS * len(self.indices)

    def validate(self) -> None:
        for layer, (idx, val, shape) in enumerate(zip(self.indices, self.values, self.layer_shapes)):
            size = math.prod(shape)
            if idx.size != val.size:
                raise CodecError(f"layer {layer}: {idx.size} indices but {val.size} values")
            if idx.size and (idx[0] < 0 or idx[-1] >= size):
                raise CodecError(f"layer {layer}: index out of range for {size} elements")
            if idx.size > 1 and np.any(np.diff(idx) <= 0):
                raise CodecError(f"layer {layer}: indices must be strictly increasing")
            if size - 1 > _MAX_INDEX:
                raise CodecError(f"layer {layer}: {size} elements do not fit 32-bit indices")

    def to_dense(self) -> LayeredTensor:
        layers = []
        for idx, val, shape in zip(self.indices, self.values, self.layer_shapes):
            flat = np.zeros(math.prod(shape))
            flat[idx] = val
            layers.append(flat.reshape(shape))
        return LayeredTensor(layers)

    def equals(self, other: "SparseUpdate") -> bool:
        return (
            self.layer_shapes == other.layer_shapes
            and all(np.array_equal(a, b) for a, b in zip(self.indices, other.indices))
            and all(
                a.tobytes() == b.tobytes() for a, b in zip(self.values, other.values)
            )
        )


def from_mask(tensor: LayeredTensor, masks: Sequence[np.ndarray]) -> SparseUpdate:
    """Take the entries of ``tensor`` at the boolean positions in ``masks``."""
    tensor_idx, tensor_val = [], []
    for layer, m in zip(tensor.layers, masks):
        idx = np.flatnonzero(np.asarray(m).ravel())
        tensor_idx.append(idx)
        tensor_val.append(layer.ravel()[idx])
    return SparseUpdate(tensor_idx, tensor_val, tensor.shapes)


def _split(grad: LayeredTensor, selected: list[np.ndarray]) -> tuple[SparseUpdate, LayeredTensor]:
    values, residual = [], []
    for layer, idx in zip(grad.layers, selected):
        flat = layer.ravel()
        values.append(flat[idx])
        rest = flat.copy()
        rest[idx] = 0.0
        residual.append(rest.reshape(layer.shape))
    return SparseUpdate(selected, values, grad.shapes), LayeredTensor(residual)


def sparsify_layered(grad: LayeredTensor, schedule) -> tuple[SparseUpdate, LayeredTensor]:
    """Per-layer Top-k with layer ``i`` keeping ``max(1, floor(len_i * s_i))`` entries.

    ``schedule`` is a :class:`SparsitySchedule` or a plain sequence of rates.
    """
    rates = schedule.rates if isinstance(schedule, SparsitySchedule) else tuple(schedule)
    if len(rates) != len(grad):
        raise ConfigError(f"schedule has {len(rates)} rates for {len(grad)} layers")
    selected = []
    for layer, rate in zip(grad.layers, rates):
        if layer.size == 0:
            raise ConfigError("every layer needs at least one element")
        selected.append(topk_indices(layer, top_count(layer.size, rate)))
    return _split(grad, selected)


def sparsify_flat(grad: LayeredTensor, s: float) -> tuple[SparseUpdate, LayeredTensor]:
    """Top-k over the whole flattened update, ``k = max(1, floor(total_len * s))``."""
    if not 0 < s <= 1:
        raise ConfigError(f"sparsity rate must lie in (0, 1], got {s}")
    flat_idx = topk_indices(grad.flatten(), top_count(grad.total_len, s))
    selected, offset = [], 0
    for n in grad.sizes:
        lo, hi = np.searchsorted(flat_idx, [offset, offset + n])
        selected.append(flat_idx[lo:hi] - offset)
        offset += n
    return _split(grad, selected)


def encode(sparse: SparseUpdate) -> bytes:
    sparse.validate()
    chunks = []
    for idx, val in zip(sparse.indices, sparse.values):
        entries = np.empty(idx.size, dtype=_ENTRY_DTYPE)
        entries["index"] = idx
        entries["value"] = val
        chunks.append(struct.pack(">I", idx.size))
        chunks.append(entries.tobytes())
    return b"".join(chunks)


def decode(buf: bytes, layer_shapes: Sequence[Sequence[int]]) -> SparseUpdate:
    shapes = [tuple(int(d) for d in s) for s in layer_shapes]
    indices, values, pos = [], [], 0
    for layer in range(len(shapes)):
        if pos + 4 > len(buf):
            raise CodecError(f"truncated buffer at layer {layer} header")
        (count,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        end = pos + count * _ENTRY_DTYPE.itemsize
        if end > len(buf):
            raise CodecError(f"truncated buffer in layer {layer} entries")
        entries = np.frombuffer(buf, dtype=_ENTRY_DTYPE, count=count, offset=pos)
        indices.append(entries["index"].astype(np.int64))
        values.append(entries["value"].astype(np.float64))
        pos = end
    if pos != len(buf):
        raise CodecError(f"{len(buf) - pos} trailing bytes after last layer")
    update = SparseUpdate(indices, values, shapes)
    update.validate()
    return update


@dataclass
class ResidualState:
    residual: LayeredTensor

    @classmethod
    def zeros_like(cls, model: LayeredTensor) -> "ResidualState":
        return cls(model.zeros_like())


def accumulate_residual(state: ResidualState, residual: LayeredTensor) -> ResidualState:
    if not state.residual.conformable(residual):
        raise ConformabilityError(
            f"residual shapes {residual.shapes} do not match state {state.residual.shapes}"
        )
    return ResidualState(state.residual + residual)
