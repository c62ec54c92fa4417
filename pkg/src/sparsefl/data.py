"""Datasets: IDX (MNIST-format) files, synthetic Gaussian blobs, client partitions."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# Half the distance between any two class means, in units of the blob std.
SYNTH_MARGIN_SIGMAS = 3.0


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ConfigError(
                f"{self.samples.shape[0]} samples but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes)


PathLike = Union[str, Path]


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path: PathLike) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) < count:
        raise FormatError(f"{path}: truncated IDX body ({len(body)} of {count} bytes)")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair. Pixels are scaled to [0, 1] and flattened."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    samples = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(samples, labels.astype(np.int64), num_classes)


def write_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike,
              image_shape: tuple[int, int] | None = None) -> None:
    """Write ``dataset`` as an IDX pair; pixel values are rescaled to bytes 0..255.

    Only datasets whose values are multiples of 1/255 in [0, 1] round-trip exactly.
    """
    n, d = dataset.samples.shape
    if image_shape is None:
        side = int(round(np.sqrt(d)))
        image_shape = (side, side) if side * side == d else (1, d)
    if image_shape[0] * image_shape[1] != d:
        raise ConfigError(f"image_shape {image_shape} does not match feature dim {d}")
    pixels = np.rint(dataset.samples * 255.0)
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise ConfigError("sample values must lie in [0, 1] to be stored as IDX bytes")
    header = struct.pack(">IIII", IMAGES_MAGIC, n, *image_shape)
    Path(images_path).write_bytes(header + pixels.astype(np.uint8).tobytes())
    if dataset.labels.max(initial=0) > 255:
        raise ConfigError("IDX labels must fit in one byte")
    Path(labels_path).write_bytes(
        struct.pack(">II", LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    )


def synth_dataset(num_classes: int, per_class: int, feature_dim: int, seed: int,
                  sigma: float = 1.0, sample_seed: int | None = None) -> Dataset:
    """Isotropic Gaussian blobs, one per class.

    Class means are placed so every pair is at least ``2 * 3 * sigma`` apart,
    i.e. each class sits three standard deviations from every separating
    hyperplane. Means depend on ``seed`` only; ``sample_seed`` (default
    ``seed``) drives the noise and ordering, so a held-out split of the same
    blobs is ``synth_dataset(..., seed, sample_seed=other)``.
    """
    if min(num_classes, per_class, feature_dim) <= 0 or sigma <= 0:
        raise ConfigError("synth_dataset arguments must all be positive")
    rng = np.random.default_rng(seed)
    spacing = 2.0 * SYNTH_MARGIN_SIGMAS * sigma
    if feature_dim >= num_classes:
        q, _ = np.linalg.qr(rng.standard_normal((feature_dim, num_classes)))
        means = q.T * (spacing / np.sqrt(2.0))
    else:
        means = rng.standard_normal((num_classes, feature_dim))
        if num_classes > 1:
            diff = means[:, None, :] - means[None, :, :]
            dist = np.sqrt((diff**2).sum(-1))
            dmin = dist[~np.eye(num_classes, dtype=bool)].min()
            means *= spacing / dmin
    if sample_seed is not None:
        rng = np.random.default_rng([seed, sample_seed])
    labels = np.repeat(np.arange(num_classes), per_class)
    samples = means[labels] + sigma * rng.standard_normal((labels.size, feature_dim))
    perm = rng.permutation(labels.size)
    return Dataset(samples[perm], labels[perm], num_classes)


@dataclass
class PartitionSpec:
    assignment: list[np.ndarray]
    labels_per_client: Union[int, str]

    @property
    def num_clients(self) -> int:
        return len(self.assignment)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignment]


def parse_mode(mode: Union[str, int]) -> Union[int, str]:
    """``"iid"`` stays as is; ``"noniid(4)"``, ``"noniid-4"`` or ``4`` become ``4``."""
    if isinstance(mode, (int, np.integer)):
        return int(mode)
    text = str(mode).strip().lower()
    if text == "iid":
        return "iid"
    for prefix in ("noniid", "non-iid"):
        if text.startswith(prefix):
            digits = text[len(prefix):].strip("()-_ ")
            if digits.isdigit():
                return int(digits)
    raise ConfigError(f"unknown partition mode {mode!r}")


def partition(dataset: Dataset, num_clients: int, mode: Union[str, int], seed: int,
              shard_size: int | None = None) -> PartitionSpec:
    """Split sample indices across ``num_clients`` clients.

    IID shuffles and deals equal slices. Non-IID-n gives each client exactly
    ``n`` label classes: labels are permuted, client ``c`` takes the ``n``
    consecutive labels starting at ``c * n`` (cyclically), and each label's
    label-sorted samples are cut into one shard per client holding it.
    ``shard_size`` optionally caps the number of samples per shard.
    """
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    mode = parse_mode(mode)
    rng = np.random.default_rng(seed)

    if mode == "iid":
        if len(dataset) < num_clients:
            raise ConfigError(f"{len(dataset)} samples cannot cover {num_clients} clients")
        perm = rng.permutation(len(dataset))
        parts = [np.sort(p) for p in np.array_split(perm, num_clients)]
        if shard_size is not None:
            parts = [p[:shard_size] for p in parts]
        return PartitionSpec(parts, "iid")

    n = int(mode)
    c = dataset.num_classes
    if not 1 <= n <= c:
        raise ConfigError(f"noniid({n}) infeasible for {c}-class data")
    label_order = rng.permutation(c)
    holders: dict[int, list[int]] = {int(l): [] for l in label_order}
    for client in range(num_clients):
        for j in range(n):
            holders[int(label_order[(client * n + j) % c])].append(client)

    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for label, clients in holders.items():
        if not clients:
            continue
        idx = np.flatnonzero(dataset.labels == label)
        if idx.size < len(clients):
            raise ConfigError(
                f"noniid({n}) with {num_clients} clients needs {len(clients)} shards of label "
                f"{label}, only {idx.size} samples available"
            )
        idx = rng.permutation(idx)
        for client, shard in zip(clients, np.array_split(idx, len(clients))):
            parts[client].append(shard[:shard_size] if shard_size is not None else shard)
    client_perm = rng.permutation(num_clients)
    assignment = [np.sort(np.concatenate(parts[int(k)])) for k in client_perm]
    return PartitionSpec(assignment, n)
