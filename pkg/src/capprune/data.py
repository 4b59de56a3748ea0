"""Dataset loading, the standard-normal synthetic source and seeded splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ShapeError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10
RAW_MAGIC = b"CPDS"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sIIIIIB")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images ``N x C x H x W`` (float32) with optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        if images.ndim != 4 or images.shape[0] < 1:
            raise ShapeError(f"dataset images must be N x C x H x W with N >= 1, got {images.shape}")
        object.__setattr__(self, "images", images)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (images.shape[0],):
                raise ShapeError("labels must have one entry per image")
            if labels.size and labels.min() < 0:
                raise ShapeError("labels must be non-negative")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index: np.ndarray) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], None if self.labels is None else self.labels[index])


def load_cifar10(path: str | Path) -> Dataset:
    data = Path(path).read_bytes()
    if not data or len(data) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(data)} is not a positive multiple of {CIFAR_RECORD}-byte records")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise FormatError(f"{path}: record {bad} has label {labels[bad]} >= {CIFAR_CLASSES}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels)


def load_raw(path: str | Path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _RAW_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, c, h, w, has_labels = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {RAW_MAGIC!r}")
    if version != RAW_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if has_labels not in (0, 1) or min(n, c, h, w) < 1:
        raise FormatError(f"{path}: header mismatch (N={n}, C={c}, H={h}, W={w}, has_labels={has_labels})")
    count = n * c * h * w
    expected = _RAW_HEADER.size + 4 * count + (4 * n if has_labels else 0)
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes from header, found {len(data)}")
    offset = _RAW_HEADER.size
    images = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(n, c, h, w)
    labels = None
    if has_labels:
        labels = np.frombuffer(data, dtype="<u4", count=n, offset=offset + 4 * count).astype(np.int64)
    return Dataset(images.astype(np.float32), labels)


def save_raw(dataset: Dataset, path: str | Path) -> None:
    n, c, h, w = dataset.images.shape
    has = dataset.labels is not None
    parts = [
        _RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, n, c, h, w, int(has)),
        dataset.images.astype("<f4").tobytes(),
    ]
    if has:
        parts.append(dataset.labels.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path: str | Path, format: str) -> Dataset:
    """Load ``cifar10`` (binary batches) or ``raw`` (CPDS) files."""
    if format in ("cifar10", "cifar10-binary"):
        return load_cifar10(path)
    if format in ("raw", "raw-tensor"):
        return load_raw(path)
    raise ValueError(f"unknown dataset format {format!r}")


def synth_normal(n: int, shape: Sequence[int], seed: int) -> Dataset:
    """Unlabeled i.i.d. standard-normal images from a seeded generator."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((n, *shape), dtype=np.float64).astype(np.float32)
    return Dataset(images)


def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    """Seeded permutation followed by a contiguous partition.

    Every split but the last takes ``floor(fraction * N)`` examples; the last
    takes the remainder.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    n = len(dataset)
    sizes = [int(np.floor(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if min(sizes) < 1:
        raise ValueError(f"split of {n} examples by {fractions} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0] + sizes)
    return [dataset.subset(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
