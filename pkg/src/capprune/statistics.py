"""Weighted mean/covariance of a layer's flattened input patches.

Each sampled patch ``x_i`` gets a scalar weight ``w_i``: the mean over output
channels of the squared derivative of the batch-norm + activation that
follows the layer, evaluated at the patch's pre-BN output. Statistics are
normalized by the total weight, which makes the compensation formula the
exact minimizer of the weighted reconstruction objective.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import DeadActivationError, FormatError, ShapeError
from .network import Activation, BatchNorm, Conv2d, Dense, Model, flat_weight, forward, sigmoid
from .tensor import im2col

DEFAULT_PATCHES = 32
DEAD_WEIGHT = 1e-12
CHUNK_IMAGES = 64


@dataclass(frozen=True, eq=False)
class ActivationContext:
    """The batch-norm (optional) and activation applied to a layer's output."""

    act: str = "identity"
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    eps: float = 1e-5

    @classmethod
    def from_batchnorm(cls, bn: BatchNorm | None, act: str) -> "ActivationContext":
        if bn is None:
            return cls(act)
        return cls(act, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps)

    @property
    def has_bn(self) -> bool:
        return self.gamma is not None

    def scale(self) -> np.ndarray | float:
        if not self.has_bn:
            return 1.0
        return np.asarray(self.gamma, np.float64) / np.sqrt(np.asarray(self.running_var, np.float64) + self.eps)

    def normalize(self, y: np.ndarray) -> np.ndarray:
        if not self.has_bn:
            return y
        return (y - np.asarray(self.running_mean, np.float64)) * self.scale() + np.asarray(self.beta, np.float64)

    def apply(self, y: np.ndarray) -> np.ndarray:
        """``g(y)``: batch-norm followed by the activation."""
        z = self.normalize(y)
        return Activation(self.act).apply(z)

    def derivative(self, y: np.ndarray) -> np.ndarray:
        """Per-output-channel ``g'(y)``; ``y`` has output channels on the last axis."""
        y = np.asarray(y, dtype=np.float64)
        z = self.normalize(y)
        scale = self.scale()
        if self.act == "relu":
            return scale * (z > 0)
        if self.act == "sigmoid":
            s = sigmoid(z)
            return scale * s * (1.0 - s)
        return np.broadcast_to(scale, y.shape).astype(np.float64)


def activation_context(model: Model, layer: int) -> ActivationContext:
    """Read the BatchNorm/Activation pair directly following ``layer``."""
    rest = model.layers[layer + 1 :]
    bn = None
    if rest and isinstance(rest[0], BatchNorm):
        bn, rest = rest[0], rest[1:]
    act = rest[0].kind if rest and isinstance(rest[0], Activation) else "identity"
    return ActivationContext.from_batchnorm(bn, act)


def activation_weight(ctx: ActivationContext, y: np.ndarray) -> np.ndarray:
    """Scalar weight per sample: mean over output channels of ``g'(y)**2``.

    ``y`` is ``M x N`` (samples by output channels); returns an ``M``-vector.
    """
    d = ctx.derivative(np.atleast_2d(y))
    return np.mean(d * d, axis=-1)


@dataclass(frozen=True, eq=False)
class LayerStatistics:
    mu: np.ndarray
    sigma: np.ndarray
    weight_sum: float
    sample_count: int
    rows_per_channel: int = 1

    def __post_init__(self):
        if self.sigma.shape != (self.dim, self.dim):
            raise ShapeError(f"sigma shape {self.sigma.shape} does not match mu length {self.dim}")
        if self.dim % self.rows_per_channel:
            raise ShapeError(f"dimension {self.dim} is not a multiple of {self.rows_per_channel} rows per channel")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def n_channels(self) -> int:
        return self.dim // self.rows_per_channel

    def channel_rows(self, channel: int) -> np.ndarray:
        k2 = self.rows_per_channel
        return np.arange(channel * k2, (channel + 1) * k2)

    def rows(self, channels) -> np.ndarray:
        """Flattened row indices of a channel list, in channel order."""
        channels = np.asarray(channels, dtype=np.int64).reshape(-1)
        k2 = self.rows_per_channel
        return (channels[:, None] * k2 + np.arange(k2)[None, :]).reshape(-1)

    def channel_variance(self) -> np.ndarray:
        """Mean diagonal covariance over each channel's rows."""
        return np.diag(self.sigma).reshape(self.n_channels, self.rows_per_channel).mean(axis=1)


@dataclass(eq=False)
class StatsAccumulator:
    """Raw weighted sums; merge in a fixed order, then :meth:`finalize`."""

    dim: int
    rows_per_channel: int = 1
    weight_sum: float = 0.0
    sample_count: int = 0
    sum_x: np.ndarray | None = None
    sum_xx: np.ndarray | None = None

    def __post_init__(self):
        if self.sum_x is None:
            self.sum_x = np.zeros(self.dim)
        if self.sum_xx is None:
            self.sum_xx = np.zeros((self.dim, self.dim))

    def add(self, x: np.ndarray, w: np.ndarray) -> None:
        """Add samples ``x`` (``dim x m``) with weights ``w`` (``m``)."""
        x = np.asarray(x, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        self.weight_sum += float(w.sum())
        self.sample_count += int(w.shape[0])
        self.sum_x += x @ w
        self.sum_xx += (x * w) @ x.T

    def finalize(self) -> LayerStatistics:
        if self.weight_sum < DEAD_WEIGHT:
            raise DeadActivationError(
                f"total activation weight {self.weight_sum:.3g} over {self.sample_count} samples is below {DEAD_WEIGHT}"
            )
        mu = self.sum_x / self.weight_sum
        sigma = self.sum_xx / self.weight_sum - np.outer(mu, mu)
        sigma = 0.5 * (sigma + sigma.T)
        diag = np.einsum("ii->i", sigma)
        np.maximum(diag, 0.0, out=diag)
        return LayerStatistics(mu, sigma, self.weight_sum, self.sample_count, self.rows_per_channel)


def merge_statistics(a: StatsAccumulator, b: StatsAccumulator) -> StatsAccumulator:
    if a.dim != b.dim or a.rows_per_channel != b.rows_per_channel:
        raise ShapeError(f"cannot merge accumulators of dim {a.dim}/{a.rows_per_channel} and {b.dim}/{b.rows_per_channel}")
    return StatsAccumulator(
        a.dim,
        a.rows_per_channel,
        a.weight_sum + b.weight_sum,
        a.sample_count + b.sample_count,
        a.sum_x + b.sum_x,
        a.sum_xx + b.sum_xx,
    )


def layer_samples(
    model: Model, images: np.ndarray, layer: int, patches_per_image: int, rng: np.random.Generator | None
) -> np.ndarray:
    """Flattened input samples (``dim x m``) of ``layer`` for a batch of images.

    Conv2d layers contribute up to ``patches_per_image`` uniformly sampled
    receptive fields per image; Dense layers contribute one sample per image.
    ``rng=None`` takes every position.
    """
    target = model.layers[layer]
    _, captured = forward(model, images, capture=[layer])
    x = captured[layer]
    if isinstance(target, Dense):
        return x.reshape(x.shape[0], -1).T
    cols = im2col(x, target.kernel, target.stride, target.padding)
    per_image = cols.shape[1] // x.shape[0]
    if rng is None or patches_per_image >= per_image:
        return cols
    picks = [
        n * per_image + np.sort(rng.choice(per_image, size=patches_per_image, replace=False))
        for n in range(x.shape[0])
    ]
    return cols[:, np.concatenate(picks)]


def accumulate(
    model: Model,
    images: np.ndarray,
    layer: int,
    patches_per_image: int = DEFAULT_PATCHES,
    rng: np.random.Generator | None = None,
    weighted: bool = True,
) -> StatsAccumulator:
    target = model.layers[layer]
    if not isinstance(target, (Conv2d, Dense)):
        raise ShapeError(f"layer {layer} is {type(target).__name__}; statistics need a Conv2d or Dense layer")
    x = layer_samples(model, images, layer, patches_per_image, rng)
    acc = StatsAccumulator(x.shape[0], target.kernel**2)
    if weighted:
        w_flat = flat_weight(target)
        y = x.T @ w_flat
        if target.bias is not None:
            y += target.bias.astype(np.float64)
        w = activation_weight(activation_context(model, layer), y)
    else:
        w = np.ones(x.shape[1])
    acc.add(x, w)
    return acc


def estimate_statistics(
    model: Model,
    data: Dataset,
    layer: int,
    patches_per_image: int = DEFAULT_PATCHES,
    seed: int = 0,
    *,
    weighted: bool = True,
    workers: int = 1,
) -> LayerStatistics:
    """Estimate the weighted input statistics of ``layer`` from ``data``.

    Images are processed in fixed chunks of ``CHUNK_IMAGES``; chunk ``j``
    samples positions with a generator seeded by ``(seed, j)`` and partial
    sums are merged in chunk order, so the result does not depend on
    ``workers``.
    """
    starts = range(0, len(data), CHUNK_IMAGES)

    def run(job):
        j, start = job
        rng = np.random.default_rng([seed, j])
        return accumulate(model, data.images[start : start + CHUNK_IMAGES], layer, patches_per_image, rng, weighted)

    jobs = list(enumerate(starts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(job) for job in jobs]
    total = parts[0]
    for part in parts[1:]:
        total = merge_statistics(total, part)
    return total.finalize()


# ---------------------------------------------------------------------------
# cache file

MAGIC = b"CPST"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def statistics_to_bytes(stats: LayerStatistics) -> bytes:
    body = np.concatenate(
        [stats.mu, stats.sigma.reshape(-1), [stats.weight_sum, float(stats.sample_count)]]
    ).astype("<f8")
    return _HEADER.pack(MAGIC, VERSION, stats.dim, stats.rows_per_channel) + body.tobytes()


def statistics_from_bytes(data: bytes) -> LayerStatistics:
    if len(data) < _HEADER.size:
        raise FormatError("statistics file truncated before header end")
    magic, version, dim, k2 = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported statistics version {version}")
    count = dim + dim * dim + 2
    if len(data) != _HEADER.size + 8 * count:
        raise FormatError(f"statistics payload has {len(data) - _HEADER.size} bytes, expected {8 * count}")
    if k2 < 1 or dim % k2:
        raise FormatError(f"rows per channel {k2} does not divide dimension {dim}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    mu = body[:dim].copy()
    sigma = body[dim : dim + dim * dim].reshape(dim, dim).copy()
    return LayerStatistics(mu, sigma, float(body[-2]), int(body[-1]), int(k2))


def save_statistics(stats: LayerStatistics, path: str | Path) -> None:
    Path(path).write_bytes(statistics_to_bytes(stats))


def load_statistics(path: str | Path) -> LayerStatistics:
    return statistics_from_bytes(Path(path).read_bytes())
