"""Synthetic models and data with known redundancy.

:func:`duplicate_channel_model` builds a small VGG-style chain in which every
convolution emits each distinct filter twice (same weights, same batch-norm
parameters), so half of every pruned layer's input channels can be removed
without changing the network function. It backs the end-to-end tests and the
``capprune fixture`` command.
"""
from __future__ import annotations

import numpy as np

from .data import Dataset
from .network import Activation, BatchNorm, Conv2d, Dense, Flatten, GlobalAvgPool, Model, layer_forward, predict


def _duplicated_conv(rng, x: np.ndarray, c_out: int, k: int, in_scale: np.ndarray | None):
    """Conv + BN whose ``c_out`` channels are ``c_out/2`` distinct ones, each twice.

    BN running statistics are calibrated on ``x`` so every channel leaves the
    block roughly standardized; copies share identical parameters.
    """
    c_in = x.shape[1]
    half = c_out // 2
    base = rng.standard_normal((half, c_in, k, k)) / np.sqrt(c_in * k * k)
    if in_scale is not None:
        base = base * in_scale[None, :, None, None]
    gamma = rng.uniform(0.8, 1.2, half)
    beta = rng.uniform(-0.2, 0.3, half)
    y = layer_forward(Conv2d(base, None, 1, k // 2), x)
    mean, var = y.mean(axis=(0, 2, 3)), y.var(axis=(0, 2, 3))
    # interleave copies at random positions so duplicates are not adjacent
    src = rng.permutation(np.repeat(np.arange(half), 2))
    conv = Conv2d(base[src], None, 1, k // 2)
    bn = BatchNorm(gamma[src], beta[src], mean[src], var[src], 1e-5)
    return conv, bn, src


def duplicate_channel_model(
    seed: int = 0,
    channels: tuple[int, ...] = (8, 16, 16),
    in_channels: int = 3,
    size: int = 8,
    classes: int = 10,
    decay: float = 0.02,
    calibration: int = 512,
) -> Model:
    """Three conv/BN/ReLU blocks with 50% duplicated channels, pooled into a classifier.

    Each consumer scales the weights it applies to one distinct upstream
    channel (both copies) by ``decay``; the other distinct channels get
    scales in [0.5, 1]. This weak channel gives the search a small but
    non-zero cost just past the lossless 50% sparsity. Batch-norm statistics
    and the classifier are calibrated on ``calibration`` images from
    :func:`fixture_images` so that predictions spread over the classes.
    """
    rng = np.random.default_rng(seed)
    x = fixture_images(calibration, (in_channels, size, size), seed + 1).astype(np.float64)
    layers = []
    src = None
    for c_out in channels:
        scale = None
        if src is not None:
            distinct = rng.uniform(0.5, 1.0, src.max() + 1)
            distinct[rng.integers(distinct.size)] = decay
            scale = distinct[src]
        conv, bn, src = _duplicated_conv(rng, x, c_out, 3, scale)
        block = [conv, bn, Activation("relu")]
        for layer in block:
            x = layer_forward(layer, x)
        layers += block
    feats = x.mean(axis=(2, 3))
    mean, std = feats.mean(axis=0), feats.std(axis=0) + 1e-6
    head = rng.standard_normal((classes, feats.shape[1])) / std
    layers += [GlobalAvgPool(), Flatten(), Dense(head, -head @ mean)]
    return Model(tuple(layers), (in_channels, size, size))


def fixture_images(n: int, shape: tuple[int, int, int], seed: int) -> np.ndarray:
    """Smooth non-negative images in [0, 1]: uniform noise blurred by a 3x3 box."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    raw = rng.random((n, c, h + 2, w + 2))
    blurred = sum(raw[:, :, i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0
    return blurred.astype(np.float32)


def labeled_by_model(model: Model, images: np.ndarray) -> Dataset:
    """Dataset labeled with the model's own top-1 predictions."""
    return Dataset(images, predict(model, images))
