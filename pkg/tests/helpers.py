"""Small model builders shared by the tests."""
from __future__ import annotations

import numpy as np

from capprune.network import Activation, BatchNorm, Conv2d, Dense, Flatten, GlobalAvgPool, MaxPool, Model


def bn(rng, c):
    return BatchNorm(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c), rng.normal(0, 0.2, c), rng.uniform(0.5, 2.0, c))


def small_model(seed=0, act="relu", bias=True, pool=True):
    """conv(3->4) bn act [pool] conv(4->6) bn act gap flatten dense(6->5)."""
    rng = np.random.default_rng(seed)
    layers = [
        Conv2d(rng.normal(0, 0.4, (4, 3, 3, 3)), rng.normal(0, 0.1, 4) if bias else None, 1, 1),
        bn(rng, 4),
        Activation(act),
    ]
    if pool:
        layers.append(MaxPool(2, 2))
    layers += [
        Conv2d(rng.normal(0, 0.4, (6, 4, 3, 3)), rng.normal(0, 0.1, 6) if bias else None, 1, 1),
        bn(rng, 6),
        Activation(act),
        GlobalAvgPool(),
        Flatten(),
        Dense(rng.normal(0, 0.5, (5, 6)), rng.normal(0, 0.1, 5)),
    ]
    return Model(tuple(layers), (3, 6, 6))


def mlp(seed=0, dims=(6, 8, 5)):
    rng = np.random.default_rng(seed)
    layers = [
        Flatten(),
        Dense(rng.normal(0, 0.5, (dims[1], dims[0])), rng.normal(0, 0.1, dims[1])),
        bn(rng, dims[1]),
        Activation("sigmoid"),
        Dense(rng.normal(0, 0.5, (dims[2], dims[1])), None),
    ]
    return Model(tuple(layers), (dims[0], 1, 1))


def stats_from_samples(x, weights=None, rows_per_channel=1):
    """LayerStatistics from an explicit ``M x dim`` sample matrix."""
    from capprune.statistics import StatsAccumulator

    x = np.asarray(x, dtype=np.float64)
    w = np.ones(x.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    acc = StatsAccumulator(x.shape[1], rows_per_channel)
    acc.add(x.T, w)
    return acc.finalize()


def weighted_loss(x, weights, w, b, rows, w_hat, b_hat):
    """Weighted empirical reconstruction loss of a compensated layer."""
    y = x @ w + b
    y_hat = x[:, rows] @ w_hat + b_hat
    return float(np.sum(weights[:, None] * (y - y_hat) ** 2) / np.sum(weights))
