"""Closed-form weight and bias recovery after removing input channels."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NotPositiveDefiniteError, ShapeError
from .statistics import LayerStatistics
from .tensor import cho_solve, cholesky

log = logging.getLogger(__name__)

RIDGE = 1e-10


@dataclass(frozen=True)
class Selection:
    """Retained input channels of one layer.

    ``loss`` is filled in by selectors that track the reconstruction loss of
    the selection they return.
    """

    retained: tuple[int, ...]
    all_channels: int
    rows_per_channel: int = 1
    loss: float | None = None

    def __post_init__(self):
        retained = tuple(int(c) for c in self.retained)
        object.__setattr__(self, "retained", retained)
        if not retained:
            raise ValueError("a selection must retain at least one channel")
        if any(b <= a for a, b in zip(retained, retained[1:])):
            raise ValueError(f"retained channels must be strictly increasing: {retained}")
        if retained[0] < 0 or retained[-1] >= self.all_channels:
            raise ValueError(f"retained channels must lie in [0, {self.all_channels})")

    @classmethod
    def of(cls, channels: Sequence[int], all_channels: int, rows_per_channel: int = 1, loss: float | None = None):
        return cls(tuple(sorted(int(c) for c in channels)), all_channels, rows_per_channel, loss)

    @classmethod
    def full(cls, all_channels: int, rows_per_channel: int = 1) -> "Selection":
        return cls(tuple(range(all_channels)), all_channels, rows_per_channel)

    @property
    def sparsity(self) -> float:
        return 1.0 - len(self.retained) / self.all_channels

    @property
    def is_full(self) -> bool:
        return len(self.retained) == self.all_channels

    def rows(self) -> np.ndarray:
        k2 = self.rows_per_channel
        ch = np.asarray(self.retained, dtype=np.int64)
        return (ch[:, None] * k2 + np.arange(k2)[None, :]).reshape(-1)


@dataclass(frozen=True, eq=False)
class CompensationResult:
    w_hat: np.ndarray
    b_hat: np.ndarray


def factor_subset(sigma_ss: np.ndarray) -> np.ndarray:
    """Cholesky factor of a covariance block, retried once with a tiny ridge."""
    try:
        return cholesky(sigma_ss)
    except NotPositiveDefiniteError:
        ridge = RIDGE * max(float(np.max(np.diag(sigma_ss), initial=0.0)), 0.0)
        if ridge <= 0:
            raise
        log.debug("covariance block not positive definite; retrying with ridge %.3g", ridge)
        return cholesky(sigma_ss + ridge * np.eye(sigma_ss.shape[0]))


def _check(w: np.ndarray, stats: LayerStatistics, sel: Selection) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != stats.dim:
        raise ShapeError(f"flattened weights {w.shape} do not match statistics dimension {stats.dim}")
    if sel.all_channels != stats.n_channels or sel.rows_per_channel != stats.rows_per_channel:
        raise ShapeError(
            f"selection over {sel.all_channels}x{sel.rows_per_channel} rows does not match statistics "
            f"over {stats.n_channels}x{stats.rows_per_channel}"
        )
    return w


def compensate(w: np.ndarray, b: np.ndarray | None, stats: LayerStatistics, sel: Selection) -> CompensationResult:
    """Refit the retained rows of ``w`` and a bias to reproduce the original output.

    ``w`` is the ``dim x N`` flattened weight matrix and ``b`` the ``N`` bias
    (``None`` for bias-free layers). Returns ``w_hat`` with one row block per
    retained channel, in retained order.
    """
    w = _check(w, stats, sel)
    n_out = w.shape[1]
    b = np.zeros(n_out) if b is None else np.asarray(b, dtype=np.float64).reshape(n_out)
    rows = sel.rows()
    lower = factor_subset(stats.sigma[np.ix_(rows, rows)])
    w_hat = cho_solve(lower, stats.sigma[rows] @ w)
    b_hat = stats.mu @ w + b - stats.mu[rows] @ w_hat
    if not (np.all(np.isfinite(w_hat)) and np.all(np.isfinite(b_hat))):
        raise NotPositiveDefiniteError("compensation produced non-finite weights")
    return CompensationResult(w_hat, b_hat)
