"""Compensation-aware channel selection and baseline selectors.

The objective of a retained set ``S`` is the reconstruction loss left after
optimal compensation::

    loss(S) = sum_k w_k' Sigma_CC w_k - w_k' Sigma_CS Sigma_SS^-1 Sigma_SC w_k

Greedy selection grows ``S`` one channel at a time. The fast path keeps the
inverse Cholesky factor ``L_S^-1`` of ``Sigma_SS`` and extends it by one row
per flattened input row, so evaluating a candidate costs a matrix-vector
product instead of a fresh factorization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .compensation import Selection, factor_subset
from .errors import NotPositiveDefiniteError, ShapeError
from .statistics import LayerStatistics
from .tensor import cholesky

SINGULAR_RTOL = 1e-10
DEGENERATE_RTOL = 1e-8


def retained_count(sigma: float, n_channels: int) -> int:
    """``max(1, floor((1 - sigma) * n_channels))``, robust to float round-off."""
    if not 0.0 <= sigma < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sigma}")
    return max(1, int(math.floor((1.0 - sigma) * n_channels + 1e-9)))


def _flat(w: np.ndarray, stats: LayerStatistics) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    if w.ndim != 2 or w.shape[0] != stats.dim:
        raise ShapeError(f"flattened weights {w.shape} do not match statistics dimension {stats.dim}")
    return w


def _channels(sel) -> list[int]:
    return list(getattr(sel, "retained", sel))


def total_energy(w: np.ndarray, stats: LayerStatistics) -> float:
    """``loss`` of the empty selection: ``sum_k w_k' Sigma w_k``."""
    w = _flat(w, stats)
    return float(np.sum(w * (stats.sigma @ w)))


def reconstruction_loss(w: np.ndarray, stats: LayerStatistics, sel, *, ridge: bool = False) -> float:
    """Post-compensation reconstruction loss of retaining ``sel``.

    ``sel`` is a :class:`Selection` or any channel sequence (possibly empty).
    Raises :class:`NotPositiveDefiniteError` when ``Sigma_SS`` is singular,
    unless ``ridge`` allows the jittered retry used by compensation.
    """
    w = _flat(w, stats)
    total = total_energy(w, stats)
    channels = _channels(sel)
    if not channels:
        return max(total, 0.0)
    rows = stats.rows(channels)
    block = stats.sigma[np.ix_(rows, rows)]
    lower = factor_subset(block) if ridge else cholesky(block)
    z = solve_triangular(lower, stats.sigma[rows] @ w, lower=True)
    return max(total - float(np.sum(z * z)), 0.0)


@dataclass(eq=False)
class CholeskyState:
    """Inverse Cholesky factor of ``Sigma`` restricted to ``row_map``.

    ``cross`` is ``W' Sigma`` (``N x dim``), fixed for a layer; ``proj`` holds
    ``W' Sigma[:, row_map] (L_S^-1)'`` so that ``loss(S) = total - ||proj||^2``.
    """

    l_inv: np.ndarray
    row_map: list[int]
    proj: np.ndarray
    cross: np.ndarray = field(repr=False)

    @classmethod
    def empty(cls, stats: LayerStatistics, w: np.ndarray) -> "CholeskyState":
        w = _flat(w, stats)
        cross = w.T @ stats.sigma
        return cls(np.zeros((0, 0)), [], np.zeros((w.shape[1], 0)), cross)

    @property
    def size(self) -> int:
        return len(self.row_map)

    def explained(self) -> float:
        return float(np.sum(self.proj * self.proj))

    def copy(self) -> "CholeskyState":
        return CholeskyState(self.l_inv, list(self.row_map), self.proj, self.cross)


def _extend_row(state: CholeskyState, sigma: np.ndarray, i: int) -> CholeskyState | None:
    s_ii = sigma[i, i]
    m = state.size
    if m:
        u = state.l_inv @ sigma[state.row_map, i]
        radicand = s_ii - float(u @ u)
    else:
        u = np.zeros(0)
        radicand = s_ii
    if not s_ii > 0 or radicand <= SINGULAR_RTOL * s_ii:
        return None
    a = 1.0 / math.sqrt(radicand)
    r = -a * (u @ state.l_inv)
    l_inv = np.zeros((m + 1, m + 1))
    l_inv[:m, :m] = state.l_inv
    l_inv[m, :m] = r
    l_inv[m, m] = a
    col = state.cross[:, state.row_map] @ r + a * state.cross[:, i]
    proj = np.concatenate([state.proj, col[:, None]], axis=1)
    return CholeskyState(l_inv, state.row_map + [int(i)], proj, state.cross)


def extend_inverse(state: CholeskyState, stats: LayerStatistics, rows) -> CholeskyState | None:
    """Append ``rows`` one at a time; ``None`` signals a singular extension.

    The input state is left untouched, so a rejected candidate needs no
    explicit rollback.
    """
    for i in np.atleast_1d(rows):
        state = _extend_row(state, stats.sigma, int(i))
        if state is None:
            return None
    return state


def greedy_gain(state: CholeskyState, stats: LayerStatistics, channel: int) -> float:
    """Exact loss decrease from adding ``channel``; ``-inf`` when singular."""
    rows = stats.channel_rows(channel)
    if set(rows.tolist()) & set(state.row_map):
        raise ValueError(f"channel {channel} is already selected")
    grown = extend_inverse(state, stats, rows)
    if grown is None:
        return -math.inf
    new = grown.proj[:, state.size :]
    return float(np.sum(new * new))


def _row_gains(state: CholeskyState, sigma: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Vectorized single-row gains for all candidate rows at once."""
    s_cc = sigma[cand, cand]
    cross_c = state.cross[:, cand]
    if state.size:
        u = state.l_inv @ sigma[np.ix_(state.row_map, cand)]
        radicand = s_cc - np.sum(u * u, axis=0)
        cross_c = cross_c - state.proj @ u
    else:
        radicand = s_cc.copy()
    ok = (s_cc > 0) & (radicand > SINGULAR_RTOL * s_cc)
    gains = np.full(cand.shape[0], -np.inf)
    gains[ok] = np.sum(cross_c[:, ok] ** 2, axis=0) / radicand[ok]
    return gains


def admissible_channels(stats: LayerStatistics) -> np.ndarray:
    """Channels whose variance is not negligible next to the largest one."""
    var = stats.channel_variance()
    top = var.max(initial=0.0)
    if not top > 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(var >= DEGENERATE_RTOL * top)


@dataclass(frozen=True)
class GreedyTrace:
    order: tuple[int, ...]
    losses: tuple[float, ...]
    total: float


def cap_greedy(stats: LayerStatistics, w: np.ndarray, n: int) -> GreedyTrace:
    """Pick up to ``n`` channels greedily, recording the pick order and losses."""
    w = _flat(w, stats)
    state = CholeskyState.empty(stats, w)
    total = total_energy(w, stats)
    candidates = admissible_channels(stats)
    if candidates.size == 0:
        raise NotPositiveDefiniteError("every channel has near-zero variance; nothing can be selected")
    order, losses = [], []
    while len(order) < n and candidates.size:
        if stats.rows_per_channel == 1:
            gains = _row_gains(state, stats.sigma, candidates)
        else:
            gains = np.array([greedy_gain(state, stats, int(c)) for c in candidates])
        best = int(np.argmax(gains))
        if not np.isfinite(gains[best]):
            break
        pick = int(candidates[best])
        state = extend_inverse(state, stats, stats.channel_rows(pick))
        order.append(pick)
        losses.append(max(total - state.explained(), 0.0))
        candidates = np.delete(candidates, best)
    if not order:
        raise NotPositiveDefiniteError("no channel could be admitted to the selection")
    return GreedyTrace(tuple(order), tuple(losses), total)


def cap_select(stats: LayerStatistics, w: np.ndarray, sigma: float) -> Selection:
    """Compensation-aware greedy selection at sparsity ``sigma``."""
    n = retained_count(sigma, stats.n_channels)
    trace = cap_greedy(stats, w, n)
    return Selection.of(trace.order, stats.n_channels, stats.rows_per_channel, trace.losses[-1])


def l2_scores(w: np.ndarray, n_channels: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.sum((w * w).reshape(n_channels, -1), axis=1)


def baseline_select(
    method: str, w: np.ndarray, sigma: float, *, n_channels: int | None = None, seed: int = 0
) -> Selection:
    """``l2`` keeps the largest-norm channels; ``random`` a seeded uniform sample.

    ``w`` is the ``(C*k*k) x N`` flattened weight. Random selections are
    nested in ``sigma`` for a fixed seed.
    """
    w = np.asarray(w, dtype=np.float64)
    if n_channels is None:
        n_channels = w.shape[0]
    if w.shape[0] % n_channels:
        raise ShapeError(f"{w.shape[0]} rows do not split into {n_channels} channels")
    k2 = w.shape[0] // n_channels
    n = retained_count(sigma, n_channels)
    if method == "l2":
        ranking = np.argsort(-l2_scores(w, n_channels), kind="stable")
    elif method == "random":
        ranking = np.random.default_rng(seed).permutation(n_channels)
    else:
        raise ValueError(f"unknown baseline selector {method!r}")
    return Selection.of(ranking[:n], n_channels, k2)
