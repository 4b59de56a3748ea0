import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capprune.errors import NotPositiveDefiniteError
from capprune.selection import (
    CholeskyState,
    baseline_select,
    cap_greedy,
    cap_select,
    extend_inverse,
    greedy_gain,
    reconstruction_loss,
    retained_count,
    total_energy,
)
from capprune.statistics import LayerStatistics
from capprune.tensor import cholesky, tri_inverse
from oracles import explicit_greedy, explicit_loss, exhaustive_best, random_spd


def make_stats(sigma, k2=1, mu=None):
    sigma = np.asarray(sigma, dtype=np.float64)
    mu = np.zeros(sigma.shape[0]) if mu is None else mu
    return LayerStatistics(mu, sigma, 1.0, 100, k2)


def random_instance(seed, c=8, n=4, k2=1, cond=50.0):
    rng = np.random.default_rng(seed)
    return make_stats(random_spd(rng, c * k2, cond), k2), rng.standard_normal((c * k2, n))


class TestRetainedCount:
    @pytest.mark.parametrize("sigma,c,n", [(0.0, 8, 8), (0.5, 8, 4), (0.8, 10, 2), (0.9, 10, 1), (0.99, 10, 1), (0.7, 10, 3)])
    def test_values(self, sigma, c, n):
        assert retained_count(sigma, c) == n

    def test_range(self):
        with pytest.raises(ValueError):
            retained_count(1.0, 4)


class TestReconstructionLoss:
    def test_full(self):
        stats, w = random_instance(0)
        bound = 1e-8 * np.sum(w * w) * np.linalg.norm(stats.sigma)
        assert reconstruction_loss(w, stats, range(8)) <= bound

    def test_orthogonal_channels(self):
        w = np.random.default_rng(1).standard_normal((5, 3))
        stats = make_stats(np.eye(5))
        for i in range(5):
            keep = [c for c in range(5) if c != i]
            assert reconstruction_loss(w, stats, keep) == pytest.approx(np.sum(w[i] ** 2), rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_explicit_inverse(self, seed):
        stats, w = random_instance(seed, c=6)
        keep = sorted(np.random.default_rng(seed).choice(6, 3, replace=False).tolist())
        ref = explicit_loss(w, stats.sigma, keep)
        assert reconstruction_loss(w, stats, keep) == pytest.approx(ref, rel=1e-9)

    def test_empty_is_total(self):
        stats, w = random_instance(3)
        assert reconstruction_loss(w, stats, []) == pytest.approx(np.trace(w.T @ stats.sigma @ w))

    def test_singular(self):
        sigma = np.ones((2, 2))
        with pytest.raises(NotPositiveDefiniteError):
            reconstruction_loss(np.ones((2, 1)), make_stats(sigma), [0, 1])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_monotone_nested(self, seed):
        stats, w = random_instance(seed, c=7)
        order = np.random.default_rng(seed).permutation(7)
        losses = [reconstruction_loss(w, stats, sorted(order[:j])) for j in range(8)]
        assert losses[0] == pytest.approx(total_energy(w, stats))
        for a, b in zip(losses, losses[1:]):
            assert b <= a + 1e-9 * losses[0]
        assert all(loss >= 0 for loss in losses)


class TestExtendInverse:
    def test_base_case(self):
        stats = make_stats(np.diag([4.0, 9.0]))
        state = extend_inverse(CholeskyState.empty(stats, np.ones((2, 1))), stats, [1])
        np.testing.assert_allclose(state.l_inv, [[1 / 3]])

    def test_identity_stays_identity(self):
        stats = make_stats(np.eye(5))
        state = CholeskyState.empty(stats, np.ones((5, 2)))
        for i in (3, 0, 4):
            state = extend_inverse(state, stats, [i])
            np.testing.assert_array_equal(state.l_inv, np.eye(state.size))

    @pytest.mark.parametrize("seed", range(4))
    def test_direct_factorization(self, seed):
        rng = np.random.default_rng(seed)
        sigma = random_spd(rng, 12, 100.0)
        stats = make_stats(sigma)
        order = rng.permutation(12)
        state = CholeskyState.empty(stats, rng.standard_normal((12, 3)))
        for i in order:
            state = extend_inverse(state, stats, [i])
        ref = tri_inverse(cholesky(sigma[np.ix_(order, order)]))
        assert np.linalg.norm(state.l_inv - ref) / np.linalg.norm(ref) <= 1e-8
        np.testing.assert_allclose(state.l_inv @ cholesky(sigma[np.ix_(order, order)]), np.eye(12), atol=1e-8)

    def test_proj_invariant(self):
        stats, w = random_instance(5, c=6)
        state = CholeskyState.empty(stats, w)
        for i in (4, 1, 2):
            state = extend_inverse(state, stats, [i])
        rows = state.row_map
        np.testing.assert_allclose(state.proj, w.T @ stats.sigma[:, rows] @ state.l_inv.T, atol=1e-10)

    def test_singular_signal(self):
        sigma = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        stats = make_stats(sigma)
        state = extend_inverse(CholeskyState.empty(stats, np.ones((3, 1))), stats, [0])
        assert extend_inverse(state, stats, [1]) is None
        assert extend_inverse(state, stats, [2]) is not None

    def test_block_rollback(self):
        # channel 1's second row duplicates channel 0's first row
        rng = np.random.default_rng(0)
        base = rng.standard_normal((500, 3))
        x = np.column_stack([base[:, 0], base[:, 1], base[:, 2], base[:, 0]])
        sigma = np.cov(x.T, bias=True)
        stats = make_stats(sigma, k2=2)
        state = extend_inverse(CholeskyState.empty(stats, np.ones((4, 1))), stats, stats.channel_rows(0))
        before = state.l_inv.copy()
        assert extend_inverse(state, stats, stats.channel_rows(1)) is None
        np.testing.assert_array_equal(state.l_inv, before)
        assert greedy_gain(state, stats, 1) == -math.inf


class TestGreedyGain:
    def test_identity(self):
        w = np.random.default_rng(2).standard_normal((4, 3))
        stats = make_stats(np.eye(4))
        state = CholeskyState.empty(stats, w)
        for i in range(4):
            assert greedy_gain(state, stats, i) == pytest.approx(np.sum(w[i] ** 2))

    def test_zero_weights(self):
        stats, _ = random_instance(1)
        state = CholeskyState.empty(stats, np.zeros((8, 2)))
        assert all(greedy_gain(state, stats, i) == 0.0 for i in range(8))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 100_000), k2=st.sampled_from([1, 4]))
    def test_loss_difference(self, seed, k2):
        stats, w = random_instance(seed, c=6, k2=k2)
        rng = np.random.default_rng(seed)
        chosen = list(rng.permutation(6)[: rng.integers(0, 5)])
        state = CholeskyState.empty(stats, w)
        for c in chosen:
            state = extend_inverse(state, stats, stats.channel_rows(c))
        base = reconstruction_loss(w, stats, sorted(chosen))
        for c in set(range(6)) - set(chosen):
            gain = greedy_gain(state, stats, c)
            diff = base - reconstruction_loss(w, stats, sorted(chosen + [c]))
            assert gain == pytest.approx(diff, rel=1e-8, abs=1e-8)

    def test_already_selected(self):
        stats, w = random_instance(0)
        state = extend_inverse(CholeskyState.empty(stats, w), stats, [2])
        with pytest.raises(ValueError):
            greedy_gain(state, stats, 2)


class TestCapSelect:
    def test_magnitude_under_identity(self):
        w = np.random.default_rng(3).standard_normal((10, 4))
        stats = make_stats(np.eye(10))
        for sigma in (0.2, 0.5, 0.7):
            n = retained_count(sigma, 10)
            top = np.argsort(-np.sum(w * w, axis=1))[:n]
            assert cap_select(stats, w, sigma).retained == tuple(sorted(top))

    def test_sigma_zero_keeps_non_degenerate(self):
        stats, w = random_instance(4, c=6)
        sigma = stats.sigma.copy()
        sigma[3, :] = sigma[:, 3] = 0.0
        sel = cap_select(make_stats(sigma), w, 0.0)
        assert sel.retained == (0, 1, 2, 4, 5)

    def test_all_degenerate(self):
        with pytest.raises(NotPositiveDefiniteError):
            cap_select(make_stats(np.zeros((3, 3))), np.ones((3, 1)), 0.5)

    def test_duplicates_skipped(self):
        rng = np.random.default_rng(0)
        base = rng.standard_normal((400, 3))
        x = base[:, [0, 1, 0, 2, 1, 2]]
        stats = make_stats(np.cov(x.T, bias=True))
        sel = cap_select(stats, rng.standard_normal((6, 2)), 0.5)
        assert len(sel.retained) == 3 and sel.loss <= 1e-9
        assert sorted({c % 3 for c in [0, 1, 0, 2, 1, 2]}) == sorted({[0, 1, 0, 2, 1, 2][c] for c in sel.retained})

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 100_000), c=st.integers(2, 12), k2=st.sampled_from([1, 4]))
    def test_matches_explicit_greedy(self, seed, c, k2):
        stats, w = random_instance(seed, c=c, k2=k2)
        trace = cap_greedy(stats, w, c)
        assert list(trace.order) == explicit_greedy(w, stats.sigma, c, k2)
        for j in range(c):
            rows = stats.rows(sorted(trace.order[: j + 1]))
            assert trace.losses[j] == pytest.approx(explicit_loss(w, stats.sigma, rows), rel=1e-7, abs=1e-9)

    def test_reported_loss(self):
        stats, w = random_instance(6, c=9)
        sel = cap_select(stats, w, 0.5)
        assert sel.loss == pytest.approx(reconstruction_loss(w, stats, sel), rel=1e-9)

    def test_greedy_near_optimal_small(self):
        stats, w = random_instance(7, c=7)
        best = exhaustive_best(w, stats.sigma, 3)
        sel = cap_select(stats, w, 4 / 7)
        assert sel.loss <= explicit_loss(w, stats.sigma, list(best)) * 1.5 + 1e-12


class TestBaseline:
    def test_l2_dominance(self):
        w = np.full((4, 3), 0.1)
        w[0] = 10.0
        assert baseline_select("l2", w, 0.75).retained == (0,)

    def test_l2_blocks(self):
        w = np.zeros((6, 2))
        w[4:6] = 1.0  # channel 2 of 3 with 2 rows each
        sel = baseline_select("l2", w, 0.6, n_channels=3)
        assert sel.retained == (2,) and sel.rows_per_channel == 2

    def test_random_deterministic_and_nested(self):
        w = np.ones((20, 2))
        a = baseline_select("random", w, 0.5, seed=9)
        assert a == baseline_select("random", w, 0.5, seed=9)
        smaller = baseline_select("random", w, 0.75, seed=9)
        assert set(smaller.retained) <= set(a.retained)

    @pytest.mark.parametrize("sigma", [0.25, 0.5, 0.75])
    def test_l2_equals_cap_under_identity(self, sigma):
        w = np.random.default_rng(8).standard_normal((16, 5))
        stats = make_stats(np.eye(16))
        assert baseline_select("l2", w, sigma).retained == cap_select(stats, w, sigma).retained
