import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capprune.compensation import Selection, compensate
from capprune.errors import NotPositiveDefiniteError, ShapeError
from helpers import stats_from_samples, weighted_loss
from oracles import wls_compensation


def instance(seed, c=8, n=4, m=512, k2=1):
    rng = np.random.default_rng(seed)
    mix = rng.standard_normal((c * k2, c * k2)) * 0.5 + np.eye(c * k2)
    x = rng.standard_normal((m, c * k2)) @ mix + rng.normal(0, 1, c * k2)
    weights = rng.uniform(0.05, 1.0, m)
    w = rng.standard_normal((c * k2, n))
    b = rng.standard_normal(n)
    return x, weights, w, b


class TestSelection:
    def test_sparsity(self):
        assert Selection((0, 2), 8).sparsity == 0.75

    def test_invalid(self):
        with pytest.raises(ValueError):
            Selection((), 3)
        with pytest.raises(ValueError):
            Selection((1, 1), 3)
        with pytest.raises(ValueError):
            Selection((0, 3), 3)

    def test_rows(self):
        np.testing.assert_array_equal(Selection((1, 3), 4, 2).rows(), [2, 3, 6, 7])


class TestCompensate:
    def test_full_selection_identity(self):
        x, weights, w, b = instance(0)
        res = compensate(w, b, stats_from_samples(x, weights), Selection.full(8))
        np.testing.assert_allclose(res.w_hat, w, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(res.b_hat, b, rtol=1e-6, atol=1e-9)

    def test_duplicate_channel(self):
        rng = np.random.default_rng(1)
        base = rng.standard_normal((200, 2))
        x = np.column_stack([base[:, 0], base[:, 1], base[:, 0]])
        w = rng.standard_normal((3, 5))
        b = rng.standard_normal(5)
        res = compensate(w, b, stats_from_samples(x), Selection((0, 1), 3))
        np.testing.assert_allclose(res.w_hat[0], w[0] + w[2], atol=1e-9)
        np.testing.assert_allclose(res.w_hat[1], w[1], atol=1e-9)
        loss = weighted_loss(x, np.ones(200), w, b, [0, 1], res.w_hat, res.b_hat)
        assert loss <= 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_wls_oracle(self, seed):
        x, weights, w, b = instance(seed)
        rng = np.random.default_rng(seed + 100)
        keep = np.sort(rng.choice(8, size=5, replace=False))
        res = compensate(w, b, stats_from_samples(x, weights), Selection(tuple(keep), 8))
        w_ref, b_ref = wls_compensation(x, x @ w + b, weights, keep)
        np.testing.assert_allclose(res.w_hat, w_ref, rtol=1e-9, atol=1e-10)
        np.testing.assert_allclose(res.b_hat, b_ref, rtol=1e-9, atol=1e-10)

    def test_block_rows(self):
        x, weights, w, b = instance(3, c=4, k2=4, m=400)
        sel = Selection((0, 2), 4, 4)
        res = compensate(w, b, stats_from_samples(x, weights, 4), sel)
        w_ref, b_ref = wls_compensation(x, x @ w + b, weights, sel.rows())
        np.testing.assert_allclose(res.w_hat, w_ref, rtol=1e-8, atol=1e-9)
        np.testing.assert_allclose(res.b_hat, b_ref, rtol=1e-8, atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 100_000), scale=st.floats(1e-3, 1e3))
    def test_weight_scaling_invariance(self, seed, scale):
        x, weights, w, b = instance(seed, c=6, m=200)
        sel = Selection((0, 2, 3), 6)
        a = compensate(w, b, stats_from_samples(x, weights), sel)
        c = compensate(w, b, stats_from_samples(x, weights * scale), sel)
        np.testing.assert_allclose(c.w_hat, a.w_hat, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(c.b_hat, a.b_hat, rtol=1e-10, atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_local_minimum_and_mean_match(self, seed):
        x, weights, w, b = instance(seed, c=6, m=300)
        sel = Selection((1, 4, 5), 6)
        rows = list(sel.rows())
        res = compensate(w, b, stats_from_samples(x, weights), sel)
        best = weighted_loss(x, weights, w, b, rows, res.w_hat, res.b_hat)
        rng = np.random.default_rng(seed)
        for _ in range(5):
            dw = rng.normal(0, 1e-3, res.w_hat.shape)
            db = rng.normal(0, 1e-3, res.b_hat.shape)
            assert best <= weighted_loss(x, weights, w, b, rows, res.w_hat + dw, res.b_hat + db) + 1e-12
        assert best <= weighted_loss(x, weights, w, b, rows, w[rows], b) + 1e-12
        y = x @ w + b
        y_hat = x[:, rows] @ res.w_hat + res.b_hat
        np.testing.assert_allclose(weights @ y_hat / weights.sum(), weights @ y / weights.sum(), atol=1e-8)

    def test_bias_free(self):
        x, weights, w, _ = instance(4)
        res = compensate(w, None, stats_from_samples(x, weights), Selection((0, 1, 2), 8))
        w_ref, b_ref = wls_compensation(x, x @ w, weights, [0, 1, 2])
        np.testing.assert_allclose(res.b_hat, b_ref, rtol=1e-9, atol=1e-10)

    def test_singular(self):
        x = np.column_stack([np.ones(20), np.ones(20)])
        with pytest.raises(NotPositiveDefiniteError):
            compensate(np.ones((2, 1)), None, stats_from_samples(x), Selection((0, 1), 2))

    def test_shape_mismatch(self):
        x, weights, w, b = instance(0)
        with pytest.raises(ShapeError):
            compensate(w[:5], b, stats_from_samples(x, weights), Selection((0,), 8))
