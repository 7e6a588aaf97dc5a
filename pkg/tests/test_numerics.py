import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamctc.numerics import (
    BatchNormStats,
    EmptyReceptionFieldError,
    NonFiniteError,
    batch_norm,
    batch_norm_backward,
    batch_norm_forward,
    check_gradient,
    conv1d,
    conv1d_backward,
    conv1d_forward,
    ensure_finite,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_backward,
    layer_norm_forward,
    log_softmax,
    log_softmax_backward,
    masked_softmax,
    masked_softmax_backward,
)


class TestMaskedSoftmax:
    def test_uniform_on_equal_logits(self):
        mask = np.ones((1, 4), dtype=bool)
        out = masked_softmax(np.zeros((1, 4)), mask)
        np.testing.assert_allclose(out, 0.25)

    def test_masked_entries_exactly_zero(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(6, 6))
        mask = rng.random((6, 6)) < 0.5
        mask[:, 0] = True  # keep every row satisfiable
        out = masked_softmax(logits, mask)
        assert np.all(out[~mask] == 0.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_head_axis_broadcast(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(3, 5, 5))
        mask = np.tril(np.ones((5, 5), dtype=bool))
        out = masked_softmax(logits, mask)
        assert out.shape == (3, 5, 5)
        for h in range(3):
            np.testing.assert_allclose(
                out[h], masked_softmax(logits[h], mask), atol=0
            )

    def test_extreme_logits_stay_finite(self):
        logits = np.array([[1e4, -1e4, 0.0]])
        out = masked_softmax(logits, np.ones((1, 3), dtype=bool))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(), 1.0)

    def test_empty_row_raises(self):
        mask = np.ones((2, 3), dtype=bool)
        mask[1] = False
        with pytest.raises(EmptyReceptionFieldError):
            masked_softmax(np.zeros((2, 3)), mask)

    def test_nonfinite_logits_raise(self):
        with pytest.raises(NonFiniteError):
            masked_softmax(np.array([[np.nan, 0.0]]), np.ones((1, 2), dtype=bool))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(4, 4))
        mask = np.tril(np.ones((4, 4), dtype=bool))
        w = rng.normal(size=(4, 4))

        def op(lg):
            p = masked_softmax(lg, mask)
            return (p * w).sum(), [masked_softmax_backward(w, p)]

        assert check_gradient(op, [logits]) <= 1e-5

    @given(st.integers(1, 6), st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_rows_sum_to_one(self, t, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(t, t)) * 3
        mask = rng.random((t, t)) < 0.6
        mask[np.arange(t), np.arange(t)] = True
        out = masked_softmax(logits, mask)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(out >= 0)


class TestLogSoftmax:
    def test_matches_naive(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 7))
        naive = np.log(np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True))
        np.testing.assert_allclose(log_softmax(x), naive, atol=1e-12)

    def test_exp_sums_to_one_under_shift(self):
        x = np.array([[1000.0, 1000.5, 999.0]])
        lp = log_softmax(x)
        np.testing.assert_allclose(np.exp(lp).sum(), 1.0, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 6))
        w = rng.normal(size=(3, 6))

        def op(v):
            lp = log_softmax(v)
            return (lp * w).sum(), [log_softmax_backward(w, lp)]

        assert check_gradient(op, [x]) <= 1e-5


class TestLayerNorm:
    def test_zero_mean_unit_var(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 16)) * 10 + 3
        y = layer_norm(x, np.ones(16), np.zeros(16))
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_affine_applied(self):
        x = np.array([[1.0, 2.0, 3.0, 4.0]])
        gain = np.array([2.0, 2.0, 2.0, 2.0])
        bias = np.array([1.0, 1.0, 1.0, 1.0])
        y = layer_norm(x, gain, bias)
        base = layer_norm(x, np.ones(4), np.zeros(4))
        np.testing.assert_allclose(y, 2.0 * base + 1.0, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 8))
        gain = rng.normal(size=8)
        bias = rng.normal(size=8)
        w = rng.normal(size=(3, 8))

        def op(xv, gv, bv):
            y, cache = layer_norm_forward(xv, gv, bv)
            dx, dg, db = layer_norm_backward(w, cache)
            return (y * w).sum(), [dx, dg, db]

        assert check_gradient(op, [x, gain, bias]) <= 1e-5


class TestBatchNorm:
    def test_train_normalizes_batch(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(32, 6)) * 4 + 2
        stats = BatchNormStats.fresh(6)
        y = batch_norm(x, np.ones(6), np.zeros(6), stats, "train")
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-4)
        assert stats.initialized

    def test_first_train_step_seeds_running_stats(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(16, 3))
        stats = BatchNormStats.fresh(3)
        batch_norm(x, np.ones(3), np.zeros(3), stats, "train")
        np.testing.assert_allclose(stats.mean, x.mean(axis=0))
        np.testing.assert_allclose(stats.var, x.var(axis=0))

    def test_running_stats_ema(self):
        rng = np.random.default_rng(9)
        stats = BatchNormStats.fresh(2)
        x1 = rng.normal(size=(8, 2))
        batch_norm(x1, np.ones(2), np.zeros(2), stats, "train")
        m0, v0 = stats.mean.copy(), stats.var.copy()
        x2 = rng.normal(size=(8, 2)) + 5
        batch_norm(x2, np.ones(2), np.zeros(2), stats, "train")
        np.testing.assert_allclose(stats.mean, 0.9 * m0 + 0.1 * x2.mean(axis=0))
        np.testing.assert_allclose(stats.var, 0.9 * v0 + 0.1 * x2.var(axis=0))

    def test_infer_uses_running_stats_per_frame(self):
        stats = BatchNormStats(
            mean=np.array([1.0, -1.0]), var=np.array([4.0, 0.25]), initialized=True
        )
        x = np.array([[3.0, 0.0], [1.0, -1.0]])
        y = batch_norm(x, np.ones(2), np.zeros(2), stats, "infer", eps=0.0)
        np.testing.assert_allclose(y, [[1.0, 2.0], [0.0, 0.0]], atol=1e-12)

    def test_infer_without_stats_raises(self):
        stats = BatchNormStats.fresh(2)
        with pytest.raises(ValueError):
            batch_norm(np.zeros((3, 2)), np.ones(2), np.zeros(2), stats, "infer")

    def test_train_gradient(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(6, 4))
        gain = rng.normal(size=4)
        bias = rng.normal(size=4)
        w = rng.normal(size=(6, 4))

        def op(xv, gv, bv):
            y, cache = batch_norm_forward(
                xv, gv, bv, BatchNormStats.fresh(4), "train"
            )
            dx, dg, db = batch_norm_backward(w, cache)
            return (y * w).sum(), [dx, dg, db]

        assert check_gradient(op, [x, gain, bias]) <= 1e-5

    def test_infer_gradient(self):
        rng = np.random.default_rng(11)
        stats = BatchNormStats(
            mean=rng.normal(size=4), var=rng.random(4) + 0.5, initialized=True
        )
        x = rng.normal(size=(5, 4))
        gain = rng.normal(size=4)
        bias = rng.normal(size=4)
        w = rng.normal(size=(5, 4))

        def op(xv, gv, bv):
            y, cache = batch_norm_forward(xv, gv, bv, stats.copy(), "infer")
            dx, dg, db = batch_norm_backward(w, cache)
            return (y * w).sum(), [dx, dg, db]

        assert check_gradient(op, [x, gain, bias]) <= 1e-5


class TestConv1d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(5, 3))
        kernel = np.eye(3)[None]  # K=1
        for mode in ("causal", "symmetric"):
            np.testing.assert_allclose(conv1d(x, kernel, mode), x, atol=0)

    def test_causal_never_sees_future(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(8, 2))
        kernel = rng.normal(size=(4, 2, 2))
        y = conv1d(x, kernel, "causal")
        x2 = x.copy()
        x2[5] += 10.0  # perturb frame 5; outputs before 5 must not move
        y2 = conv1d(x2, kernel, "causal")
        np.testing.assert_array_equal(y[:5], y2[:5])
        assert not np.allclose(y[5:], y2[5:])

    def test_symmetric_centering_odd(self):
        # K=3 moving-average: frame t sees t-1, t, t+1
        x = np.arange(5, dtype=np.float64)[:, None]
        kernel = np.ones((3, 1, 1)) / 3.0
        y = conv1d(x, kernel, "symmetric")[:, 0]
        np.testing.assert_allclose(y[1:4], [1.0, 2.0, 3.0])
        np.testing.assert_allclose(y[0], (0 + 0 + 1) / 3.0)

    def test_symmetric_even_extra_left(self):
        # K=2 with left pad 1, right pad 0: y[t] = k0*x[t-1] + k1*x[t]
        x = np.array([[1.0], [2.0], [3.0]])
        kernel = np.array([[[10.0]], [[1.0]]])
        y = conv1d(x, kernel, "symmetric")[:, 0]
        np.testing.assert_allclose(y, [1.0, 12.0, 23.0])

    def test_kernel_longer_than_input(self):
        x = np.array([[1.0], [1.0]])
        kernel = np.ones((5, 1, 1))
        y = conv1d(x, kernel, "causal")
        assert y.shape == (2, 1)
        np.testing.assert_allclose(y[:, 0], [1.0, 2.0])

    def test_bias(self):
        x = np.zeros((3, 2))
        kernel = np.zeros((1, 2, 4))
        y = conv1d(x, kernel, "causal", bias=np.arange(4.0))
        np.testing.assert_allclose(y, np.tile(np.arange(4.0), (3, 1)))

    @pytest.mark.parametrize("mode", ["causal", "symmetric"])
    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_gradient(self, mode, k):
        rng = np.random.default_rng(k)
        x = rng.normal(size=(6, 3))
        kernel = rng.normal(size=(k, 3, 2))
        bias = rng.normal(size=2)
        w = rng.normal(size=(6, 2))

        def op(xv, kv, bv):
            y, cache = conv1d_forward(xv, kv, mode, bv)
            dx, dk, db = conv1d_backward(w, cache)
            return (y * w).sum(), [dx, dk, db]

        assert check_gradient(op, [x, kernel, bias]) <= 1e-5


class TestGelu:
    def test_reference_values(self):
        # exact erf formulation: gelu(0)=0, gelu(x)-gelu(-x)=x
        np.testing.assert_allclose(gelu(0.0), 0.0, atol=0)
        x = np.linspace(-4, 4, 33)
        np.testing.assert_allclose(gelu(x) - gelu(-x), x, atol=1e-12)
        np.testing.assert_allclose(gelu(1.0), 0.8413447460685429, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=17)
        w = rng.normal(size=17)

        def op(v):
            return (gelu(v) * w).sum(), [gelu_grad(v) * w]

        assert check_gradient(op, [x]) <= 1e-5


class TestCheckGradient:
    def test_catches_wrong_gradient(self):
        def op(v):
            return (v**2).sum(), [3.0 * v]  # wrong on purpose

        err = check_gradient(op, [np.array([1.0, -2.0])])
        assert err > 1e-2

    def test_passes_correct_gradient(self):
        def op(v):
            return (v**3).sum(), [3.0 * v**2]

        assert check_gradient(op, [np.array([0.5, -1.5, 2.0])]) <= 1e-5

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            check_gradient(lambda v: (v.sum(), [np.ones_like(v)]), [np.ones(2)], step=0)


def test_ensure_finite_passthrough_and_raise():
    x = np.ones(3)
    assert ensure_finite(x) is x
    with pytest.raises(NonFiniteError):
        ensure_finite(np.array([1.0, np.inf]))
