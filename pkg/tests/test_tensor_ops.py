"""Value semantics of the tensor ops: shapes, broadcasting, error contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from latentclass import tensor as T
from latentclass.tensor import Tensor


def t(a, rg=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=rg)


class TestConstruction:
    def test_dtype_default_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="NaN/Inf"):
            Tensor([1.0, np.nan])
        with pytest.raises(ValueError, match="NaN/Inf"):
            Tensor([np.inf])

    def test_float64_shadow_preserved(self):
        x = Tensor(np.ones(3, dtype=np.float64), dtype=np.float64)
        assert x.dtype == np.float64


class TestElementwise:
    def test_add_broadcast(self):
        y = T.add(t(np.ones((2, 3))), t(np.arange(3)))
        assert y.shape == (2, 3)
        np.testing.assert_allclose(y.data, np.ones((2, 3)) + np.arange(3))

    def test_mul_scalar_operand(self):
        y = T.mul(t([1.0, -2.0]), -3.0)
        np.testing.assert_allclose(y.data, [-3.0, 6.0])

    def test_div_values(self):
        y = T.div(t([2.0, 9.0]), t([4.0, 3.0]))
        np.testing.assert_allclose(y.data, [0.5, 3.0])

    def test_power_fractional(self):
        y = T.power(t([4.0, 9.0]), 0.5)
        np.testing.assert_allclose(y.data, [2.0, 3.0])

    def test_exp_log_inverse(self):
        x = t([0.1, 1.0, 2.5])
        np.testing.assert_allclose(T.log(T.exp(x)).data, x.data, rtol=1e-6)

    def test_sqrt_matches_power_half(self):
        x = t([0.25, 4.0])
        np.testing.assert_allclose(T.sqrt(x).data, T.power(x, 0.5).data)

    def test_erf_matches_scipy(self):
        x = np.linspace(-3, 3, 7).astype(np.float32)
        np.testing.assert_allclose(T.erf(t(x)).data, special.erf(x), rtol=1e-6)

    def test_clamp_values_and_bounds_check(self):
        y = T.clamp(t([-2.0, 0.5, 9.0]), 0.0, 1.0)
        np.testing.assert_allclose(y.data, [0.0, 0.5, 1.0])
        with pytest.raises(ValueError):
            T.clamp(t([0.0]), 2.0, 1.0)


class TestReductionsAndShape:
    def test_tsum_axis_keepdims(self):
        x = t(np.arange(6).reshape(2, 3))
        assert float(T.tsum(x).data) == 15.0
        np.testing.assert_allclose(T.tsum(x, axis=0).data, [3, 5, 7])
        assert T.tsum(x, axis=1, keepdims=True).shape == (2, 1)

    def test_tmean_matches_numpy(self):
        x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
        np.testing.assert_allclose(T.tmean(t(x), axis=1).data, x.mean(axis=1),
                                   rtol=1e-6)

    def test_reshape_roundtrip(self):
        x = t(np.arange(12).reshape(3, 4))
        assert T.reshape(x, (2, 6)).shape == (2, 6)
        with pytest.raises(ValueError):
            T.reshape(x, (5, 5))

    def test_concat_values_and_axis(self):
        a, b = t(np.ones((2, 1))), t(np.zeros((2, 2)))
        y = T.concat([a, b], axis=1)
        assert y.shape == (2, 3)
        np.testing.assert_allclose(y.data[:, 0], 1.0)
        np.testing.assert_allclose(y.data[:, 1:], 0.0)

    def test_crop_spatial(self):
        x = t(np.arange(2 * 3 * 4 * 5).reshape(2, 3, 4, 5))
        y = T.crop_spatial(x, 3, 2)
        np.testing.assert_allclose(y.data, x.data[:, :, :3, :2])
        with pytest.raises(ValueError):
            T.crop_spatial(x, 9, 2)


class TestActivations:
    def test_relu(self):
        np.testing.assert_allclose(T.relu(t([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_sigmoid_range_and_symmetry(self):
        x = np.linspace(-20, 20, 11).astype(np.float32)
        s = T.sigmoid(t(x)).data
        # float32 saturates to exactly 0/1 in the far tails; bounds still hold
        assert np.all(s >= 0) and np.all(s <= 1)
        mid = T.sigmoid(t(np.linspace(-8, 8, 9).astype(np.float32))).data
        assert np.all(mid > 0) and np.all(mid < 1)
        np.testing.assert_allclose(s + s[::-1], 1.0, atol=1e-6)

    def test_softmax_rows_sum_to_one_and_shift_stable(self):
        x = np.array([[1e4, 1e4 + 1, 1e4 - 1]], dtype=np.float32)
        p = T.softmax(t(x), axis=-1).data
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-6)

    def test_uniform_softmax_is_uniform(self):
        p = T.softmax(t(np.zeros((2, 5))), axis=-1).data
        np.testing.assert_allclose(p, 0.2, atol=1e-7)


class TestLinearAndNorms:
    def test_linear_matches_matmul(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(6, 5)), rng.normal(size=6)
        y = T.linear(t(x), t(w), t(b))
        np.testing.assert_allclose(y.data, x @ w.T + b, rtol=1e-5)

    def test_layer_norm_zero_mean_unit_var(self):
        x = np.random.default_rng(4).normal(3.0, 5.0, size=(2, 7)).astype(np.float32)
        y = T.layer_norm(t(x)).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)

    def test_batch_norm_train_standardizes(self):
        rng = np.random.default_rng(5)
        x = rng.normal(2.0, 3.0, size=(8, 4, 5, 5)).astype(np.float32)
        st_ = T.BatchNormState(4)
        y = T.batch_norm(t(x), t(np.ones(4)), t(np.zeros(4)), st_, "train")
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
        assert st_.initialized

    def test_batch_norm_running_stats_update(self):
        st_ = T.BatchNormState(1)
        x = np.full((2, 1, 2, 2), 10.0, dtype=np.float32)
        T.batch_norm(t(x), t([1.0]), t([0.0]), st_, "train", momentum=0.5)
        np.testing.assert_allclose(st_.mean, [5.0])

    def test_batch_norm_eval_uses_running_stats(self):
        st_ = T.BatchNormState(1)
        st_.mean[:] = 1.0
        st_.var[:] = 4.0
        st_.initialized = True
        x = np.full((1, 1, 1, 1), 3.0, dtype=np.float32)
        y = T.batch_norm(t(x), t([1.0]), t([0.0]), st_, "eval")
        np.testing.assert_allclose(y.data, (3.0 - 1.0) / np.sqrt(4.0 + 1e-5),
                                   rtol=1e-5)

    def test_batch_norm_rejects_bad_mode(self):
        with pytest.raises(ValueError, match="train|eval"):
            T.batch_norm(t(np.zeros((1, 1, 1, 1))), t([1.0]), t([0.0]),
                         T.BatchNormState(1), "test")


class TestConvAndPooling:
    def test_conv2d_identity_kernel(self):
        x = np.random.default_rng(6).normal(size=(2, 3, 5, 5)).astype(np.float32)
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        y = T.conv2d(t(x), t(w), stride=1, padding=0)
        np.testing.assert_allclose(y.data, x, rtol=1e-6)

    def test_conv2d_shape_law(self):
        x = t(np.zeros((1, 2, 9, 11)))
        w = t(np.zeros((4, 2, 5, 5)))
        y = T.conv2d(x, w, stride=2, padding=2)
        assert y.shape == (1, 4, 5, 6)

    def test_conv2d_3d_input(self):
        y = T.conv2d(t(np.zeros((2, 6, 6))), t(np.zeros((5, 2, 3, 3))),
                     stride=1, padding=1)
        assert y.shape == (5, 6, 6)

    def test_conv2d_channel_mismatch_message(self):
        with pytest.raises(ValueError, match="channel"):
            T.conv2d(t(np.zeros((1, 3, 4, 4))), t(np.zeros((2, 5, 3, 3))),
                     stride=1, padding=1)

    def test_conv2d_rejects_even_and_oversize_kernels(self):
        x = t(np.zeros((1, 1, 8, 8)))
        with pytest.raises(ValueError):
            T.conv2d(x, t(np.zeros((1, 1, 4, 4))), stride=1, padding=0)
        with pytest.raises(ValueError):
            T.conv2d(x, t(np.zeros((1, 1, 13, 13))), stride=1, padding=6)

    def test_avg_pool_global(self):
        x = np.random.default_rng(7).normal(size=(2, 3, 4, 4)).astype(np.float32)
        y = T.avg_pool_global(t(x))
        np.testing.assert_allclose(y.data, x.mean(axis=(2, 3)), rtol=1e-6)

    def test_max_pool_global(self):
        x = np.random.default_rng(8).normal(size=(2, 3, 4, 4)).astype(np.float32)
        y = T.max_pool_global(t(x))
        np.testing.assert_allclose(y.data, x.max(axis=(2, 3)), rtol=1e-6)

    def test_avg_pool2d_floor_crop(self):
        x = t(np.ones((1, 1, 5, 7)))
        assert T.avg_pool2d(x, 2).shape == (1, 1, 2, 3)

    def test_upsample_nearest2x(self):
        x = t(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
        y = T.upsample_nearest2x(x)
        assert y.shape == (1, 1, 4, 4)
        want = np.repeat(np.repeat(np.arange(4).reshape(2, 2), 2, axis=0), 2, axis=1)
        np.testing.assert_allclose(y.data[0, 0], want)


class TestBroadcastGrad:
    @settings(max_examples=25, deadline=None)
    @given(rows=st.integers(1, 4), cols=st.integers(1, 4))
    def test_unbroadcast_sums_expanded_axes(self, rows, cols):
        a = Tensor(np.ones((rows, cols)), requires_grad=True)
        b = Tensor(np.ones(cols), requires_grad=True)
        y = T.tsum(T.add(a, b))
        T.backward(y)
        assert b.grad.shape == (cols,)
        np.testing.assert_allclose(b.grad, rows)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(1, 5))
    def test_mul_gradient_is_other_operand(self, n):
        rng = np.random.default_rng(n)
        av, bv = rng.normal(size=n), rng.normal(size=n)
        a, b = Tensor(av, requires_grad=True), Tensor(bv, requires_grad=True)
        T.backward(T.tsum(T.mul(a, b)))
        np.testing.assert_allclose(a.grad, bv.astype(np.float32), rtol=1e-6)
        np.testing.assert_allclose(b.grad, av.astype(np.float32), rtol=1e-6)
