"""Forward/backward primitives against direct-loop oracles and identities."""

import numpy as np
import pytest

from oracles import batchnorm_train_direct, conv_forward_direct
from pixelfill.errors import NumericError
from pixelfill import tensor_ops
from pixelfill.tensor_ops import (
    BatchNormState,
    ConvSpec,
    batchnorm,
    batchnorm_backward,
    conv2d_backward,
    conv2d_forward,
    elu,
    elu_backward,
    leaky_relu,
    leaky_relu_backward,
    same_padding,
    upsample_nearest_x2,
    upsample_nearest_x2_backward,
)


def random_conv_case(rng, dtype=np.float64):
    stride = int(rng.integers(1, 3))
    dilation = int(rng.choice([1, 2, 4, 8, 16]))
    spec = ConvSpec(
        in_channels=int(rng.integers(1, 5)),
        out_channels=int(rng.integers(1, 5)),
        kernel=3,
        stride=stride,
        dilation=dilation,
        padding=same_padding(3, dilation),
    )
    size = int(rng.integers(3, 17))
    x = rng.standard_normal(
        (int(rng.integers(1, 3)), spec.in_channels, size, size)
    ).astype(dtype)
    w = rng.standard_normal(spec.weight_shape()).astype(dtype)
    return x, w, spec


class TestConvForward:
    @pytest.mark.parametrize("case", range(40))
    def test_matches_direct_loop_oracle(self, case):
        rng = np.random.default_rng([21, case])
        x, w, spec = random_conv_case(rng)
        got = conv2d_forward(x, w, spec)
        want = conv_forward_direct(x, w, spec.stride, spec.dilation, spec.padding)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_out_size_formula(self):
        spec = ConvSpec(1, 1, kernel=3, stride=2, dilation=1, padding=1)
        # 7 -> ceil(7/2): positions 0, 2, 4, 6
        assert spec.out_size(7) == 4
        assert spec.out_size(8) == 4
        dil = ConvSpec(1, 1, kernel=3, stride=1, dilation=4, padding=4)
        assert dil.out_size(10) == 10

    def test_output_too_small_raises(self):
        spec = ConvSpec(1, 1, kernel=3, stride=1, dilation=4, padding=0)
        with pytest.raises(ValueError):
            spec.out_size(5)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ConvSpec(1, 1, kernel=4)

    def test_same_padding_preserves_size(self):
        for dilation in (1, 2, 4, 8, 16):
            spec = ConvSpec(
                2, 3, kernel=3, stride=1, dilation=dilation,
                padding=same_padding(3, dilation),
            )
            x = np.zeros((1, 2, 40, 40))
            assert conv2d_forward(x, np.zeros(spec.weight_shape()), spec).shape == (
                1, 3, 40, 40,
            )


class TestConvBackward:
    @pytest.mark.parametrize("case", range(10))
    def test_adjoint_identity(self, case):
        """<conv(x), y> == <x, conv_backward_input(y)> for linear maps."""
        rng = np.random.default_rng([22, case])
        x, w, spec = random_conv_case(rng)
        out = conv2d_forward(x, w, spec)
        y = rng.standard_normal(out.shape)
        gx, gw = conv2d_backward(x, w, y, spec)
        assert gx.shape == x.shape and gw.shape == w.shape
        lhs = float((out * y).sum())
        rhs = float((x * gx).sum())
        assert lhs == pytest.approx(rhs, rel=1e-10)

    @pytest.mark.parametrize("case", range(10))
    def test_weight_grad_is_forward_in_disguise(self, case):
        """d<conv(x), y>/dw at tap (p, q) equals a correlation of x and y;
        verified against a direct loop."""
        rng = np.random.default_rng([23, case])
        x, w, spec = random_conv_case(rng)
        out = conv2d_forward(x, w, spec)
        y = rng.standard_normal(out.shape)
        _, gw = conv2d_backward(x, w, y, spec)
        basis = np.zeros_like(w)
        o, c, p, q = (
            int(rng.integers(0, s)) for s in w.shape
        )
        basis[o, c, p, q] = 1.0
        directional = float((conv2d_forward(x, basis, spec) * y).sum())
        assert gw[o, c, p, q] == pytest.approx(directional, rel=1e-9, abs=1e-12)


class TestActivations:
    def test_elu_values(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 3.0])
        out = elu(x)
        np.testing.assert_allclose(out[3:], x[3:])
        np.testing.assert_allclose(out[:2], np.expm1(x[:2]))
        assert out[2] == 0.0

    def test_elu_monotonic_and_bounded_below(self, rng):
        x = np.sort(rng.standard_normal(100) * 3)
        out = elu(x)
        assert (np.diff(out) >= 0).all()
        assert (out > -1.0).all()

    def test_elu_backward_chain(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        g = rng.standard_normal(x.shape)
        expected = g * np.where(x >= 0, 1.0, np.exp(x))
        np.testing.assert_allclose(elu_backward(x, g), expected)

    def test_leaky_relu(self, rng):
        x = rng.standard_normal((3, 2, 5, 5))
        out = leaky_relu(x, 0.2)
        np.testing.assert_allclose(out, np.where(x >= 0, x, 0.2 * x))
        g = rng.standard_normal(x.shape)
        np.testing.assert_allclose(
            leaky_relu_backward(x, g, 0.2), g * np.where(x >= 0, 1.0, 0.2)
        )

    def test_finite_check_raises(self, rng, monkeypatch):
        monkeypatch.setattr(tensor_ops, "DEBUG_FINITE_CHECKS", True)
        with pytest.raises(NumericError):
            elu(np.array([np.nan]))


class TestBatchNorm:
    def test_train_matches_direct_loop(self, rng):
        x = rng.standard_normal((3, 4, 5, 5))
        state = BatchNormState.create(4, dtype=np.float64)
        state.gamma = rng.standard_normal(4)
        state.beta = rng.standard_normal(4)
        out, _ = batchnorm(x, state, "train")
        want = batchnorm_train_direct(x, state.gamma, state.beta, state.eps)
        np.testing.assert_allclose(out, want, rtol=1e-12)

    def test_train_output_normalized(self, rng):
        x = rng.standard_normal((4, 3, 8, 8)) * 5 + 2
        state = BatchNormState.create(3, dtype=np.float64)
        out, _ = batchnorm(x, state, "train")
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_running_stats_ema(self, rng):
        x = rng.standard_normal((2, 2, 4, 4))
        state = BatchNormState.create(2, dtype=np.float64)
        batchnorm(x, state, "train")
        np.testing.assert_allclose(
            state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12
        )
        np.testing.assert_allclose(
            state.running_var,
            0.9 * 1.0 + 0.1 * x.var(axis=(0, 2, 3)),
            rtol=1e-12,
        )
        assert state.batches_seen == 1

    def test_eval_uses_running_stats(self, rng):
        x = rng.standard_normal((2, 2, 4, 4))
        state = BatchNormState.create(2, dtype=np.float64)
        batchnorm(x, state, "train")
        y = rng.standard_normal((1, 2, 4, 4))
        out, cache = batchnorm(y, state, "eval")
        assert cache is None
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        want = (y - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        np.testing.assert_allclose(out, want, rtol=1e-12)

    def test_eval_before_any_update_rejected(self):
        state = BatchNormState.create(2)
        with pytest.raises(ValueError, match="running-statistics"):
            batchnorm(np.zeros((1, 2, 4, 4), dtype=np.float32), state, "eval")

    def test_single_value_batch_rejected(self):
        state = BatchNormState.create(2)
        with pytest.raises(ValueError, match="at least 2"):
            batchnorm(np.zeros((1, 2, 1, 1), dtype=np.float32), state, "train")

    def test_backward_reduces_gamma_beta(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        state = BatchNormState.create(3, dtype=np.float64)
        _, cache = batchnorm(x, state, "train")
        g = rng.standard_normal(x.shape)
        gx, ggamma, gbeta = batchnorm_backward(cache, g)
        np.testing.assert_allclose(gbeta, g.sum(axis=(0, 2, 3)))
        assert gx.shape == x.shape and ggamma.shape == (3,)
        # normalization makes the input gradient sum to ~0 per channel
        np.testing.assert_allclose(gx.sum(axis=(0, 2, 3)), 0.0, atol=1e-10)


class TestUpsample:
    def test_forward_replicates_blocks(self):
        x = np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2)
        out = upsample_nearest_x2(x)
        want = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
        np.testing.assert_array_equal(out[0, 0], want)

    def test_backward_is_adjoint(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        y = rng.standard_normal((2, 3, 8, 8))
        lhs = float((upsample_nearest_x2(x) * y).sum())
        rhs = float((x * upsample_nearest_x2_backward(y)).sum())
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_backward_odd_size_rejected(self):
        with pytest.raises(ValueError):
            upsample_nearest_x2_backward(np.zeros((1, 1, 3, 4)))


class TestElementwiseValidation:
    def test_mismatched_shapes_rejected(self):
        a = np.zeros((1, 3, 4, 4))
        b = np.zeros((1, 3, 4, 5))
        with pytest.raises(ValueError):
            tensor_ops.add(a, b)

    def test_channel_broadcast_allowed(self, rng):
        a = rng.standard_normal((2, 3, 4, 4))
        m = rng.standard_normal((2, 1, 4, 4))
        np.testing.assert_allclose(tensor_ops.mul(a, m), a * m)
