"""Autodiff core: values, gradients, shape validation, tape hygiene."""

import numpy as np
import pytest
from conftest import away_from_zero, gradcheck

from mspa import tensor as T
from mspa.tensor import (
    ShapeError,
    Tensor,
    absolute,
    add,
    argmax_channels,
    backward,
    broadcast_map,
    broadcast_vector,
    channel_softmax,
    clamp,
    concat_channels,
    conv2d,
    div,
    exp,
    log,
    maxpool2x2,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    scale,
    sqrt,
    square,
    sub,
    take_channel,
    tape_length,
    upsample_nearest2x,
)


class TestTensorBasics:
    def test_data_is_float32(self):
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float32
        assert t.shape == (3,)
        assert t.size == 3

    def test_item_requires_scalar(self):
        assert Tensor(4.0).item() == pytest.approx(4.0)
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_rank_limit(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_operator_sugar_matches_functions(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        np.testing.assert_array_equal((a + b).data, add(a, b).data)
        np.testing.assert_array_equal((a - b).data, sub(a, b).data)
        np.testing.assert_array_equal((a * b).data, mul(a, b).data)
        np.testing.assert_array_equal((-a).data, scale(a, -1.0).data)
        np.testing.assert_array_equal(a.sum().data, reduce_sum(a).data)
        np.testing.assert_array_equal(a.mean().data, reduce_mean(a).data)

    def test_zero_grad(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        backward(reduce_sum(a))
        assert a.grad is not None
        a.zero_grad()
        assert a.grad is None


class TestElementwise:
    def test_binary_values(self):
        a = Tensor([1.0, 2.0, 3.0])
        b = Tensor([4.0, 5.0, 6.0])
        np.testing.assert_allclose(add(a, b).data, [5, 7, 9])
        np.testing.assert_allclose(sub(a, b).data, [-3, -3, -3])
        np.testing.assert_allclose(mul(a, b).data, [4, 10, 18])
        np.testing.assert_allclose(div(a, b).data, [0.25, 0.4, 0.5])

    def test_scalar_broadcast(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        out = mul(a, 3.0)
        np.testing.assert_allclose(out.data, 3.0 * np.ones((2, 2)))
        backward(reduce_sum(out))
        np.testing.assert_allclose(a.grad, 3.0 * np.ones((2, 2)))

    def test_scalar_operand_grad_is_reduced(self):
        s = Tensor(2.0, requires_grad=True)
        a = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        backward(reduce_sum(mul(a, s)))
        assert s.grad.shape == ()
        assert s.grad == pytest.approx(np.arange(6).sum())

    def test_shape_mismatch_names_axis(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((2, 4)))
        with pytest.raises(ShapeError, match="axis 1"):
            add(a, b)

    def test_binary_gradients(self):
        rng = np.random.default_rng(1)
        for op in (add, sub, mul):
            a = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            b = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            gradcheck(lambda a=a, b=b, op=op: reduce_sum(op(a, b)), [a, b])

    def test_div_gradient(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        b = Tensor(away_from_zero(rng, (4, 4), low=0.5, high=2.0), requires_grad=True)
        gradcheck(lambda: reduce_sum(div(a, b)), [a, b])


class TestGuardedOps:
    def test_log_floors_tiny_values(self):
        out = log(Tensor([1e-20, 1.0]))
        np.testing.assert_allclose(out.data, [np.log(1e-12), 0.0], rtol=1e-6)

    def test_log_grad_is_zero_where_floored(self):
        a = Tensor([1e-20, 2.0], requires_grad=True)
        backward(reduce_sum(log(a)))
        assert a.grad[0] == 0.0
        assert a.grad[1] == pytest.approx(0.5, rel=1e-5)

    def test_exp_clamped(self):
        out = exp(Tensor([200.0]))
        assert np.isfinite(out.data).all()
        assert out.data[0] == pytest.approx(np.exp(80.0), rel=1e-5)

    def test_sqrt_at_zero_has_no_nan_grad(self):
        a = Tensor([0.0, 4.0], requires_grad=True)
        backward(reduce_sum(sqrt(a)))
        assert np.isfinite(a.grad).all()
        assert a.grad[0] == 0.0
        assert a.grad[1] == pytest.approx(0.25, rel=1e-5)

    def test_clamp_values_and_grad(self):
        a = Tensor([-2.0, 0.5, 2.0], requires_grad=True)
        out = clamp(a, -1.0, 1.0)
        np.testing.assert_allclose(out.data, [-1.0, 0.5, 1.0])
        backward(reduce_sum(out))
        np.testing.assert_allclose(a.grad, [0.0, 1.0, 0.0])

    def test_unary_gradients(self):
        rng = np.random.default_rng(3)
        cases = [
            (relu, away_from_zero(rng, (5, 5))),
            (absolute, away_from_zero(rng, (5, 5))),
            (square, rng.standard_normal((5, 5)).astype(np.float32)),
            (exp, rng.uniform(-1, 1, (5, 5)).astype(np.float32)),
            (log, rng.uniform(0.2, 2.0, (5, 5)).astype(np.float32)),
            (sqrt, rng.uniform(0.2, 2.0, (5, 5)).astype(np.float32)),
        ]
        for op, data in cases:
            a = Tensor(data, requires_grad=True)
            gradcheck(lambda a=a, op=op: reduce_sum(op(a)), [a])


class TestReductions:
    def test_reduce_sum_axes(self):
        a = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
        np.testing.assert_allclose(reduce_sum(a).data, np.arange(24).sum())
        np.testing.assert_allclose(reduce_sum(a, axes=(0,)).data, a.data.sum(axis=0))
        np.testing.assert_allclose(reduce_sum(a, axes=(1, 2)).data, a.data.sum(axis=(1, 2)))

    def test_reduce_mean_matches_numpy(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.standard_normal((3, 4)))
        assert reduce_mean(a).data == pytest.approx(a.data.mean(), rel=1e-6)

    def test_bad_axes_rejected(self):
        a = Tensor(np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            reduce_sum(a, axes=(2,))
        with pytest.raises(ShapeError):
            reduce_sum(a, axes=())

    def test_reduction_gradients(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        gradcheck(lambda: reduce_mean(a), [a])
        b = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        gradcheck(lambda: reduce_sum(mul(reduce_sum(b, axes=(1,)), 0.5)), [b])

    def test_argmax_channels_first_wins_ties(self):
        a = Tensor(np.array([[[1.0, 2.0]], [[1.0, 3.0]]]))
        np.testing.assert_array_equal(argmax_channels(a), [[0, 1]])


class TestChannelSoftmax:
    def test_two_class_value(self):
        # softmax of logits (2, -2): 1/(1+e^-4)
        logits = Tensor(np.array([[[2.0]], [[-2.0]]]))
        out = channel_softmax(logits)
        assert out.data[0, 0, 0] == pytest.approx(0.9820137900379085, rel=1e-6)
        assert out.data[1, 0, 0] == pytest.approx(1.0 - 0.9820137900379085, rel=1e-4)

    def test_columns_sum_to_one(self):
        rng = np.random.default_rng(6)
        out = channel_softmax(Tensor(rng.standard_normal((3, 4, 4))))
        np.testing.assert_allclose(out.data.sum(axis=0), np.ones((4, 4)), rtol=1e-5)

    def test_shift_invariance(self):
        # tolerance reflects float32 quantization of logits + 100, not softmax error
        rng = np.random.default_rng(7)
        logits = rng.standard_normal((2, 3, 3)).astype(np.float32)
        a = channel_softmax(Tensor(logits))
        b = channel_softmax(Tensor(logits + 100.0))
        np.testing.assert_allclose(a.data, b.data, atol=2e-5)

    def test_gradient(self):
        rng = np.random.default_rng(8)
        logits = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
        weights = Tensor(rng.standard_normal((2, 3, 3)))
        gradcheck(lambda: reduce_sum(mul(channel_softmax(logits), weights)), [logits])


def brute_conv2d(x, kernel, bias, stride=1, padding=0):
    """Reference cross-correlation via explicit loops."""
    c_out, c_in, kh, kw = kernel.shape
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (x.shape[1] + 2 * padding - kh) // stride + 1
    w_out = (x.shape[2] + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, h_out, w_out), dtype=np.float64)
    for co in range(c_out):
        for oy in range(h_out):
            for ox in range(w_out):
                patch = padded[:, oy * stride : oy * stride + kh, ox * stride : ox * stride + kw]
                out[co, oy, ox] = np.sum(patch * kernel[co]) + bias[co]
    return out


class TestConv2d:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            c_in, c_out = rng.integers(1, 4, size=2)
            k = int(rng.choice([1, 3]))
            pad = int(rng.integers(0, 2))
            h = int(rng.integers(k, 8))
            x = rng.standard_normal((c_in, h, h)).astype(np.float32)
            kern = rng.standard_normal((c_out, c_in, k, k)).astype(np.float32)
            b = rng.standard_normal(c_out).astype(np.float32)
            got = conv2d(Tensor(x), Tensor(kern), Tensor(b), padding=pad)
            want = brute_conv2d(x, kern, b, padding=pad)
            np.testing.assert_allclose(got.data, want, rtol=1e-4, atol=1e-5)

    def test_ones_kernel_counts_neighbors(self):
        # constant input, 3x3 ones kernel, zero padding: interior pixels see
        # all nine neighbors, corners only four
        v = 0.5
        x = Tensor(np.full((1, 4, 4), v, dtype=np.float32))
        kern = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = conv2d(x, kern, Tensor(np.zeros(1)), padding=1)
        assert out.data[0, 1, 1] == pytest.approx(9 * v, rel=1e-6)
        assert out.data[0, 0, 0] == pytest.approx(4 * v, rel=1e-6)
        assert out.data[0, 0, 1] == pytest.approx(6 * v, rel=1e-6)

    def test_stride_two(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 7, 7)).astype(np.float32)
        kern = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = np.zeros(3, dtype=np.float32)
        got = conv2d(Tensor(x), Tensor(kern), Tensor(b), stride=2, padding=1)
        np.testing.assert_allclose(got.data, brute_conv2d(x, kern, b, 2, 1), rtol=1e-4, atol=1e-5)

    def test_uneven_tiling_rejected(self):
        x = Tensor(np.zeros((1, 6, 6)))
        with pytest.raises(ShapeError, match="tile"):
            conv2d(x, Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)), stride=2, padding=1)

    def test_rejects_bad_shapes(self):
        x = Tensor(np.zeros((2, 4, 4)))
        with pytest.raises(ShapeError, match="channel"):
            conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
        with pytest.raises(ShapeError, match="odd"):
            conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(1)))
        with pytest.raises(ShapeError, match="bias"):
            conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(2)))

    def test_gradients(self):
        rng = np.random.default_rng(11)
        for pad, stride in [(0, 1), (1, 1), (1, 2)]:
            x = Tensor(rng.standard_normal((2, 5, 5)) * 0.5, requires_grad=True)
            kern = Tensor(rng.standard_normal((2, 2, 3, 3)) * 0.5, requires_grad=True)
            b = Tensor(rng.standard_normal(2) * 0.5, requires_grad=True)
            if (5 + 2 * pad - 3) % stride:
                continue
            gradcheck(
                lambda x=x, kern=kern, b=b, s=stride, p=pad: reduce_sum(
                    conv2d(x, kern, b, stride=s, padding=p)
                ),
                [x, kern, b],
            )


class TestPoolingAndResampling:
    def test_maxpool_values(self):
        x = Tensor(np.array([[[1.0, 2.0, 5.0, 0.0], [3.0, 4.0, 1.0, 1.0]]]))
        out = maxpool2x2(x)
        np.testing.assert_allclose(out.data, [[[4.0, 5.0]]])

    def test_maxpool_tie_takes_first_in_row_major_order(self):
        x = Tensor(np.full((1, 2, 2), 7.0), requires_grad=True)
        out = maxpool2x2(x)
        backward(reduce_sum(out))
        np.testing.assert_allclose(x.grad[0], [[1.0, 0.0], [0.0, 0.0]])

    def test_maxpool_gradient(self):
        rng = np.random.default_rng(12)
        # distinct, well-separated values so the argmax is FD-stable
        vals = (rng.permutation(2 * 6 * 6).astype(np.float32) * 0.1).reshape(2, 6, 6)
        x = Tensor(vals, requires_grad=True)
        gradcheck(lambda: reduce_sum(mul(maxpool2x2(x), 0.3)), [x])

    def test_upsample_values_and_gradient(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]), requires_grad=True)
        out = upsample_nearest2x(x)
        np.testing.assert_allclose(
            out.data[0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        )
        backward(reduce_sum(out))
        np.testing.assert_allclose(x.grad[0], [[4.0, 4.0], [4.0, 4.0]])

    def test_pool_then_upsample_roundtrip_shape(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((3, 8, 8)))
        assert upsample_nearest2x(maxpool2x2(x)).shape == (3, 8, 8)


class TestConcatAndSelection:
    def test_concat_values(self):
        a = Tensor(np.ones((2, 3, 3)))
        b = Tensor(np.zeros((1, 3, 3)))
        out = concat_channels([a, b])
        assert out.shape == (3, 3, 3)
        np.testing.assert_allclose(out.data[:2], 1.0)
        np.testing.assert_allclose(out.data[2], 0.0)

    def test_concat_promotes_2d_maps(self):
        a = Tensor(np.ones((3, 3)))
        b = Tensor(np.zeros((3, 3)))
        assert concat_channels([a, b]).shape == (2, 3, 3)

    def test_concat_gradient_splits(self):
        rng = np.random.default_rng(14)
        a = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 3, 3)))
        gradcheck(lambda: reduce_sum(mul(concat_channels([a, b]), w)), [a, b])

    def test_take_channel(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(2, 2, 2), requires_grad=True)
        out = take_channel(x, 1)
        np.testing.assert_allclose(out.data, x.data[1])
        backward(reduce_sum(out))
        np.testing.assert_allclose(x.grad[0], 0.0)
        np.testing.assert_allclose(x.grad[1], 1.0)

    def test_broadcast_vector(self):
        v = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        out = broadcast_vector(v, (2, 3))
        assert out.shape == (2, 2, 3)
        np.testing.assert_allclose(out.data[0], 1.0)
        np.testing.assert_allclose(out.data[1], 2.0)
        backward(reduce_sum(out))
        np.testing.assert_allclose(v.grad, [6.0, 6.0])

    def test_broadcast_map(self):
        m = Tensor(np.ones((2, 2)), requires_grad=True)
        out = broadcast_map(m, 3)
        assert out.shape == (3, 2, 2)
        backward(reduce_sum(out))
        np.testing.assert_allclose(m.grad, 3.0 * np.ones((2, 2)))


class TestTapeHygiene:
    def test_backward_clears_tape(self):
        a = Tensor(np.ones(3), requires_grad=True)
        out = reduce_sum(square(a))
        assert tape_length() > 0
        backward(out)
        assert tape_length() == 0

    def test_no_grad_records_nothing(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = reduce_sum(square(a))
        assert tape_length() == 0
        assert out.requires_grad is False

    def test_backward_needs_scalar(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(square(a))

    def test_constants_stay_off_the_tape(self):
        a = Tensor(np.ones(3))
        out = reduce_sum(square(a))
        assert tape_length() == 0
        assert out.requires_grad is False

    def test_grad_accumulates_across_uses(self):
        a = Tensor(np.array([2.0]), requires_grad=True)
        backward(reduce_sum(add(square(a), a)))
        assert a.grad[0] == pytest.approx(5.0)  # 2x + 1


class TestRandomizedGradients:
    """Composite graphs mixing several ops, checked against finite differences."""

    def test_mixed_graphs(self):
        rng = np.random.default_rng(15)
        for trial in range(5):
            x = Tensor(rng.uniform(0.3, 1.5, (2, 4, 4)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32) * 0.4, requires_grad=True)
            b = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)

            def build():
                y = conv2d(x, w, b, padding=1)
                p = channel_softmax(y)
                return reduce_mean(square(sub(p, 0.5)))

            gradcheck(build, [x, w, b])
