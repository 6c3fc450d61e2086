import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxcodec import autograd as ag
from auxcodec.autograd import GradCheckInapplicable, ShapeError, Tape, Tensor, grad_check
from auxcodec.entropy import ste_round

TOL = 1e-4


def rand(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, shape))


class TestTensorBasics:
    def test_data_is_float64(self):
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float64
        assert t.size == 3

    def test_grad_shape_matches_data(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            y = ag.sum_(x * x)
        tape.backward(y)
        assert x.grad.shape == x.shape

    def test_backward_visits_each_node_once(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        with Tape() as tape:
            a = x * 2.0
            b = a + a  # diamond: a has two consumers
            y = ag.sum_(b * a)
        visited = tape.backward(y)
        assert visited == len(tape)
        np.testing.assert_allclose(x.grad, 16.0 * x.data)

    def test_clear_frees_nodes(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        with Tape() as tape:
            ag.sum_(ag.exp(x))
        assert len(tape) > 0
        tape.clear()
        assert len(tape) == 0

    def test_no_tape_means_no_recording(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        y = ag.sum_(x * x)
        assert y.data == pytest.approx(float((x.data**2).sum()))
        assert x.grad is None

    def test_forward_is_deterministic(self, rng):
        x, w = rand(rng, 2, 3, 8, 8), rand(rng, 4, 3, 4, 4)
        a = ag.conv2d(x, w, stride=2, padding=1).data
        b = ag.conv2d(x, w, stride=2, padding=1).data
        assert np.array_equal(a, b)


class TestConv2d:
    def test_ones_kernel_sums(self):
        out = ag.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 4, 4))), stride=4)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 16.0

    def test_identity_kernel(self, rng):
        x = rand(rng, 1, 1, 5, 6)
        out = ag.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
        assert np.array_equal(out.data, x.data)

    @pytest.mark.parametrize("h,k,s,p", [(8, 4, 2, 1), (7, 3, 1, 1), (9, 3, 2, 0), (5, 5, 1, 2)])
    def test_output_size(self, rng, h, k, s, p):
        out = ag.conv2d(rand(rng, 1, 2, h, h), rand(rng, 3, 2, k, k), stride=s, padding=p)
        assert out.shape[2] == (h + 2 * p - k) // s + 1

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            ag.conv2d(rand(rng, 1, 2, 8, 8), rand(rng, 3, 4, 3, 3))

    def test_input_gradient(self, rng):
        x, w, b = rand(rng, 2, 3, 8, 8), rand(rng, 4, 3, 4, 4), rand(rng, 4)
        y = rand(rng, 2, 4, 4, 4)
        err = grad_check(lambda x_: ag.sum_(ag.conv2d(x_, w, b, 2, 1) * y), [x])
        assert err < TOL

    def test_weight_and_bias_gradient(self, rng):
        x, w, b = rand(rng, 1, 2, 6, 6), rand(rng, 3, 2, 3, 3), rand(rng, 3)
        y = rand(rng, 1, 3, 6, 6)
        err = grad_check(lambda w_, b_: ag.sum_(ag.conv2d(x, w_, b_, 1, 1) * y), [w, b])
        assert err < TOL


class TestConvTranspose2d:
    def test_single_tap_expands_to_ones(self):
        out = ag.conv_transpose2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 4, 4))),
                                  stride=2, padding=1)
        assert out.shape == (1, 1, 2, 2)
        assert np.array_equal(out.data, np.ones((1, 1, 2, 2)))

    def test_zero_input(self, rng):
        out = ag.conv_transpose2d(Tensor(np.zeros((1, 2, 3, 3))), rand(rng, 2, 3, 4, 4), None, 2, 1)
        assert out.shape == (1, 3, 6, 6)
        assert not out.data.any()

    def test_gradients(self, rng):
        x, w, b = rand(rng, 2, 3, 4, 4), rand(rng, 3, 2, 4, 4), rand(rng, 2)
        y = rand(rng, 2, 2, 8, 8)
        err = grad_check(
            lambda x_, w_, b_: ag.sum_(ag.conv_transpose2d(x_, w_, b_, 2, 1) * y), [x, w, b]
        )
        assert err < TOL

    @pytest.mark.parametrize("stride,pad,k", [(2, 1, 4), (1, 1, 3), (2, 0, 2), (3, 1, 5)])
    def test_adjoint_of_conv2d(self, rng, stride, pad, k):
        x = Tensor(rng.normal(size=(2, 3, 12, 12)))
        w = Tensor(rng.normal(size=(5, 3, k, k)))
        cx = ag.conv2d(x, w, stride=stride, padding=pad)
        y = Tensor(rng.normal(size=cx.shape))
        lhs = float(np.vdot(cx.data, y.data))
        ty = ag.conv_transpose2d(y, w, stride=stride, padding=pad)
        # transposed output may be shorter than x when the forward conv dropped a remainder
        region = x.data[:, :, : ty.shape[2], : ty.shape[3]]
        rhs = float(np.vdot(region, ty.data))
        assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1.0)


class TestElementwise:
    def test_softmax_uniform(self):
        out = ag.softmax(Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_concat_channels(self, rng):
        out = ag.concat([rand(rng, 2, 2, 3, 3), rand(rng, 2, 3, 3, 3)], axis=1)
        assert out.shape == (2, 5, 3, 3)

    def test_concat_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ag.concat([rand(rng, 1, 2, 3, 3), rand(rng, 1, 2, 4, 3)], axis=1)

    def test_incompatible_broadcast(self, rng):
        with pytest.raises(ShapeError):
            rand(rng, 2, 3) + rand(rng, 4)

    @pytest.mark.parametrize(
        "name,fn",
        [
            ("add", lambda a, b: a + b),
            ("sub", lambda a, b: a - b),
            ("mul", lambda a, b: a * b),
            ("div", lambda a, b: a / (b * b + 1.0)),
            ("exp", lambda a, b: ag.exp(a) * b),
            ("log", lambda a, b: ag.log(a * a + 0.5) + b),
            ("sigmoid", lambda a, b: ag.sigmoid(a * 3.0) * b),
            ("tanh", lambda a, b: ag.tanh(a) * b),
            ("softplus", lambda a, b: ag.softplus(a * 4.0) * b),
            ("normal_cdf", lambda a, b: ag.normal_cdf(a * 2.0) * b),
            ("power", lambda a, b: (a * a + 1.0) ** 1.5 + b),
            ("softmax", lambda a, b: ag.softmax(a * 2.0, axis=-1) * b),
            ("permute", lambda a, b: ag.permute(a, (1, 0)) * ag.permute(b, (1, 0))),
            ("reshape", lambda a, b: ag.reshape(a, (6, 2)) * ag.reshape(b, (6, 2))),
            ("getitem", lambda a, b: a[:, 1:3] * b[:, :2]),
            ("mean", lambda a, b: ag.mean(a * b, axis=0)),
        ],
    )
    def test_gradient(self, rng, name, fn):
        a, b = rand(rng, 3, 4), rand(rng, 3, 4)
        err = grad_check(lambda a_, b_: ag.sum_(fn(a_, b_) * fn(a_, b_)), [a, b])
        assert err < TOL, name

    def test_per_channel_broadcast_gradient(self, rng):
        x, s = rand(rng, 2, 3, 4, 4), rand(rng, 1, 3, 1, 1)
        assert grad_check(lambda x_, s_: ag.sum_(ag.sigmoid(x_ * s_ + s_)), [x, s]) < TOL

    def test_matmul_gradient(self, rng):
        a, b = rand(rng, 2, 3, 4), rand(rng, 4, 5)
        assert grad_check(lambda a_, b_: ag.sum_(ag.tanh(a_ @ b_)), [a, b]) < TOL

    def test_batched_matmul_gradient(self, rng):
        a, b = rand(rng, 2, 3, 4), rand(rng, 2, 4, 2)
        assert grad_check(lambda a_, b_: ag.sum_((a_ @ b_) ** 2), [a, b]) < TOL

    def test_avg_pool_gradient(self, rng):
        x = rand(rng, 1, 2, 4, 4)
        assert grad_check(lambda x_: ag.sum_(ag.avg_pool2d(x_, 2) ** 2), [x]) < TOL

    def test_concat_gradient(self, rng):
        a, b = rand(rng, 1, 2, 2, 2), rand(rng, 1, 1, 2, 2)
        assert grad_check(lambda a_, b_: ag.sum_(ag.exp(ag.concat([a_, b_], 1))), [a, b]) < TOL

    def test_maximum_and_clip_gradient(self, rng):
        x = Tensor(rng.uniform(0.1, 0.9, (3, 3)) * np.sign(rng.normal(size=(3, 3))))
        assert grad_check(lambda x_: ag.sum_(ag.maximum(x_, 0.05) ** 2), [x]) < TOL
        assert grad_check(lambda x_: ag.sum_(ag.clip(x_, -0.5, 0.5) * x_), [x]) < TOL

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_random_composites(self, seed):
        r = np.random.default_rng(seed)
        x = Tensor(r.uniform(-1, 1, (1, 2, 4, 4)))
        w = Tensor(r.uniform(-1, 1, (2, 2, 3, 3)))
        f = lambda x_, w_: ag.sum_(ag.softplus(ag.conv2d(x_, w_, None, 1, 1)) * x_)
        assert grad_check(f, [x, w]) < TOL


class TestGradCheck:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ag.sum_(x * x)
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])
        assert grad_check(lambda x_: ag.sum_(x_ * x_), [x]) < 1e-8

    def test_conv_stack(self, rng):
        x = rand(rng, 1, 2, 8, 8)
        w1, w2 = rand(rng, 3, 2, 4, 4), rand(rng, 3, 2, 4, 4)

        def f(x_, a, b):
            h = ag.sigmoid(ag.conv2d(x_, a, None, 2, 1))
            return ag.sum_(ag.conv_transpose2d(h, b, None, 2, 1) ** 2)

        assert grad_check(f, [x, w1, w2]) < TOL

    def test_rounding_is_inapplicable(self, rng):
        x = rand(rng, 4)
        with pytest.raises(GradCheckInapplicable):
            grad_check(lambda x_: ag.sum_(ste_round(x_ * 3.0)), [x])

    @pytest.mark.filterwarnings("ignore:divide by zero")
    def test_non_finite_reported_as_failure(self):
        x = Tensor([0.0, 1.0])
        assert math.isinf(grad_check(lambda x_: ag.sum_(ag.log(x_)), [x]))

    def test_non_scalar_rejected(self, rng):
        with pytest.raises(ShapeError):
            grad_check(lambda x_: x_ * 2.0, [rand(rng, 3)])
