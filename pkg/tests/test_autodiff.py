import numpy as np
import pytest
from scipy.signal import correlate

from gsn import autodiff as ad
from gsn.autodiff import Tensor, backward, gradcheck
from gsn.errors import InvalidArgumentError, NonDeterministicError, ShapeError


def leaf(shape, seed=0, lo=-1.0, hi=1.0):
    return Tensor(np.random.default_rng(seed).uniform(lo, hi, shape), requires_grad=True)


def check(f, params, tol=1e-5):
    rep = gradcheck(f, params, tol=tol)
    assert rep.passed, rep.summary()
    return rep


class TestForwardValues:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        backward(ad.sum_(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    def test_l2_normalize(self):
        np.testing.assert_allclose(ad.l2_normalize(Tensor(np.array([[3.0, 4.0]]))).data, [[0.6, 0.8]])

    def test_conv_delta_kernel_is_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 3, 3, 1))
        w = np.zeros((3, 3, 1, 1))
        w[1, 1, 0, 0] = 1
        np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(w), pad=1).data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_conv_matches_scipy(self, stride, pad):
        rng = np.random.default_rng(stride + 3 * pad)
        x = rng.normal(size=(2, 9, 8, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        b = rng.normal(size=4)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        for n in range(2):
            for co in range(4):
                ref = sum(correlate(xp[n, :, :, ci], w[:, :, ci, co], mode="valid") for ci in range(3))
                np.testing.assert_allclose(out[n, :, :, co], ref[::stride, ::stride] + b[co], atol=1e-12)

    def test_matmul_and_sigmoid(self):
        a, b = leaf((3, 4)), leaf((4, 2), 1)
        np.testing.assert_allclose(ad.matmul(a, b).data, a.data @ b.data)
        np.testing.assert_allclose(ad.sigmoid(a).data, 1 / (1 + np.exp(-a.data)))

    def test_shape_errors_list_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
            ad.matmul(leaf((3, 4)), leaf((5, 2)))
        with pytest.raises(ShapeError):
            ad.add(leaf((3, 4)), leaf((2, 4)))


class TestBackward:
    def test_sum(self):
        x = leaf((2, 3))
        backward(ad.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_half_square(self):
        x = leaf((4,))
        backward(ad.scale(ad.sum_(ad.mul(x, x)), 0.5))
        np.testing.assert_allclose(x.grad, x.data)

    def test_non_scalar_loss(self):
        with pytest.raises(InvalidArgumentError):
            backward(leaf((2,)))

    def test_multiple_use_accumulates(self):
        x = leaf((3,))
        y = ad.add(x, x)
        backward(ad.sum_(ad.mul(y, x)))
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_linearity(self):
        x = leaf((3, 3))
        f = lambda: ad.sum_(ad.sigmoid(x))  # noqa: E731
        g = lambda: ad.mean(ad.square(x))  # noqa: E731
        backward(f())
        gf = x.grad.copy()
        x.grad = None
        backward(g())
        gg = x.grad.copy()
        x.grad = None
        backward(ad.add(ad.scale(f(), 2.0), ad.scale(g(), -3.0)))
        np.testing.assert_allclose(x.grad, 2 * gf - 3 * gg, atol=1e-12)


class TestGradients:
    def test_mlp(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(5, 6)))
        ws = [leaf((6, 7), 1), leaf((7, 5), 2), leaf((5, 1), 3)]
        bs = [leaf((7,), 4), leaf((5,), 5), leaf((1,), 6)]

        def f():
            h = ad.relu(ad.linear(x, ws[0], bs[0]))
            h = ad.sigmoid(ad.linear(h, ws[1], bs[1]))
            return ad.mean(ad.square(ad.linear(h, ws[2], bs[2])))

        check(f, ws + bs)

    def test_conv(self):
        x, w, b = leaf((2, 7, 6, 2)), leaf((3, 3, 2, 3), 1), leaf((3,), 2)
        r = np.random.default_rng(9).normal(size=(2, 4, 3, 3))
        check(lambda: ad.sum_(ad.mul(ad.conv2d(x, w, b, stride=2, pad=1), r)), [x, w, b])

    def test_shape_ops(self):
        a, b = leaf((2, 3)), leaf((2, 2), 1)
        r = np.random.default_rng(2).normal(size=(5, 2))

        def f():
            c = ad.concat([a, b], axis=1)
            d = ad.transpose(ad.reshape(c, (2, 5)))
            return ad.sum_(ad.mul(ad.slice_(d, (slice(0, 5), slice(None))), r))

        check(f, [a, b])

    def test_take_and_broadcast(self):
        a, b = leaf((4, 3)), leaf((3,), 1)
        idx = np.array([0, 2, 2, 3, 0])

        def f():
            return ad.sum_(ad.square(ad.sub(ad.take(a, idx), b)))

        check(f, [a, b])

    def test_l2_normalize(self):
        a = leaf((5, 4))
        r = np.random.default_rng(3).normal(size=(5, 4))
        check(lambda: ad.sum_(ad.mul(ad.l2_normalize(a), r)), [a])

    @pytest.mark.parametrize("axis", [None, 0, 1])
    def test_reductions(self, axis):
        a = leaf((3, 4, 2))
        r = np.random.default_rng(3).normal(size=np.sum(np.zeros((3, 4, 2)), axis=axis).shape)
        check(lambda: ad.sum_(ad.mul(ad.mean(a, axis=axis), r)), [a])


class TestGradcheckHarness:
    def test_quadratic_form(self):
        A = np.random.default_rng(0).normal(size=(4, 4))
        x = leaf((4, 1))
        rep = gradcheck(lambda: ad.sum_(ad.mul(x, ad.matmul(Tensor(A), x))), [x])
        assert rep.max_rel_err < 1e-8

    def test_dead_relu_is_zero_both(self):
        x = Tensor(np.array([-1.0, -2.0]), requires_grad=True)
        rep = gradcheck(lambda: ad.sum_(ad.relu(x)), [x])
        assert rep.passed and rep.params[0].zero_both == 2

    def test_detects_wrong_gradient(self):
        x = leaf((3,))

        def f():
            def bw(g):
                return (2.0 * g * np.ones_like(x.data),)
            return ad.custom_op((x,), np.asarray(x.data.sum()), bw, "wrong")

        assert not gradcheck(f, [x]).passed

    def test_non_deterministic(self):
        x = leaf((2,))
        rng = np.random.default_rng(0)
        with pytest.raises(NonDeterministicError):
            gradcheck(lambda: ad.sum_(ad.mul(x, rng.normal(size=2))), [x])

    def test_requires_f64(self):
        x = Tensor(np.ones(2, np.float32), requires_grad=True)
        with pytest.raises(InvalidArgumentError):
            gradcheck(lambda: ad.sum_(x), [x])


def test_f32_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 16, 16, 3)).astype(np.float32))
    w = Tensor(rng.normal(size=(3, 3, 3, 8)).astype(np.float32))
    a = ad.conv2d(x, w, stride=2, pad=1).data
    b = ad.conv2d(x, w, stride=2, pad=1).data
    assert a.dtype == np.float32
    np.testing.assert_array_equal(a, b)
