"""Reverse-mode tape semantics: values, gradients, broadcasting, error paths."""

import numpy as np
import pytest

import fedsim.autodiff as ad
from fedsim import special

RNG = np.random.default_rng(42)


def leaf(shape, scale=1.0, shift=0.0):
    return ad.Tensor(RNG.standard_normal(shape) * scale + shift, requires_grad=True)


class TestTensorBasics:
    def test_float64_and_views(self):
        t = ad.Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2) and t.ndim == 2 and t.size == 4
        assert isinstance(t.numpy(), np.ndarray)

    def test_item(self):
        assert ad.Tensor(3.5).item() == 3.5

    def test_nonfinite_rejected_at_creation(self):
        with pytest.raises(ad.NonFiniteError):
            ad.Tensor([1.0, np.inf])
        with pytest.raises(ad.NonFiniteError):
            ad.Tensor(np.nan)

    def test_overflowing_op_rejected(self):
        x = ad.Tensor(1000.0, requires_grad=True)
        with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
            ad.exp(x)

    def test_operator_sugar(self):
        a, b = ad.Tensor(2.0), ad.Tensor(3.0)
        assert (a + b).item() == 5.0
        assert (a - b).item() == -1.0
        assert (a * b).item() == 6.0
        assert (a / b).item() == pytest.approx(2 / 3)
        assert (-a).item() == -2.0
        assert (a**2).item() == 4.0
        assert (1.0 + a).item() == 3.0
        assert (1.0 - a).item() == -1.0


class TestElementwiseGrads:
    def test_add_sub_mul_div(self):
        x = ad.Tensor([2.0, -3.0], requires_grad=True)
        y = ad.Tensor([5.0, 7.0], requires_grad=True)
        loss = ad.sum_(ad.add(ad.mul(x, y), ad.sub(ad.div(x, y), y)))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, y.data + 1.0 / y.data)
        np.testing.assert_allclose(y.grad, x.data - x.data / y.data**2 - 1.0)

    def test_diamond_accumulation(self):
        # x feeds two paths; grads must add, d(x*x + x)/dx = 2x + 1
        x = ad.Tensor([1.5, -0.5, 2.0], requires_grad=True)
        loss = ad.sum_(ad.add(ad.mul(x, x), x))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_power_log_exp(self):
        x = ad.Tensor([0.5, 2.0], requires_grad=True)
        loss = ad.sum_(ad.add(ad.power(x, 3.0), ad.add(ad.log(x), ad.exp(x))))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, 3 * x.data**2 + 1 / x.data + np.exp(x.data))

    def test_relu_values_and_grad(self):
        x = ad.Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        y = ad.relu(x)
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
        ad.backward(ad.sum_(y))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_gelu_reference_formula(self):
        x = np.linspace(-3, 3, 13)
        got = ad.gelu(ad.Tensor(x)).data
        c = np.sqrt(2 / np.pi)
        want = 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(got, want, rtol=1e-14)

    def test_gelu_keeps_shape(self):
        x = leaf((2, 3, 4))
        y = ad.gelu(x)
        assert y.shape == (2, 3, 4)
        ad.backward(ad.sum_(y))
        assert x.grad.shape == (2, 3, 4)

    def test_maximum_scalar(self):
        x = ad.Tensor([-2.0, 0.5, 3.0], requires_grad=True)
        y = ad.maximum_scalar(x, 0.25)
        np.testing.assert_array_equal(y.data, [0.25, 0.5, 3.0])
        ad.backward(ad.sum_(y))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0])

    def test_lgamma_grad_is_digamma(self):
        x = ad.Tensor([0.3, 1.0, 4.7], requires_grad=True)
        ad.backward(ad.sum_(ad.lgamma(x)))
        np.testing.assert_allclose(x.grad, special.digamma(x.data), rtol=1e-10)

    def test_digamma_grad_is_trigamma(self):
        x = ad.Tensor([0.3, 1.0, 4.7], requires_grad=True)
        ad.backward(ad.sum_(ad.digamma(x)))
        np.testing.assert_allclose(x.grad, special.trigamma(x.data), rtol=1e-10)


class TestBroadcasting:
    def test_grad_unbroadcast_shapes(self):
        a = leaf((3, 1))
        b = leaf((1, 4))
        ad.backward(ad.sum_(ad.add(a, b)))
        assert a.grad.shape == (3, 1) and b.grad.shape == (1, 4)
        np.testing.assert_allclose(a.grad, np.full((3, 1), 4.0))
        np.testing.assert_allclose(b.grad, np.full((1, 4), 3.0))

    def test_scalar_broadcast(self):
        a = leaf((2, 2))
        s = ad.Tensor(3.0, requires_grad=True)
        ad.backward(ad.sum_(ad.mul(a, s)))
        assert s.grad.shape == ()
        np.testing.assert_allclose(s.grad, a.data.sum())

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ad.DimensionError):
            ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros(4)))

    def test_broadcast_to_grad_sums(self):
        a = leaf((1, 3))
        y = ad.broadcast_to(a, (5, 3))
        assert y.shape == (5, 3)
        ad.backward(ad.sum_(y))
        np.testing.assert_allclose(a.grad, np.full((1, 3), 5.0))


class TestShapeOps:
    def test_matmul_2d(self):
        a, b = leaf((3, 4)), leaf((4, 2))
        y = ad.matmul(a, b)
        np.testing.assert_allclose(y.data, a.data @ b.data)
        g = RNG.standard_normal((3, 2))
        ad.backward(ad.sum_(ad.mul(y, ad.Tensor(g))))
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_matmul_batched(self):
        a, b = leaf((5, 3, 4)), leaf((5, 4, 2))
        y = ad.matmul(a, b)
        np.testing.assert_allclose(y.data, a.data @ b.data)
        ad.backward(ad.sum_(y))
        ones = np.ones((5, 3, 2))
        np.testing.assert_allclose(a.grad, ones @ np.swapaxes(b.data, -1, -2))
        np.testing.assert_allclose(b.grad, np.swapaxes(a.data, -1, -2) @ ones)

    def test_transpose_roundtrip(self):
        a = leaf((2, 3, 4))
        y = ad.transpose(a, (1, 2, 0))
        assert y.shape == (3, 4, 2)
        w = RNG.standard_normal((3, 4, 2))
        ad.backward(ad.sum_(ad.mul(y, ad.Tensor(w))))
        np.testing.assert_allclose(a.grad, w.transpose(2, 0, 1))

    def test_reshape(self):
        a = leaf((2, 6))
        y = ad.reshape(a, (3, 4))
        ad.backward(ad.sum_(ad.mul(y, y)))
        np.testing.assert_allclose(a.grad, 2 * a.data)

    def test_getitem_scatter(self):
        a = leaf((4, 3))
        ad.backward(ad.sum_(a[1:3]))
        want = np.zeros((4, 3))
        want[1:3] = 1.0
        np.testing.assert_array_equal(a.grad, want)

    def test_concat_splits_grad(self):
        a, b = leaf((2, 3)), leaf((4, 3))
        y = ad.concat([a, b], axis=0)
        assert y.shape == (6, 3)
        np.testing.assert_allclose(y.data, np.concatenate([a.data, b.data]))
        w = RNG.standard_normal((6, 3))
        ad.backward(ad.sum_(ad.mul(y, ad.Tensor(w))))
        np.testing.assert_allclose(a.grad, w[:2])
        np.testing.assert_allclose(b.grad, w[2:])


class TestReductions:
    def test_sum_axis_keepdims(self):
        a = leaf((2, 3, 4))
        y = ad.sum_(a, axis=(0, 2), keepdims=True)
        assert y.shape == (1, 3, 1)
        np.testing.assert_allclose(y.data, a.data.sum(axis=(0, 2), keepdims=True))

    def test_mean_grad(self):
        a = leaf((2, 5))
        ad.backward(ad.mean(a))
        np.testing.assert_allclose(a.grad, np.full((2, 5), 1 / 10))

    def test_mean_axis(self):
        a = leaf((2, 5))
        ad.backward(ad.sum_(ad.mean(a, axis=1)))
        np.testing.assert_allclose(a.grad, np.full((2, 5), 1 / 5))

    def test_max_splits_ties(self):
        a = ad.Tensor([1.0, 3.0, 3.0], requires_grad=True)
        y = ad.max_(a)
        assert y.item() == 3.0
        ad.backward(y)
        np.testing.assert_allclose(a.grad, [0.0, 0.5, 0.5])

    def test_max_axis(self):
        a = ad.Tensor([[1.0, 5.0], [7.0, 2.0]], requires_grad=True)
        y = ad.max_(a, axis=1)
        np.testing.assert_array_equal(y.data, [5.0, 7.0])
        ad.backward(ad.sum_(y))
        np.testing.assert_array_equal(a.grad, [[0.0, 1.0], [1.0, 0.0]])


class TestFusedOps:
    def test_softmax_matches_numpy(self):
        x = RNG.standard_normal((4, 7))
        y = ad.softmax(ad.Tensor(x), axis=-1).data
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        np.testing.assert_allclose(y, e / e.sum(axis=-1, keepdims=True), rtol=1e-12)
        np.testing.assert_allclose(y.sum(axis=-1), np.ones(4), rtol=1e-12)

    def test_softmax_other_axis(self):
        x = RNG.standard_normal((3, 4, 5))
        y = ad.softmax(ad.Tensor(x), axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), np.ones((3, 5)), rtol=1e-12)

    def test_softmax_jacobian(self):
        # dy_i/dx_j = y_i (delta_ij - y_j), checked against an explicit matrix
        x = ad.Tensor(RNG.standard_normal(5), requires_grad=True)
        y = ad.softmax(x, axis=-1)
        w = RNG.standard_normal(5)
        ad.backward(ad.sum_(ad.mul(y, ad.Tensor(w))))
        yv = y.data
        jac = np.diag(yv) - np.outer(yv, yv)
        np.testing.assert_allclose(x.grad, jac @ w, rtol=1e-10, atol=1e-12)

    def test_layernorm_formula(self):
        x = RNG.standard_normal((6, 8)) * 3 + 1
        gamma = RNG.standard_normal(8)
        beta = RNG.standard_normal(8)
        y = ad.layernorm(ad.Tensor(x), ad.Tensor(gamma), ad.Tensor(beta)).data
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        want = (x - mu) / np.sqrt(var + 1e-5) * gamma + beta
        np.testing.assert_allclose(y, want, rtol=1e-10, atol=1e-12)

    def test_linear_leading_dims(self):
        x = leaf((2, 5, 3))
        w = leaf((3, 4))
        b = leaf((4,))
        y = ad.linear(x, w, b)
        assert y.shape == (2, 5, 4)
        np.testing.assert_allclose(y.data, x.data @ w.data + b.data)
        ad.backward(ad.sum_(y))
        np.testing.assert_allclose(b.grad, np.full(4, 10.0))

    def test_attention_probs_is_scaled_softmax(self):
        q = RNG.standard_normal((2, 3, 4, 8))
        k = RNG.standard_normal((2, 3, 6, 8))
        scale = 8 ** -0.5
        y = ad.attention_probs(ad.Tensor(q), ad.Tensor(k), scale).data
        scores = np.einsum("bhqd,bhkd->bhqk", q, k) * scale
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        np.testing.assert_allclose(y, e / e.sum(axis=-1, keepdims=True), rtol=1e-10)

    def test_mse(self):
        a = leaf((3, 4))
        b = ad.Tensor(RNG.standard_normal((3, 4)))
        y = ad.mse(a, b)
        assert y.shape == ()
        np.testing.assert_allclose(y.item(), ((a.data - b.data) ** 2).mean())
        ad.backward(y)
        np.testing.assert_allclose(a.grad, 2 * (a.data - b.data) / 12)


class TestGraphRules:
    def test_backward_needs_scalar(self):
        x = leaf((2, 2))
        with pytest.raises(ad.GraphError):
            ad.backward(ad.mul(x, x))

    def test_backward_twice_rejected(self):
        x = leaf((3,))
        loss = ad.sum_(x)
        ad.backward(loss)
        with pytest.raises(ad.GraphError):
            ad.backward(loss)

    def test_no_grad_blocks_tape(self):
        x = leaf((3,))
        with ad.no_grad():
            y = ad.mul(x, x)
        assert y._parents == () and y._bwd is None
        z = ad.sum_(ad.mul(x, 2.0))
        ad.backward(z)
        np.testing.assert_allclose(x.grad, [2.0, 2.0, 2.0])

    def test_interior_nodes_keep_no_grad_attr(self):
        x = leaf((3,))
        y = ad.mul(x, x)
        loss = ad.sum_(y)
        ad.backward(loss)
        # only leaves marked requires_grad retain .grad
        assert x.grad is not None
        assert y.requires_grad is False

    def test_grad_accumulates_across_separate_graphs(self):
        x = leaf((2,))
        ad.backward(ad.sum_(ad.mul(x, 3.0)))
        first = x.grad.copy()
        ad.backward(ad.sum_(ad.mul(x, 3.0)))
        np.testing.assert_allclose(x.grad, 2 * first)
