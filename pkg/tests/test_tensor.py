import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import check_op_grads
from polarfusion.tensor import (ConvSpec, NonFiniteError, ShapeError, Tensor, add, batchnorm2d, batchnorm2d_train,
                                concat_channels, conv2d, conv_transpose2d, loss_node, mul, no_grad, permute_axes,
                                relu, sigmoid, sum_all)


def naive_conv(x, w, b, stride, pad, dil):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
    ho = (h + 2 * pad[0] - dil[0] * (kh - 1) - 1) // stride[0] + 1
    wo = (wd + 2 * pad[1] - dil[1] * (kw - 1) - 1) // stride[1] + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            for a in range(kh):
                for bb in range(kw):
                    r, q = i * stride[0] + a * dil[0], j * stride[1] + bb * dil[1]
                    out[:, :, i, j] += xp[:, :, r, q] @ w[:, :, a, bb].T
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def naive_conv_transpose(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    _, co, kh, kw = w.shape
    full = np.zeros((n, co, (h - 1) * stride[0] + kh, (wd - 1) * stride[1] + kw))
    for i in range(h):
        for j in range(wd):
            for a in range(kh):
                for bb in range(kw):
                    full[:, :, i * stride[0] + a, j * stride[1] + bb] += x[:, :, i, j] @ w[:, :, a, bb]
    ho, wo = full.shape[2] - 2 * pad[0], full.shape[3] - 2 * pad[1]
    out = full[:, :, pad[0]:pad[0] + ho, pad[1]:pad[1] + wo]
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return out


conv_cases = st.tuples(
    st.integers(1, 2), st.integers(1, 3), st.integers(1, 3),  # n, cin, cout
    st.integers(1, 3), st.integers(1, 3),  # kernel
    st.integers(1, 2), st.integers(0, 1), st.integers(1, 2),  # stride, pad, dilation
    st.booleans(), st.integers(0, 10**6),
)


@settings(max_examples=40, deadline=None)
@given(conv_cases)
def test_conv2d_matches_loop_oracle(case):
    n, ci, co, kh, kw, s, p, d, bias, seed = case
    rng = np.random.default_rng(seed)
    h, w = 5 + d * kh, 6 + d * kw
    x = rng.standard_normal((n, ci, h, w))
    wt = rng.standard_normal((co, ci, kh, kw))
    b = rng.standard_normal(co) if bias else None
    spec = ConvSpec(ci, co, (kh, kw), (s, s), (p, p), (d, d), has_bias=bias)
    got = conv2d(Tensor(x), spec, Tensor(wt), None if b is None else Tensor(b)).data
    np.testing.assert_allclose(got, naive_conv(x, wt, b, (s, s), (p, p), (d, d)), rtol=1e-10, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(conv_cases)
def test_conv_transpose_matches_loop_oracle(case):
    n, ci, co, kh, kw, s, p, _, bias, seed = case
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, ci, 4, 3))
    wt = rng.standard_normal((ci, co, kh + 1, kw + 1))
    b = rng.standard_normal(co) if bias else None
    spec = ConvSpec(ci, co, (kh + 1, kw + 1), (s, s), (p, p), has_bias=bias)
    got = conv_transpose2d(Tensor(x), spec, Tensor(wt), None if b is None else Tensor(b)).data
    np.testing.assert_allclose(got, naive_conv_transpose(x, wt, b, (s, s), (p, p)), rtol=1e-10, atol=1e-10)


def test_conv_transpose_is_adjoint_of_conv(rng):
    spec = ConvSpec(3, 2, (3, 3), (2, 2), (1, 1), has_bias=False)
    w = rng.standard_normal((2, 3, 3, 3))
    x = rng.standard_normal((1, 3, 7, 7))
    y = rng.standard_normal((1, 2, 4, 4))
    lhs = np.sum(conv2d(Tensor(x), spec, Tensor(w)).data * y)
    rhs = np.sum(x * conv_transpose2d(Tensor(y), ConvSpec(2, 3, (3, 3), (2, 2), (1, 1), has_bias=False),
                                      Tensor(w)).data)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_conv_linearity(rng):
    spec = ConvSpec(2, 3, (3, 3), padding=(1, 1), has_bias=False)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    for _ in range(10):
        x, y = rng.standard_normal((2, 2, 6, 5)), rng.standard_normal((2, 2, 6, 5))
        a, b = rng.standard_normal(2)
        lhs = conv2d(Tensor(a * x + b * y), spec, w).data
        rhs = a * conv2d(Tensor(x), spec, w).data + b * conv2d(Tensor(y), spec, w).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-9)


def test_conv_accepts_both_ranks(rng):
    spec = ConvSpec(2, 4, (3, 3), padding=(1, 1))
    w, b = Tensor(rng.standard_normal((4, 2, 3, 3))), Tensor(np.zeros(4))
    x = rng.standard_normal((2, 5, 5))
    assert conv2d(Tensor(x), spec, w, b).shape == (4, 5, 5)
    assert conv2d(Tensor(x[None]), spec, w, b).shape == (1, 4, 5, 5)


def test_conv_shape_errors(rng):
    spec = ConvSpec(2, 4, (3, 3))
    with pytest.raises(ShapeError):
        conv2d(Tensor(rng.standard_normal((3, 5, 5))), spec, Tensor(np.zeros((4, 2, 3, 3))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(rng.standard_normal((2, 5, 5))), spec, Tensor(np.zeros((4, 2, 2, 2))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(rng.standard_normal((2, 2, 2))), spec, Tensor(np.zeros((4, 2, 3, 3))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        ConvSpec(0, 1)


# -- gradient checks: >= 20 random float64 instances per op ----------------

N_GRAD = 20


def test_grad_conv2d(rng):
    for k in range(N_GRAD):
        s, p = 1 + k % 2, k % 2
        spec = ConvSpec(2, 3, (3, 2), (s, s), (p, p))
        check_op_grads(lambda x, w, b: conv2d(x, spec, w, b),
                       [rng.standard_normal((2, 2, 5, 4)), rng.standard_normal((3, 2, 3, 2)),
                        rng.standard_normal(3)], rng)


def test_grad_conv_transpose2d(rng):
    for k in range(N_GRAD):
        s = 1 + k % 2
        spec = ConvSpec(2, 3, (2, 2), (s, s), (k % 2, 0))
        check_op_grads(lambda x, w, b: conv_transpose2d(x, spec, w, b),
                       [rng.standard_normal((1, 2, 3, 4)), rng.standard_normal((2, 3, 2, 2)),
                        rng.standard_normal(3)], rng)


def test_grad_batchnorm_eval(rng):
    for _ in range(N_GRAD):
        mean, var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
        check_op_grads(lambda x, g, b: batchnorm2d(x, mean, var, g, b),
                       [rng.standard_normal((2, 3, 3, 2)), rng.standard_normal(3), rng.standard_normal(3)], rng)


def test_grad_batchnorm_train(rng):
    for _ in range(N_GRAD):
        check_op_grads(lambda x, g, b: batchnorm2d_train(x, g, b)[0],
                       [rng.standard_normal((2, 3, 3, 2)), rng.standard_normal(3), rng.standard_normal(3)], rng)


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 1e-2, 0.5, x)


def test_grad_relu(rng):
    for _ in range(N_GRAD):
        check_op_grads(relu, [_away_from_zero(rng, (2, 3, 4))], rng)


def test_grad_sigmoid(rng):
    for _ in range(N_GRAD):
        check_op_grads(sigmoid, [3 * rng.standard_normal((2, 3, 4))], rng)


def test_grad_permute(rng):
    for k in range(N_GRAD):
        order = [(2, 1, 0), (1, 0, 2), (0, 2, 1)][k % 3]
        check_op_grads(lambda x: permute_axes(x, order), [rng.standard_normal((2, 3, 4))], rng)


def test_grad_concat(rng):
    for _ in range(N_GRAD):
        check_op_grads(concat_channels, [rng.standard_normal((2, 1, 3, 2)), rng.standard_normal((2, 3, 3, 2))], rng)


def test_grad_add_mul_sum(rng):
    for _ in range(N_GRAD):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        check_op_grads(add, [a.copy(), b.copy()], rng)
        check_op_grads(mul, [a.copy(), b.copy()], rng)
        check_op_grads(lambda x: mul(x, 2.5), [a.copy()], rng)
        check_op_grads(lambda x: sum_all(x), [a.copy()], rng)


def test_batchnorm_train_statistics(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 2 + 1
    out, mu, var = batchnorm2d_train(Tensor(x), np.ones(3), np.zeros(3))
    np.testing.assert_allclose(mu, x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(var, x.var(axis=(0, 2, 3)))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)


def test_batchnorm_rejects_negative_variance():
    with pytest.raises(ValueError):
        batchnorm2d(Tensor(np.zeros((1, 2, 2))), [0.0], [-1.0], [1.0], [0.0])


def test_gradient_accumulates_over_shared_inputs(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    sum_all(add(mul(x, 2.0), mul(x, x))).backward()
    np.testing.assert_allclose(x.grad, 2 + 2 * x.data)


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with no_grad():
        y = relu(x)
    assert not y.requires_grad and y._parents == ()


def test_backward_needs_scalar(rng):
    with pytest.raises(ShapeError):
        relu(Tensor(rng.standard_normal((2, 2)), requires_grad=True)).backward()


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        mul(Tensor(np.array([1e38], dtype=np.float32)), 1e10)


def test_loss_node_routes_gradients(rng):
    a = Tensor(rng.standard_normal(3), requires_grad=True)
    g = rng.standard_normal(3)
    loss_node(1.5, [(a, g)]).backward()
    np.testing.assert_allclose(a.grad, g)
    with pytest.raises(ShapeError):
        loss_node(1.0, [(a, np.zeros(4))])


def test_permute_layout_oracle(rng):
    x = rng.standard_normal((2, 3, 4))
    y = permute_axes(Tensor(x), (2, 1, 0)).data
    for c in range(2):
        for h in range(3):
            for w in range(4):
                assert y[w, h, c] == x[c, h, w]
    with pytest.raises(ShapeError):
        permute_axes(Tensor(x), (0, 0, 1))
