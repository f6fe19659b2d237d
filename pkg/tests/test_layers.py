import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segan import tensor as T
from segan.layers import (
    ConvParams,
    OptimState,
    batch_norm,
    channels_last,
    clip_weights,
    conv2d,
    leaky_relu,
    new_batch_norm,
    new_conv,
    resize2x,
    rmsprop_step,
    sigmoid,
)
from segan.tensor import ShapeError, Tensor, backward, float64_mode


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[ni, oi, i, j] = (patch * w[oi]).sum() + b[oi]
    return out


def make_conv(rng, c, o, k, s, pad=1):
    w = Tensor(rng.standard_normal((o, c, k, k)), True)
    b = Tensor(rng.standard_normal(o), True)
    return ConvParams(w, b, s, pad)


@pytest.mark.parametrize("k,s,size", [(3, 1, 6), (4, 2, 8), (3, 2, 6), (4, 2, 6), (3, 1, 5)])
def test_conv_matches_loop_oracle(rng, k, s, size):
    with float64_mode():
        p = make_conv(rng, 3, 4, k, s)
        x = rng.standard_normal((2, 3, size, size))
        out = conv2d(Tensor(x), p)
        ref = conv_oracle(x, p.weights.data, p.bias.data, s, 1)
        assert out.shape == ref.shape
        assert np.allclose(out.data, ref, atol=1e-12)


def test_conv_gradients_match_loop_oracle_adjoint(rng):
    # <conv(x), g> is linear in x and w, so its gradients equal oracle-evaluated directional derivatives.
    with float64_mode():
        p = make_conv(rng, 2, 3, 4, 2)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), True)
        g = rng.standard_normal((1, 3, 3, 3))
        backward(T.weighted_sum(conv2d(x, p), g))
        dx = rng.standard_normal(x.shape)
        lin = lambda xx, ww: (conv_oracle(xx, ww, np.zeros(3), 2, 1) * g).sum()
        assert np.isclose((x.grad * dx).sum(), lin(dx, p.weights.data))
        dw = rng.standard_normal(p.weights.shape)
        assert np.isclose((p.weights.grad * dw).sum(), lin(x.data, dw))
        assert np.allclose(p.bias.grad, g.sum(axis=(0, 2, 3)))


def test_conv_layout_does_not_change_result(rng):
    p = make_conv(rng, 3, 5, 4, 2)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    a = conv2d(Tensor(x), p).data
    b = conv2d(Tensor(channels_last(x)), p).data
    assert np.array_equal(a, b)


def test_conv_shape_errors(rng):
    p = make_conv(rng, 3, 4, 3, 1)
    with pytest.raises(ShapeError, match="input has 2 channels, kernel expects 3"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), p)
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((2, 4, 4))), p)


def test_resize2x_blocks_and_gradient():
    x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2), True)
    out = resize2x(x)
    assert out.shape == (1, 2, 4, 4)
    for c in range(2):
        assert np.array_equal(out.data[0, c], np.kron(x.data[0, c], np.ones((2, 2))))
    backward(T.sum_all(out))
    assert np.array_equal(x.grad, np.full(x.shape, 4.0))


def test_leaky_relu_values_and_subgradient():
    x = Tensor(np.array([-2.0, 0.0, 3.0]), True)
    out = leaky_relu(x)
    assert np.allclose(out.data, [-0.4, 0.0, 3.0])
    backward(T.sum_all(out))
    assert np.allclose(x.grad, [0.2, 1.0, 1.0])


def test_sigmoid_is_stable_and_in_range():
    x = Tensor(np.array([-1000.0, -1.0, 0.0, 1.0, 1000.0]))
    y = sigmoid(x).data
    assert np.all((y >= 0) & (y <= 1)) and np.all(np.isfinite(y))
    assert y[2] == 0.5
    assert np.isclose(y[3], 1 / (1 + np.exp(-1.0)))


def bn_oracle(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return gamma[None, :, None, None] * (x - mean) / np.sqrt(var + eps) + beta[None, :, None, None]


def test_batch_norm_train_and_running_stats(rng):
    with float64_mode():
        p = new_batch_norm(3)
        p.gamma.data[:] = [1.0, 2.0, 0.5]
        p.beta.data[:] = [0.0, -1.0, 1.0]
        x = rng.standard_normal((4, 3, 2, 2)) * 3 + 1
        out = batch_norm(Tensor(x), p)
        assert np.allclose(out.data, bn_oracle(x, p.gamma.data, p.beta.data, 1e-5))
        m = 4 * 2 * 2
        mean = x.mean(axis=(0, 2, 3))
        var_unbiased = x.var(axis=(0, 2, 3)) * m / (m - 1)
        assert np.allclose(p.running_mean, 0.1 * mean)
        assert np.allclose(p.running_var, 0.9 + 0.1 * var_unbiased)


def test_batch_norm_eval_uses_running_stats(rng):
    with float64_mode():
        p = new_batch_norm(2)
        p.training = False
        p.running_mean = np.array([1.0, -1.0])
        p.running_var = np.array([4.0, 0.25])
        x = rng.standard_normal((2, 2, 3, 3))
        out = batch_norm(Tensor(x), p).data
        ref = (x - p.running_mean[None, :, None, None]) / np.sqrt(p.running_var[None, :, None, None] + 1e-5)
        assert np.allclose(out, ref)


def test_batch_norm_frozen_stats_untouched(rng):
    p = new_batch_norm(2)
    p.track_running_stats = False
    batch_norm(Tensor(rng.standard_normal((2, 2, 2, 2)).astype(np.float32)), p)
    assert np.array_equal(p.running_mean, [0, 0]) and np.array_equal(p.running_var, [1, 1])


def test_batch_norm_needs_two_values_in_train_mode():
    with pytest.raises(ShapeError):
        batch_norm(Tensor(np.ones((1, 2, 1, 1), np.float32)), new_batch_norm(2))


def test_new_conv_init_distribution():
    p = new_conv(np.random.default_rng(0), 64, 64, 4, 2)
    w = p.weights.data
    assert abs(w.mean()) < 1e-3 and abs(w.std() - 0.02) < 1e-3
    assert not p.bias.data.any()


def test_rmsprop_matches_hand_formula():
    with float64_mode():
        p = Tensor(np.array([1.0, -2.0]), True)
        state = OptimState(lr=0.1)
        grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3])]
        v = np.zeros(2)
        expect = p.data.copy()
        for g in grads:
            p.grad = g.copy()
            rmsprop_step([p], state, sign=-1)
            v = 0.9 * v + 0.1 * g * g
            expect = expect - 0.1 * g / (np.sqrt(v) + 1e-8)
        assert np.allclose(p.data, expect, rtol=0, atol=1e-15)


def test_rmsprop_ascent_then_descent_is_exact_inverse():
    # eps=0, alpha=3/4 and dyadic numbers keep every intermediate exactly representable.
    with float64_mode():
        p = Tensor(np.array([0.75, -0.5, 2.0]), True)
        start = p.data.copy()
        up, down = OptimState(0.125, alpha=0.75, eps=0.0), OptimState(0.125, alpha=0.75, eps=0.0)
        p.grad = np.array([0.25, -0.5, 1.0])
        rmsprop_step([p], up, sign=+1)
        assert not np.array_equal(p.data, start)
        rmsprop_step([p], down, sign=-1)
        assert np.array_equal(p.data, start)


def test_rmsprop_requires_gradient():
    with pytest.raises(ValueError):
        rmsprop_step([Tensor(np.ones(2), False)], OptimState(0.1))


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 1.0), st.integers(0, 2**31 - 1))
def test_clip_weights_bounds_everything(c, seed):
    r = np.random.default_rng(seed)
    ps = [Tensor(r.standard_normal((3, 4)) * 5), Tensor(r.standard_normal(7))]
    inside = [np.abs(p.data) <= c for p in ps]
    before = [p.data.copy() for p in ps]
    clip_weights(ps, c)
    for p, keep, old in zip(ps, inside, before):
        assert np.abs(p.data).max() <= c
        assert np.array_equal(p.data[keep], old[keep])


def test_clip_weights_rejects_nonpositive():
    with pytest.raises(ValueError):
        clip_weights([Tensor(np.ones(1))], 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_conv_is_linear_in_input(seed, alpha):
    r = np.random.default_rng(seed)
    with float64_mode():
        p = make_conv(r, 2, 2, 3, 1)
        p.bias.data[:] = 0
        x, y = r.standard_normal((1, 2, 4, 4)), r.standard_normal((1, 2, 4, 4))
        lhs = conv2d(Tensor(alpha * x + y), p).data
        rhs = alpha * conv2d(Tensor(x), p).data + conv2d(Tensor(y), p).data
        assert np.allclose(lhs, rhs, atol=1e-9)
