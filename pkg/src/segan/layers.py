"""Convolution, resize, normalization and activation layers, RMSProp and weight clipping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, default_dtype, make_node

LEAKY_SLOPE = 0.2


@dataclass
class ConvParams:
    weights: Tensor  # [out, in, k, k]
    bias: Tensor  # [out]
    stride: int = 1
    padding: int = 1

    def tensors(self):
        return [("weight", self.weights), ("bias", self.bias)]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True
    # Cleared while the owning network is frozen so a forward pass leaves it untouched.
    track_running_stats: bool = True

    def tensors(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


def channels_last(a: np.ndarray) -> np.ndarray:
    """Same NCHW-shaped array, backed by NHWC memory.

    Convolutions gather and scatter whole channel runs, so activations are
    kept channels-last in memory while the logical layout stays NCHW.
    """
    if a.ndim != 4 or a.transpose(0, 2, 3, 1).flags.c_contiguous:
        return a
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)


def _windows(src: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """im2col on NHWC data: (N, Hp, Wp, C) -> (N*ho*wo, k*k*C)."""
    n, c = src.shape[0], src.shape[3]
    cols = np.empty((n, ho, wo, k, k, c), dtype=src.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = src[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation plus bias."""
    w = p.weights
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input, got {list(x.shape)}")
    n, c, h, wd = x.shape
    out_c, in_c, k, _ = w.shape
    if c != in_c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {in_c}")
    s, pad = p.stride, p.padding
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"conv2d: spatial dims {h}x{wd} too small for kernel {k}")
    if k % s == 0 and (h + 2 * pad) % s == 0 and (wd + 2 * pad) % s == 0:
        return _conv_tiled(x, p)
    return _conv_im2col(x, p)


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    src = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    src[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    return src


def _conv_im2col(x: Tensor, p: ConvParams) -> Tensor:
    w, b = p.weights, p.bias
    n, c, h, wd = x.shape
    out_c, _, k, _ = w.shape
    s, pad = p.stride, p.padding
    ho = (h + 2 * pad - k) // s + 1
    wo = (wd + 2 * pad - k) // s + 1
    hp, wp = h + 2 * pad, wd + 2 * pad
    cols = _windows(_padded(x.data, pad), k, s, ho, wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(out_c, -1)
    out = cols @ wmat.T
    out += b.data
    out = out.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2)

    def _backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, out_c)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gm.T @ cols).reshape(out_c, k, k, c).transpose(0, 3, 1, 2)
        if b.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, k, k, c)
            dsrc = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dsrc[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
            gx = dsrc[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return make_node(out, [x, w, b], _backward, "conv2d")


def _conv_tiled(x: Tensor, p: ConvParams) -> Tensor:
    # A stride-s, k x k conv on a padded input whose sides divide by s equals
    # a unit-stride (k/s) x (k/s) conv on the space-to-depth rearranged input.
    # The unit-stride conv runs one small matmul per tap on the flattened
    # padded grid, where a spatial shift is a constant row offset.
    w, b = p.weights, p.bias
    n, c, h, wd = x.shape
    out_c, _, k, _ = w.shape
    s, pad = p.stride, p.padding
    kt = k // s
    hp, wp = h + 2 * pad, wd + 2 * pad
    hg, wg = hp // s, wp // s
    cg = c * s * s
    ho, wo = hg - kt + 1, wg - kt + 1
    src = _padded(x.data, pad)
    if s > 1:
        src = src.reshape(n, hg, s, wg, s, c).transpose(0, 1, 3, 2, 4, 5)
    flat = np.ascontiguousarray(src).reshape(-1, cg)
    del src
    # taps[a*kt+b] : [(di, dj, c), out] = W[out, c, s*a+di, s*b+dj]
    taps = np.ascontiguousarray(w.data.reshape(out_c, c, kt, s, kt, s).transpose(2, 4, 3, 5, 1, 0)
                                .reshape(kt * kt, cg, out_c))
    rows = flat.shape[0]
    offsets = [a * wg + bb for a in range(kt) for bb in range(kt)]
    grid = np.zeros((rows, out_c), dtype=x.dtype)
    for t, off in enumerate(offsets):
        grid[:rows - off] += flat[off:] @ taps[t]
    out = grid.reshape(n, hg, wg, out_c)[:, :ho, :wo, :]
    out = out + b.data
    del grid

    def _backward(g):
        gn = g.transpose(0, 2, 3, 1)
        gx = gw = gb = None
        if b.requires_grad:
            gb = gn.sum(axis=(0, 1, 2))
        if not (w.requires_grad or x.requires_grad):
            return gx, gw, gb
        gg = np.zeros((n, hg, wg, out_c), dtype=g.dtype)
        gg[:, :ho, :wo, :] = gn
        gg = gg.reshape(-1, out_c)
        if w.requires_grad:
            dt = np.empty((kt * kt, cg, out_c), dtype=g.dtype)
            for t, off in enumerate(offsets):
                dt[t] = flat[off:].T @ gg[:rows - off]
            gw = (dt.reshape(kt, kt, s, s, c, out_c).transpose(5, 4, 0, 2, 1, 3)
                  .reshape(out_c, c, k, k))
        if x.requires_grad:
            dflat = np.zeros((rows, cg), dtype=g.dtype)
            for t, off in enumerate(offsets):
                dflat[off:] += gg[:rows - off] @ taps[t].T
            dsrc = dflat.reshape(n, hg, wg, s, s, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, hp, wp, c)
            gx = dsrc[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return make_node(out.transpose(0, 3, 1, 2), [x, w, b], _backward, "conv2d")


def resize2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2; each pixel becomes a 2x2 block."""
    if x.data.ndim != 4:
        raise ShapeError(f"resize2x expects a 4-D input, got {list(x.shape)}")
    n, c, h, w = x.shape
    src = x.data.transpose(0, 2, 3, 1)
    out = np.broadcast_to(src[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def _backward(g):
        gn = g.transpose(0, 2, 3, 1).reshape(n, h, 2, w, 2, c)
        return (gn.sum(axis=(2, 4)).transpose(0, 3, 1, 2),)

    return make_node(out.transpose(0, 3, 1, 2), [x], _backward, "resize2x")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    d = x.data
    k = d.dtype.type(slope)
    out = np.maximum(d, d * k)
    factor = (d >= 0).astype(d.dtype)
    factor *= 1 - k
    factor += k

    def _backward(g):
        return (g * factor,)

    return make_node(out, [x], _backward, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    half = d.dtype.type(0.5)
    # tanh form saturates cleanly instead of overflowing exp.
    out = half * (np.tanh(d * half) + 1)

    def _backward(g):
        return (g * out * (1 - out),)

    return make_node(out, [x], _backward, "sigmoid")


def _rows(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C); a view for channels-last memory."""
    return a.transpose(0, 2, 3, 1).reshape(-1, a.shape[1])


def _unrows(r: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    return r.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def batch_norm(x: Tensor, p: BatchNormParams) -> Tensor:
    """Per-channel normalization over (N, H, W), then gamma * xhat + beta."""
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4-D input, got {list(x.shape)}")
    n, c, h, w = x.shape
    gamma, beta = p.gamma, p.beta
    xr = _rows(x.data)
    m = xr.shape[0]
    if p.training:
        if m < 2:
            raise ShapeError("batch_norm in train mode needs batch*H*W >= 2")
        mean = xr.mean(axis=0)
        xc = xr - mean
        var = np.einsum("ij,ij->j", xc, xc) / m
        inv_std = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
        xhat = xc
        xhat *= inv_std
        if p.track_running_stats:
            mom = p.momentum
            p.running_mean = ((1 - mom) * p.running_mean + mom * mean).astype(p.running_mean.dtype)
            p.running_var = ((1 - mom) * p.running_var + mom * var * (m / (m - 1))).astype(p.running_var.dtype)
    else:
        inv_std = (1.0 / np.sqrt(p.running_var + p.eps)).astype(x.dtype)
        xhat = (xr - p.running_mean.astype(x.dtype)) * inv_std
    out = xhat * gamma.data + beta.data
    training = p.training

    def _backward(g):
        gr = _rows(g)
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = np.einsum("ij,ij->j", gr, xhat)
        if beta.requires_grad:
            gb = gr.sum(axis=0)
        if x.requires_grad:
            k = gamma.data * inv_std
            if training:
                s1 = gr.mean(axis=0)
                s2 = np.einsum("ij,ij->j", gr, xhat) / m
                gx = (gr - s1 - xhat * s2) * k
            else:
                gx = gr * k
            gx = _unrows(gx, (n, c, h, w))
        return gx, gg, gb

    return make_node(_unrows(out, (n, c, h, w)), [x, gamma, beta], _backward, "batch_norm")


# ---------------------------------------------------------------------------
# parameters


def new_conv(rng: np.random.Generator, in_c: int, out_c: int, k: int, stride: int, padding: int = 1,
             std: float = 0.02) -> ConvParams:
    dtype = default_dtype()
    w = rng.normal(0.0, std, size=(out_c, in_c, k, k)).astype(dtype)
    return ConvParams(Tensor(w, True), Tensor(np.zeros(out_c, dtype=dtype), True), stride, padding)


def new_batch_norm(c: int, eps: float = 1e-5, momentum: float = 0.1) -> BatchNormParams:
    dtype = default_dtype()
    return BatchNormParams(
        Tensor(np.ones(c, dtype=dtype), True),
        Tensor(np.zeros(c, dtype=dtype), True),
        np.zeros(c, dtype=dtype),
        np.ones(c, dtype=dtype),
        eps,
        momentum,
    )


@dataclass
class OptimState:
    """RMSProp hyper-parameters and one squared-gradient average per parameter."""

    lr: float
    alpha: float = 0.9
    eps: float = 1e-8
    sq_avg: dict = field(default_factory=dict)

    def reset(self):
        self.sq_avg.clear()


def rmsprop_step(params: Sequence[Tensor], state: OptimState, sign: int = -1):
    """sign=-1 descends the loss, sign=+1 ascends it."""
    if sign not in (-1, 1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    for p in params:
        g = p._grad
        if g is None:
            raise ValueError(f"parameter {p!r} has no gradient")
        v = state.sq_avg.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
        v = state.alpha * v + (1 - state.alpha) * (g * g)
        v = v.astype(p.dtype, copy=False)
        state.sq_avg[id(p)] = v
        step = (state.lr * g / (np.sqrt(v) + state.eps)).astype(p.dtype, copy=False)
        if sign > 0:
            p.data += step
        else:
            p.data -= step


def clip_weights(params: Sequence[Tensor], c: float):
    if c <= 0:
        raise ValueError(f"clip range must be positive, got {c}")
    for p in params:
        # Round the bound toward zero in the parameter's dtype so |p| <= c holds exactly.
        b = p.dtype.type(c)
        if float(b) > c:
            b = np.nextafter(b, p.dtype.type(0))
        np.clip(p.data, -b, b, out=p.data)


def zero_grads(params: Sequence[Tensor]):
    for p in params:
        p.zero_grad()
