"""Differentiable operations on :class:`~sketchgan.tensor.Tensor`.

Convolutions go through an im2col buffer and a single BLAS matmul.  The
transposed convolution is the exact adjoint of ``conv2d``: its forward pass is
the input-gradient of a strided convolution and vice versa.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import DimensionError, Tensor, make_output

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Return ``(cols, ho, wo)`` with cols shaped (c*kh*kw, n*ho*wo).

    Rows are ordered (c, kh, kw) to match ``weight.reshape(out_c, -1)``;
    columns are ordered (n, ho, wo).
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back onto an (n, c, h, w) image."""
    n, c, h, w = shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _to_rows(a: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> (c, n*h*w)."""
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def _from_rows(a: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(c, n*h*w) -> (n, c, h, w)."""
    return a.reshape(-1, n, h, w).transpose(1, 0, 2, 3)


# Column buffers are built a few samples at a time so they stay cache-resident;
# at 64x64 with 9x9 kernels a full-batch buffer is hundreds of MB.
CHUNK_ELEMENTS = 1 << 20


def _chunks(n: int, per_sample: int):
    step = max(1, CHUNK_ELEMENTS // max(1, per_sample))
    for s in range(0, n, step):
        yield slice(s, min(n, s + step))


def _conv_forward(x: np.ndarray, wmat: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Strided convolution with weight matrix (out_c, in_c*kh*kw)."""
    n, _, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    out = np.empty((n, wmat.shape[0], ho, wo))
    for sl in _chunks(n, wmat.shape[1] * ho * wo):
        cols, _, _ = _im2col(x[sl], kh, kw, stride, pad)
        out[sl] = _from_rows(wmat @ cols, sl.stop - sl.start, ho, wo)
    return out


def _conv_input_grad(gy: np.ndarray, wmat: np.ndarray, in_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`_conv_forward` with respect to its input."""
    n, _, ho, wo = gy.shape
    out = np.empty((n,) + tuple(in_shape[1:]))
    for sl in _chunks(n, wmat.shape[1] * ho * wo):
        m = sl.stop - sl.start
        out[sl] = _col2im(wmat.T @ _to_rows(gy[sl]), (m,) + tuple(in_shape[1:]), kh, kw, stride, pad)
    return out


def _conv_weight_grad(x: np.ndarray, gy: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Gradient of :func:`_conv_forward` with respect to its weight matrix."""
    n, _, ho, wo = gy.shape
    gw = np.zeros((gy.shape[1], x.shape[1] * kh * kw))
    for sl in _chunks(n, gw.shape[1] * ho * wo):
        cols, _, _ = _im2col(x[sl], kh, kw, stride, pad)
        gw += _to_rows(gy[sl]) @ cols.T
    return gw


def _check_conv_args(x: Tensor, weight: Tensor, bias: Optional[Tensor], in_c: int, out_c: int, step: int, pad: int):
    if x.values.ndim != 4:
        raise DimensionError(f"input must be 4-D (n, c, h, w), got {x.shape}", axis="rank")
    if weight.values.ndim != 4:
        raise DimensionError(f"weight must be 4-D, got {weight.shape}", axis="rank")
    if x.shape[1] != in_c:
        raise DimensionError(
            f"input has {x.shape[1]} channels but weight expects {in_c}", axis="channel"
        )
    if bias is not None and bias.values.shape != (out_c,):
        raise DimensionError(f"bias shape {bias.shape} != ({out_c},)", axis="out_channel")
    if step < 1:
        raise ValueError(f"stride must be >= 1, got {step}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    weight is (out_c, in_c, kh, kw); output is
    (n, out_c, (h + 2*pad - kh)//stride + 1, ...), i.e. ceil(h/stride) when
    pad = kh//2 and kh is odd.
    """
    out_c, in_c, kh, kw = weight.shape
    _check_conv_args(x, weight, bias, in_c, out_c, stride, pad)
    h, w = x.shape[2:]
    if conv_output_size(h, kh, stride, pad) < 1 or conv_output_size(w, kw, stride, pad) < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]}", axis="spatial")

    xv = x.values
    wmat = weight.values.reshape(out_c, -1)
    out = _conv_forward(xv, wmat, kh, kw, stride, pad)
    if bias is not None:
        out += bias.values[None, :, None, None]

    def back(gy):
        gx = _conv_input_grad(gy, wmat, xv.shape, kh, kw, stride, pad) if x.requires_grad else None
        gw = _conv_weight_grad(xv, gy, kh, kw, stride, pad).reshape(weight.shape) if weight.requires_grad else None
        gb = gy.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, inputs, back, "conv2d")


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, up: int = 2, pad: Optional[int] = None) -> Tensor:
    """Fractionally strided convolution producing exactly ``up`` times the input size.

    weight is (out_c, in_c, kh, kw).  The op equals the adjoint of
    ``conv2d(., weight.transpose(1, 0, 2, 3), stride=up, pad=pad)`` taken on an
    input of spatial size (up*h, up*w); ``pad`` defaults to kh//2.
    """
    out_c, in_c, kh, kw = weight.shape
    if pad is None:
        pad = kh // 2
    _check_conv_args(x, weight, bias, in_c, out_c, up, pad)
    n, _, h, w = x.shape
    H, W = up * h, up * w
    if conv_output_size(H, kh, up, pad) != h or conv_output_size(W, kw, up, pad) != w:
        raise DimensionError(
            f"kernel {kh}x{kw} with pad {pad} cannot upsample {h}x{w} by exactly {up}", axis="spatial"
        )

    xv = x.values
    # weight matrix of the strided convolution this op is the adjoint of
    wmat = weight.values.transpose(1, 0, 2, 3).reshape(in_c, out_c * kh * kw)
    out = _conv_input_grad(xv, wmat, (n, out_c, H, W), kh, kw, up, pad)
    if bias is not None:
        out += bias.values[None, :, None, None]

    def back(gy):
        gx = _conv_forward(gy, wmat, kh, kw, up, pad) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = _conv_weight_grad(gy, xv, kh, kw, up, pad)
            gw = gw.reshape(in_c, out_c, kh, kw).transpose(1, 0, 2, 3)
        gb = gy.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, inputs, back, "conv2d_transpose")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    channels: int
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalisation over (n, h, w).

    Train mode uses batch statistics (biased variance) and folds them into
    the running statistics with ``running = momentum*running + (1-momentum)*batch``.
    Eval mode uses the running statistics.
    """
    if x.values.ndim != 4:
        raise DimensionError(f"batch_norm expects (n, c, h, w), got {x.shape}", axis="rank")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)", axis="channel")
    xv = x.values
    gam = gamma.values
    bcast = (None, slice(None), None, None)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise DimensionError("train-mode batch_norm needs n*h*w >= 2", axis="batch")
        mean = np.einsum("nchw->c", xv) / m
        xhat = xv - mean[bcast]
        var = np.einsum("nchw,nchw->c", xhat, xhat) / m
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat *= inv_std[bcast]
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var

        def back(gy):
            gbeta = np.einsum("nchw->c", gy)
            ggamma = np.einsum("nchw,nchw->c", gy, xhat)
            gx = None
            if x.requires_grad:
                # (gamma/std) * (gy - mean(gy) - xhat * mean(gy * xhat))
                gx = xhat * (ggamma / m)[bcast]
                gx += (gbeta / m)[bcast]
                np.subtract(gy, gx, out=gx)
                gx *= (gam * inv_std)[bcast]
            return gx, ggamma, gbeta

    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xv - state.running_mean[bcast]) * inv_std[bcast]

        def back(gy):
            gx = gy * (gam * inv_std)[bcast] if x.requires_grad else None
            return gx, np.einsum("nchw,nchw->c", gy, xhat), np.einsum("nchw->c", gy)

    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    out = xhat * gam[bcast]
    out += beta.values[bcast]
    return make_output(out, (x, gamma, beta), back, "batch_norm")


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``y = flatten(x) @ weight.T + bias``; weight is (out, in)."""
    n = x.shape[0]
    xf = x.values.reshape(n, -1)
    if weight.values.ndim != 2:
        raise DimensionError(f"weight must be a matrix, got {weight.shape}", axis="rank")
    out_f, in_f = weight.shape
    if xf.shape[1] != in_f:
        raise DimensionError(f"input has {xf.shape[1]} features, weight expects {in_f}", axis="features")
    if bias is not None and bias.shape != (out_f,):
        raise DimensionError(f"bias shape {bias.shape} != ({out_f},)", axis="out_features")
    y = xf @ weight.values.T
    if bias is not None:
        y = y + bias.values
    in_shape = x.shape

    def back(gy):
        gx = (gy @ weight.values).reshape(in_shape) if x.requires_grad else None
        gw = gy.T @ xf if weight.requires_grad else None
        gb = gy.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(y, inputs, back, "fully_connected")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0.0)
    # subgradient at 0 is 0
    return make_output(out, (x,), lambda gy: (gy * (out > 0),), "relu")


_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = 1.0 - np.finfo(np.float64).epsneg


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the output strictly inside (0, 1) where float64 would round to 0 or 1
    np.clip(s, _SIGMOID_LO, _SIGMOID_HI, out=s)
    return make_output(s, (x,), lambda gy: (gy * s * (1.0 - s),), "sigmoid")


def reshape(x: Tensor, shape) -> Tensor:
    in_shape = x.shape
    return make_output(x.values.reshape(shape), (x,), lambda gy: (gy.reshape(in_shape),), "reshape")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    return make_output(a.values + b.values, (a, b), lambda gy: (gy, gy), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    return make_output(av * bv, (a, b), lambda gy: (gy * bv, gy * av), "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    return make_output(x.values * factor, (x,), lambda gy: (gy * factor,), "scale")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_output(np.asarray(x.values.sum()), (x,), lambda gy: (np.broadcast_to(gy, shape),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, size = x.shape, x.size
    return make_output(
        np.asarray(x.values.mean()), (x,), lambda gy: (np.broadcast_to(gy / size, shape),), "mean"
    )


def clamped_log(x: Tensor, lo: float = 1e-7, hi: float = 1.0 - 1e-7) -> Tensor:
    """``log(clip(x, lo, hi))``.

    The gradient is 1/clip(x), also outside the clip range, so a saturated
    sigmoid still receives a (bounded) learning signal.
    """
    c = np.clip(x.values, lo, hi)
    return make_output(np.log(c), (x,), lambda gy: (gy / c,), "clamped_log")


def clamped_log1m(x: Tensor, lo: float = 1e-7, hi: float = 1.0 - 1e-7) -> Tensor:
    """``log(1 - clip(x, lo, hi))`` with the same gradient convention as :func:`clamped_log`."""
    c = np.clip(x.values, lo, hi)
    return make_output(np.log1p(-c), (x,), lambda gy: (-gy / (1.0 - c),), "clamped_log1m")
