"""Differentiable numeric kernels built on :mod:`ila_lab.autodiff`.

Convolutions are written as explicit loops over kernel taps. Taps are
accumulated in row-major order, which keeps the K=1 unit-weight case a
bit-exact identity and the all-ones K=2/stride-2 case a bit-exact sum pool.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .autodiff import Tensor, make_result, matmul, record_flops
from .errors import DimensionError, InputError

# FLOPs charged per element by the non-MAC kernels (MACs count as 2).
NORM_FLOPS_PER_ELEMENT = 5
SOFTMAX_FLOPS_PER_ELEMENT = 3
ACTIVATION_FLOPS_PER_ELEMENT = 1

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF from ``erf``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf
    record_flops("gelu", x.size * ACTIVATION_FLOPS_PER_ELEMENT)

    def _bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(out, (x,), _bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    record_flops("softmax", x.size * SOFTMAX_FLOPS_PER_ELEMENT)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    record_flops("layer_norm", x.size * NORM_FLOPS_PER_ELEMENT)

    def _bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), _bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over ``[B, C, H, W]``, per channel.

    In training mode the running statistics are updated in place with
    ``running = (1 - momentum) * running + momentum * batch_stat`` (the
    variance uses the unbiased estimator when more than one value is seen).
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm: expected [B, {gamma.shape[0]}, H, W], got {x.shape}")
    c = x.shape[1]
    shape = (1, c, 1, 1)
    record_flops("batch_norm", x.size * NORM_FLOPS_PER_ELEMENT)
    if not training:
        rstd = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * rstd).reshape(shape)
        xhat = (x.data - running_mean.reshape(shape)) * rstd.reshape(shape)
        out = (x.data - running_mean.reshape(shape)) * scale + beta.data.reshape(shape)

        def _bw_eval(g):
            gx = g * scale if x.requires_grad else None
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            return gx, ggamma, gbeta

        return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), _bw_eval)

    n = x.size // c
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    unbiased = var.reshape(c) * (n / (n - 1)) if n > 1 else var.reshape(c)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(c)
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def _bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3))
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), _bw)


def cross_entropy_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def _bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), _bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out ``[in, out]``."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


# ---------------------------------------------------------------- convolutions


def _as_batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected [C, H, W] or [B, C, H, W] input, got {x.shape}")


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_window(shape, k: int, stride: int, padding: int, op: str) -> None:
    if stride < 1:
        raise DimensionError(f"{op}: stride must be >= 1, got {stride}")
    h, w = shape[-2:]
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(
            f"{op}: kernel {k}x{k} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )


def _pad(xb: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return xb
    return np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel KxK convolution of ``[B, C, H, W]`` (or ``[C, H, W]``) with ``w[C, K, K]``."""
    xb, squeeze = _as_batched(x)
    if w.ndim != 3 or w.shape[1] != w.shape[2] or w.shape[0] != xb.shape[1]:
        raise DimensionError(f"depthwise_conv2d: weight {w.shape} incompatible with input {x.shape}")
    k = w.shape[1]
    _check_window(xb.shape, k, stride, padding, "depthwise_conv2d")
    b, c, h, wd = xb.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd, k, stride, padding)
    xp = _pad(xb, padding)
    out = np.zeros((b, c, ho, wo), dtype=np.result_type(xb, w.data))
    for i in range(k):
        for j in range(k):
            hs = slice(i, i + stride * (ho - 1) + 1, stride)
            ws = slice(j, j + stride * (wo - 1) + 1, stride)
            out += xp[:, :, hs, ws] * w.data[:, i, j][None, :, None, None]
    record_flops("depthwise_conv2d", 2 * out.size * k * k)

    def _bw(g):
        if squeeze:
            g = g[None]
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    hs = slice(i, i + stride * (ho - 1) + 1, stride)
                    ws = slice(j, j + stride * (wo - 1) + 1, stride)
                    gxp[:, :, hs, ws] += g * w.data[:, i, j][None, :, None, None]
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
            gx = gx[0] if squeeze else gx
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                for j in range(k):
                    hs = slice(i, i + stride * (ho - 1) + 1, stride)
                    ws = slice(j, j + stride * (wo - 1) + 1, stride)
                    gw[:, i, j] = (g * xp[:, :, hs, ws]).sum(axis=(0, 2, 3))
        return gx, gw

    return make_result(out[0] if squeeze else out, (x, w), _bw)


def pointwise_conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution: ``w[C_out, C_in]`` applied at every spatial position."""
    xb, squeeze = _as_batched(x)
    if w.ndim != 2 or w.shape[1] != xb.shape[1]:
        raise DimensionError(f"pointwise_conv2d: weight {w.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"pointwise_conv2d: bias {bias.shape} != ({w.shape[0]},)")
    b, cin, h, wd = xb.shape
    cout = w.shape[0]
    flat = xb.reshape(b, cin, h * wd)
    out = np.matmul(w.data, flat)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(b, cout, h, wd)
    record_flops("pointwise_conv2d", 2 * out.size * cin + (out.size if bias is not None else 0))

    def _bw(g):
        gb = g[None] if squeeze else g
        gflat = gb.reshape(b, cout, h * wd)
        gx = gw = gbias = None
        if x.requires_grad:
            gx = np.matmul(w.data.T, gflat).reshape(b, cin, h, wd)
            gx = gx[0] if squeeze else gx
        if w.requires_grad:
            gw = np.einsum("boq,biq->oi", gflat, flat)
        if bias is not None and bias.requires_grad:
            gbias = gflat.sum(axis=(0, 2))
        return gx, gw, gbias

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out[0] if squeeze else out, parents, _bw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense KxK convolution with ``w[C_out, C_in, K, K]`` (no bias)."""
    xb, squeeze = _as_batched(x)
    if w.ndim != 4 or w.shape[1] != xb.shape[1] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: weight {w.shape} incompatible with input {x.shape}")
    cout, cin, k, _ = w.shape
    _check_window(xb.shape, k, stride, padding, "conv2d")
    b, _, h, wd = xb.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd, k, stride, padding)
    xp = _pad(xb, padding)
    out = np.zeros((b, cout, ho, wo), dtype=np.result_type(xb, w.data))
    taps = []
    for i in range(k):
        for j in range(k):
            hs = slice(i, i + stride * (ho - 1) + 1, stride)
            ws = slice(j, j + stride * (wo - 1) + 1, stride)
            taps.append((i, j, hs, ws))
            out += np.einsum("oc,bchw->bohw", w.data[:, :, i, j], xp[:, :, hs, ws])
    record_flops("conv2d", 2 * out.size * cin * k * k)

    def _bw(g):
        if squeeze:
            g = g[None]
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, j, hs, ws in taps:
                gxp[:, :, hs, ws] += np.einsum("oc,bohw->bchw", w.data[:, :, i, j], g)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
            gx = gx[0] if squeeze else gx
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i, j, hs, ws in taps:
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, xp[:, :, hs, ws])
        return gx, gw

    return make_result(out[0] if squeeze else out, (x, w), _bw)
