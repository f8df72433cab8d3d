"""Convolution, pooling, local contrast normalization and dense layers.

All layers take a batch ``[N, C, H, W]`` (or a single ``[C, H, W]`` image)
and record their backward rules on the active tape.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..tensor import Tensor, expand, maximum, mean, mul, record, relu, sqrt, tsum

__all__ = ["conv2d", "maxpool2", "lcn", "linear", "relu", "gaussian_window"]


def _correlate(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of padded ``xp [N,C,H,W]`` with ``w [O,C,k,k]``."""
    k = w.shape[-1]
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,Ho,Wo,k,k
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _as_batch(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ValueError(f"expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, pad: int = 2) -> Tensor:
    """Stride-1 cross-correlation over a zero-padded input.

    Output extent is ``H + 2*pad - k + 1``.
    """
    xb, single = _as_batch(x)
    out_ch, in_ch, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"conv2d: square kernels only, got {weight.shape}")
    if xb.shape[1] != in_ch:
        raise ValueError(f"conv2d: input has {xb.shape[1]} channels, weight expects {in_ch}")
    if bias.shape != (out_ch,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {out_ch} filters")
    if min(xb.shape[2:]) + 2 * pad < k:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {xb.shape[2:]}")
    n, _, h, w = xb.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # im2col rows ordered (n, i, j), columns (c, u, v); reused for dW
    cols = (sliding_window_view(xp, (k, k), axis=(2, 3))
            .transpose(0, 2, 3, 1, 4, 5)
            .reshape(n * ho * wo, in_ch * k * k))
    out = (cols @ weight.data.reshape(out_ch, -1).T + bias.data)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2))

    def bw(g):
        gb4 = g[None] if single else g
        gmat = gb4.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gbias = gmat.sum(axis=0)
        if not x.requires_grad:
            return None, gw, gbias
        gpad = np.pad(gb4, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gxp = _correlate(gpad, np.ascontiguousarray(wflip))
        gx = gxp[:, :, pad:pad + h, pad:pad + w]
        return (gx[0] if single else gx), gw, gbias

    return record("conv2d", out[0] if single else out, (x, weight, bias), bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped.

    The gradient goes to the first maximal cell of each window (row-major).
    """
    xb, single = _as_batch(x)
    n, c, h, w = xb.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2: spatial extent {h}x{w} smaller than the window")
    ho, wo = h // 2, w // 2
    win = (xb[:, :, :2 * ho, :2 * wo]
           .reshape(n, c, ho, 2, wo, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, ho, wo, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        g4 = g[None] if single else g
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g4[..., None], axis=-1)
        gx = np.zeros_like(xb)
        gx[:, :, :2 * ho, :2 * wo] = (gw.reshape(n, c, ho, wo, 2, 2)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(n, c, 2 * ho, 2 * wo))
        return (gx[0] if single else gx,)

    return record("maxpool2", out[0] if single else out, (x,), bw)


@lru_cache(maxsize=None)
def gaussian_window(size: int) -> np.ndarray:
    """Separable Gaussian of width ``size`` with sigma = size/4, summing to 1."""
    sigma = 0.25 * size
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _pads(size: int) -> tuple[int, int]:
    lo = (size - 1) // 2
    return lo, size - 1 - lo


def _filter_map(x: Tensor, kernel: np.ndarray) -> Tensor:
    """'Same'-size correlation of ``x [N,1,H,W]`` with a fixed kernel."""
    k = kernel.shape[0]
    lo, hi = _pads(k)
    w = kernel.astype(x.data.dtype)[None, None]
    xp = np.pad(x.data, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    out = _correlate(xp, w)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (hi, lo), (hi, lo)))
        return (_correlate(gp, np.ascontiguousarray(w[:, :, ::-1, ::-1])),)

    return record("filter2d", out, (x,), bw)


@lru_cache(maxsize=64)
def _coverage(size: int, h: int, w: int) -> np.ndarray:
    """Kernel mass falling inside the image at each position."""
    lo, hi = _pads(size)
    ones = np.pad(np.ones((1, 1, h, w)), ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    return _correlate(ones, gaussian_window(size)[None, None])


def lcn(x: Tensor, kernel: int = 7, eps: float = 1e-4) -> Tensor:
    """Subtractive then divisive local contrast normalization.

    The local mean and local standard deviation are Gaussian-weighted over
    the window and across all channels, renormalized by the kernel mass that
    lies inside the image so borders are not darkened.  The divisor is
    max(local std, per-image mean of local std, eps).
    """
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    n, c, h, w = x.shape
    win = gaussian_window(kernel)
    norm = Tensor(np.broadcast_to(1.0 / (c * _coverage(kernel, h, w)), (n, 1, h, w)))

    local_mean = mul(_filter_map(tsum(x, axis=1, keepdims=True), win), norm)
    centered = x - expand(local_mean, x.shape)
    local_var = mul(_filter_map(tsum(mul(centered, centered), axis=1, keepdims=True), win), norm)
    local_std = sqrt(local_var)
    image_std = expand(mean(local_std, axis=(1, 2, 3), keepdims=True), local_std.shape)
    divisor = maximum(maximum(local_std, image_std), eps)
    out = centered / expand(divisor, x.shape)
    return out.reshape(out.shape[1:]) if single else out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x [N, in]`` or a single ``[in]`` vector."""
    single = x.ndim == 1
    xb = x.data[None] if single else x.data
    if xb.ndim != 2 or xb.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = xb @ weight.data.T + bias.data

    def bw(g):
        g2 = g[None] if single else g
        gx = g2 @ weight.data
        return (gx[0] if single else gx), g2.T @ xb, g2.sum(axis=0)

    return record("linear", out[0] if single else out, (x, weight, bias), bw)
