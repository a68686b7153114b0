"""Dense NCHW kernels shared by the float training engine and the integer executor.

All functions are dtype-preserving: feed int64 arrays and only integer
multiply/add is performed.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Return patches of shape ``(N, Ho, Wo, C*kh*kw)`` in C-major, then kh, kw order."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0):
    """Cross-correlation; returns ``(out, cols)`` with ``cols`` kept for backward."""
    o, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise ValueError(f"conv expects {c} input channels, got {x.shape[1]}")
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ w.reshape(o, -1).T
    return out.transpose(0, 3, 1, 2), cols


def conv2d_backward(dout, cols, w, x_shape, stride, padding):
    o, c, kh, kw = w.shape
    n, _, h, wd = x_shape
    d = dout.transpose(0, 2, 3, 1)
    ho, wo = d.shape[1], d.shape[2]
    dw = (d.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)).reshape(w.shape)
    dcols = (d @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw


def maxpool(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"maxpool window {k} does not tile {h}x{w}")
    return x.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5))


def maxpool_backward(dout: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // k, w // k, k * k)
    arg = flat.argmax(axis=-1)
    dflat = np.zeros_like(flat, dtype=dout.dtype)
    np.put_along_axis(dflat, arg[..., None], dout[..., None], axis=-1)
    return (
        dflat.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
    )


def upsample_nearest(x: np.ndarray, factor: int = 2) -> np.ndarray:
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_backward(dout: np.ndarray, factor: int = 2) -> np.ndarray:
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))
