"""Pure numpy implementations of the pooling and convolution kernels.

Every function works on contiguous 4-D arrays laid out as (N, C, H, W).
The compiled module ``robusteval._kernels`` exports the same names with
the same semantics; ``robusteval.kernels`` picks one at import time.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, wh, ww, sh, sw):
    win = sliding_window_view(x, (wh, ww), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def maxpool_forward(x, wh, ww, sh, sw):
    n, c, h, w = x.shape
    win = _windows(x, wh, ww, sh, sw)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, wh * ww)
    # argmax returns the first occurrence, which is the tie rule we want
    arg = np.argmax(flat, axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * sh + arg // ww
    cols = np.arange(wo)[None, :] * sw + arg % ww
    routing = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(y), routing


def maxpool_backward_exact(gy, routing, h, w):
    n, c = gy.shape[:2]
    gx = np.zeros((n, c, h * w), dtype=gy.dtype)
    flat_gy = gy.reshape(n, c, -1)
    flat_rt = routing.reshape(n, c, -1)
    for i in range(n):
        for j in range(c):
            np.add.at(gx[i, j], flat_rt[i, j], flat_gy[i, j])
    return gx.reshape(n, c, h, w)


def maxpool_backward_soft(x, gy, wh, ww, sh, sw, tau):
    n, c, h, w = x.shape
    win = _windows(x, wh, ww, sh, sw)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, wh * ww) / tau
    flat = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    weights = e / e.sum(axis=-1, keepdims=True)
    gx = np.zeros_like(x, dtype=gy.dtype)
    for a in range(wh):
        for b in range(ww):
            contrib = gy * weights[..., a * ww + b]
            gx[:, :, a:a + sh * (ho - 1) + 1:sh, b:b + sw * (wo - 1) + 1:sw] += contrib
    return gx


def im2col(x, k):
    """(N, C, H, W) -> (N, H-k+1, W-k+1, C*k*k), channel-major patches."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    win = win.transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(win).reshape(n, h - k + 1, w - k + 1, c * k * k)


def col2im(cols, c, h, w, k):
    n, ho, wo, _ = cols.shape
    patches = cols.reshape(n, ho, wo, c, k, k)
    gx = np.zeros((n, c, h, w), dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            gx[:, :, a:a + ho, b:b + wo] += patches[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    return gx
