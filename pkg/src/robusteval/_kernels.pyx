# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pooling and convolution kernels (same contracts as _kernels_py)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

ctypedef fused real:
    float
    double


def _maxpool_forward(real[:, :, :, ::1] x, Py_ssize_t wh, Py_ssize_t ww,
                     Py_ssize_t sh, Py_ssize_t sw, real[:, :, :, ::1] y,
                     cnp.int64_t[:, :, :, ::1] routing):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], w = x.shape[3]
    cdef Py_ssize_t ho = y.shape[2], wo = y.shape[3]
    cdef Py_ssize_t i, j, p, q, a, b, r0, c0, best_idx
    cdef real best, v
    with nogil:
        for i in range(n):
            for j in range(c):
                for p in range(ho):
                    r0 = p * sh
                    for q in range(wo):
                        c0 = q * sw
                        best = x[i, j, r0, c0]
                        best_idx = r0 * w + c0
                        for a in range(wh):
                            for b in range(ww):
                                v = x[i, j, r0 + a, c0 + b]
                                if v > best:
                                    best = v
                                    best_idx = (r0 + a) * w + c0 + b
                        y[i, j, p, q] = best
                        routing[i, j, p, q] = best_idx


def maxpool_forward(x, wh, ww, sh, sw):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = (h - wh) // sh + 1
    wo = (w - ww) // sw + 1
    y = np.empty((n, c, ho, wo), dtype=x.dtype)
    routing = np.empty((n, c, ho, wo), dtype=np.int64)
    _maxpool_forward(x, wh, ww, sh, sw, y, routing)
    return y, routing


def _maxpool_backward_exact(real[:, :, :, ::1] gy, cnp.int64_t[:, :, :, ::1] routing,
                            real[:, :, ::1] gx):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t i, j, p, q
    with nogil:
        for i in range(n):
            for j in range(c):
                for p in range(ho):
                    for q in range(wo):
                        gx[i, j, routing[i, j, p, q]] += gy[i, j, p, q]


def maxpool_backward_exact(gy, routing, h, w):
    gy = np.ascontiguousarray(gy)
    n, c = gy.shape[:2]
    gx = np.zeros((n, c, h * w), dtype=gy.dtype)
    _maxpool_backward_exact(gy, np.ascontiguousarray(routing, dtype=np.int64), gx)
    return gx.reshape(n, c, h, w)


def _maxpool_backward_soft(real[:, :, :, ::1] x, real[:, :, :, ::1] gy,
                           Py_ssize_t wh, Py_ssize_t ww, Py_ssize_t sh, Py_ssize_t sw,
                           double tau, real[:, :, :, ::1] gx, double[::1] buf):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t i, j, p, q, a, b, r0, c0, k
    cdef double m, s, v
    with nogil:
        for i in range(n):
            for j in range(c):
                for p in range(ho):
                    r0 = p * sh
                    for q in range(wo):
                        c0 = q * sw
                        m = x[i, j, r0, c0] / tau
                        for a in range(wh):
                            for b in range(ww):
                                v = x[i, j, r0 + a, c0 + b] / tau
                                if v > m:
                                    m = v
                        s = 0.0
                        k = 0
                        for a in range(wh):
                            for b in range(ww):
                                buf[k] = exp(x[i, j, r0 + a, c0 + b] / tau - m)
                                s += buf[k]
                                k += 1
                        k = 0
                        for a in range(wh):
                            for b in range(ww):
                                gx[i, j, r0 + a, c0 + b] += <real>(gy[i, j, p, q] * (buf[k] / s))
                                k += 1


def maxpool_backward_soft(x, gy, wh, ww, sh, sw, tau):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    gx = np.zeros_like(x)
    buf = np.empty(wh * ww, dtype=np.float64)
    _maxpool_backward_soft(x, gy, wh, ww, sh, sw, float(tau), gx, buf)
    return gx


def _im2col(real[:, :, :, ::1] x, Py_ssize_t k, real[:, :, :, ::1] cols):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t i, j, p, q, a, b, col
    with nogil:
        for i in range(n):
            for p in range(ho):
                for q in range(wo):
                    col = 0
                    for j in range(c):
                        for a in range(k):
                            for b in range(k):
                                cols[i, p, q, col] = x[i, j, p + a, q + b]
                                col += 1


def im2col(x, k):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    cols = np.empty((n, h - k + 1, w - k + 1, c * k * k), dtype=x.dtype)
    _im2col(x, k, cols)
    return cols


def _col2im(real[:, :, :, ::1] cols, Py_ssize_t k, real[:, :, :, ::1] gx):
    cdef Py_ssize_t n = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t c = gx.shape[1]
    cdef Py_ssize_t i, j, p, q, a, b, col
    with nogil:
        for i in range(n):
            for p in range(ho):
                for q in range(wo):
                    col = 0
                    for j in range(c):
                        for a in range(k):
                            for b in range(k):
                                gx[i, j, p + a, q + b] += cols[i, p, q, col]
                                col += 1


def col2im(cols, c, h, w, k):
    cols = np.ascontiguousarray(cols)
    gx = np.zeros((cols.shape[0], c, h, w), dtype=cols.dtype)
    _col2im(cols, k, gx)
    return gx
