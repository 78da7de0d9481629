"""Precision-aware loss primitives and (surrogate) derivatives.

Tensors are plain numpy arrays; their dtype is the precision tag. Loss
functions accept a single logit vector ``z`` of shape (K,) with an integer
label, or a batch of shape (N, K) with an integer array of labels, and return
scalars or (N,) arrays accordingly.

Two cross-entropy paths live here on purpose:

* ``cross_entropy_naive`` stores the softmax probabilities in the requested
  format before taking ``-log``. In binary32 the true-class probability of a
  confidently classified input rounds to exactly 1.0 and the loss (and the
  gradient derived from it) becomes exactly zero.
* ``cross_entropy_stable`` works in log space with binary64 accumulation and
  ``log1p`` for the residual term, so it stays positive.
"""

from __future__ import annotations

import enum
from typing import Callable

import numpy as np
from scipy.special import expit

from . import kernels

__all__ = [
    "Precision",
    "LossKind",
    "relu",
    "softplus_grad",
    "softmax",
    "cross_entropy_naive",
    "cross_entropy_naive_grad",
    "cross_entropy_stable",
    "cross_entropy_stable_grad",
    "margin_loss",
    "loss_and_grad",
    "pool_max_forward",
    "pool_backward",
    "finite_diff_grad",
]


class Precision(enum.Enum):
    BINARY32 = "binary32"
    BINARY64 = "binary64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.BINARY32 else np.dtype(np.float64)

    @classmethod
    def of(cls, arr) -> "Precision":
        return cls.BINARY32 if np.asarray(arr).dtype == np.float32 else cls.BINARY64


class LossKind(enum.Enum):
    CE_NAIVE = "ce_naive"
    CE_STABLE = "ce_stable"
    MARGIN = "margin"


def _batched(z, label):
    z = np.asarray(z)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape[0] != z2.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {z2.shape[0]} logit rows")
    k = z2.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes")
    return z2, labels, single


def _unbatch(value, single):
    return value[0] if single else value


def relu(x):
    """Return ``(max(0, x), d/dx)`` with derivative 0 at the kink."""
    x = np.asarray(x)
    y = np.maximum(x, 0).astype(x.dtype, copy=False)
    return y, (x > 0).astype(x.dtype)


def softplus_grad(x, tau: float):
    """Derivative of ``tau * softplus(x / tau)``, i.e. ``sigmoid(x / tau)``.

    Used as a smooth replacement for the ReLU derivative in backward passes.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = np.asarray(x)
    return expit(x / tau).astype(x.dtype, copy=False)


def softmax(z, precision: Precision | None = None, saturate: bool = False):
    """Softmax along the last axis, stored in ``precision``.

    By default the probabilities are computed with max-subtraction in binary64
    and rounded once to the target format, so each entry is (to within binary64
    error) the format value nearest the exact probability. With
    ``saturate=True`` the exponentials are taken directly in the target format
    without max-subtraction: large logits overflow to inf and the result holds
    NaN instead of being repaired.
    """
    z = np.asarray(z)
    precision = precision or Precision.of(z)
    if saturate:
        zp = z.astype(precision.dtype)
        with np.errstate(over="ignore", invalid="ignore"):
            e = np.exp(zp)
            return e / e.sum(axis=-1, keepdims=True)
    z64 = z.astype(np.float64)
    e = np.exp(z64 - z64.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).astype(precision.dtype)


def cross_entropy_naive(z, label, precision: Precision = Precision.BINARY32):
    """``-log(softmax(z)[label])`` with the probability stored in ``precision``.

    Returns exactly 0.0 when the stored probability is 1.0 and +inf when it
    underflows to 0.0.
    """
    z2, labels, single = _batched(z, label)
    p = softmax(z2, precision)[np.arange(len(labels)), labels]
    with np.errstate(divide="ignore"):
        loss = 0.0 - np.log(p)  # +0.0, never -0.0
    return _unbatch(loss, single)


def cross_entropy_naive_grad(z, label, precision: Precision = Precision.BINARY32):
    """Loss and logit gradient of the naive path.

    The gradient is back-propagated through the stored true-class
    probability: writing ``p = sigmoid(z[label] - lse_{j != label} z_j)``,
    ``dL/dz[label] = p - 1`` and ``dL/dz[j] = (1 - p) * q_j`` where ``q`` is the
    softmax over the competitors. A stored ``p == 1.0`` therefore yields an
    exactly zero gradient together with an exactly zero loss.
    """
    z2, labels, single = _batched(z, label)
    dt = precision.dtype
    rows = np.arange(len(labels))
    p = softmax(z2, precision)[rows, labels]
    with np.errstate(divide="ignore"):
        loss = 0.0 - np.log(p)
    others = z2.astype(np.float64).copy()
    others[rows, labels] = -np.inf
    q = softmax(others, precision)
    residual = (dt.type(1) - p).astype(dt)
    dz = (residual[:, None] * q).astype(dt)
    dz[rows, labels] = p - dt.type(1)
    return _unbatch(loss, single), _unbatch(dz, single)


def _stable_parts(z, label):
    z2, labels, single = _batched(z, label)
    z64 = z2.astype(np.float64)
    rows = np.arange(len(labels))
    top = np.argmax(z64, axis=1)
    m = z64[rows, top]
    e = np.exp(z64 - m[:, None])
    e[rows, top] = 0.0
    loss = (m - z64[rows, labels]) + np.log1p(e.sum(axis=1))
    return z64, labels, rows, single, loss


def cross_entropy_stable(z, label):
    """``logsumexp(z) - z[label]`` in binary64, via ``max + log1p(residual)``.

    Positive whenever a competitor logit is finite and within ~745 of the
    maximum (beyond that ``exp`` underflows even in binary64).
    """
    _, _, _, single, loss = _stable_parts(z, label)
    return _unbatch(loss, single)


def cross_entropy_stable_grad(z, label):
    z64, labels, rows, single, loss = _stable_parts(z, label)
    e = np.exp(z64 - z64.max(axis=1, keepdims=True))
    dz = e / e.sum(axis=1, keepdims=True)
    dz[rows, labels] -= 1.0
    return _unbatch(loss, single), _unbatch(dz, single)


def margin_loss(z, label):
    """Best competitor logit minus the true logit, with its logit gradient.

    Competitor ties resolve to the lowest index. The gradient is +1 at that
    competitor and -1 at the label for every finite ``z``.
    """
    z2, labels, single = _batched(z, label)
    if z2.shape[1] < 2:
        raise ValueError("margin loss needs at least two classes")
    rows = np.arange(len(labels))
    masked = z2.astype(np.float64)
    masked[rows, labels] = -np.inf
    comp = np.argmax(masked, axis=1)
    loss = z2[rows, comp] - z2[rows, labels]
    dz = np.zeros_like(z2)
    dz[rows, comp] = 1
    dz[rows, labels] = -1
    return _unbatch(loss, single), _unbatch(dz, single)


def loss_and_grad(kind: LossKind, z, label, precision: Precision = Precision.BINARY32):
    """Dispatch on ``kind``; ``precision`` only matters for the naive path."""
    if kind is LossKind.CE_NAIVE:
        return cross_entropy_naive_grad(z, label, precision)
    if kind is LossKind.CE_STABLE:
        return cross_entropy_stable_grad(z, label)
    if kind is LossKind.MARGIN:
        return margin_loss(z, label)
    raise ValueError(f"unknown loss kind {kind!r}")


def _as_nchw(x):
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError("pooling needs at least two spatial dimensions")
    lead = x.shape[:-2]
    return x.reshape((-1, 1) + x.shape[-2:]), lead


def _pool_geometry(shape, window, stride):
    h, w = shape
    wh, ww = window
    sh, sw = stride
    if wh > h or ww > w:
        raise ValueError(f"pool window {window} larger than input {shape}")
    if sh < 1 or sw < 1:
        raise ValueError("pool stride must be positive")
    if (h - wh) % sh or (w - ww) % sw:
        raise ValueError(f"window {window} / stride {stride} do not tile input {shape}")
    return (h - wh) // sh + 1, (w - ww) // sw + 1


def pool_max_forward(x, window=(2, 2), stride=None):
    """Valid max pooling over the last two axes.

    Returns the pooled maxima and, per window, the flat index (into the H*W
    plane) of the first maximal element.
    """
    stride = tuple(stride or window)
    x4, lead = _as_nchw(x)
    ho, wo = _pool_geometry(x4.shape[-2:], tuple(window), stride)
    y, routing = kernels.maxpool_forward(np.ascontiguousarray(x4), *window, *stride)
    return y.reshape(lead + (ho, wo)), routing.reshape(lead + (ho, wo))


def pool_backward(x, gy, window=(2, 2), stride=None, routing=None, tau=None):
    """Route ``gy`` back through a max pool.

    Exact mode (``routing`` given) sends each upstream entry to its argmax.
    Soft mode (``tau`` given) spreads it over the window with weights
    ``softmax(window / tau)``; the forward output is unaffected.
    """
    if (routing is None) == (tau is None):
        raise ValueError("pass exactly one of routing (exact) or tau (soft)")
    stride = tuple(stride or window)
    x4, lead = _as_nchw(x)
    h, w = x4.shape[-2:]
    ho, wo = _pool_geometry((h, w), tuple(window), stride)
    gy = np.asarray(gy)
    if gy.shape != lead + (ho, wo):
        raise ValueError(f"upstream gradient shape {gy.shape} != pooled shape {lead + (ho, wo)}")
    gy4 = np.ascontiguousarray(gy.reshape((-1, 1, ho, wo)))
    if routing is not None:
        routing = np.asarray(routing)
        if routing.shape != gy.shape:
            raise ValueError("routing does not match the pooled shape")
        gx = kernels.maxpool_backward_exact(gy4, routing.reshape(gy4.shape).astype(np.int64), h, w)
    else:
        if not tau > 0:
            raise ValueError(f"tau must be positive, got {tau}")
        gx = kernels.maxpool_backward_soft(
            np.ascontiguousarray(x4, dtype=gy4.dtype), gy4, *window, *stride, tau
        )
    return gx.reshape(x.shape if hasattr(x, "shape") else np.shape(x))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4):
    """Central-difference gradient of a scalar function, in binary64."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g
