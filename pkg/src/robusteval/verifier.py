"""Interval bound propagation (IBP) certificates.

Bounds are propagated in binary64 regardless of the network's precision.
Affine and conv layers use center/radius form (radius maps through |W|),
ReLU and max-pool act monotonically on the endpoints. No outward rounding is
done; ``certify`` requires the worst-case margin to exceed a small slack
instead (1e-9 for binary64 networks, larger for binary32 networks whose own
forward pass rounds more coarsely).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .network import Affine, Conv2d, Flatten, MaxPool, Network, ReLU, _affine, _as_batch, _conv, predict
from .numerics import Precision

SLACK64 = 1e-9


@dataclass
class Interval:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(self.lo > self.hi):
            raise ValueError("interval with lo > hi")

    def contains(self, v, tol: float = 0.0) -> np.ndarray:
        return (self.lo - tol <= v) & (v <= self.hi + tol)


def _params64(net: Network, i: int):
    p = net.params[i]
    return p["W"].astype(np.float64), p["b"].astype(np.float64)


def ibp_bounds(net: Network, x, epsilon: float, lo: float = 0.0, hi: float = 1.0,
               layers: bool = False):
    """Sound logit bounds over the box ``[x - eps, x + eps] & [lo, hi]``.

    With ``layers=True`` also returns the interval after every layer.
    """
    xb, single = _as_batch(net, x)
    xb = xb.astype(np.float64)
    l = np.maximum(xb - epsilon, lo)
    u = np.minimum(xb + epsilon, hi)
    if epsilon == 0:
        l = u = xb
    trail = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Affine):
            W, b = _params64(net, i)
            c, r = (l + u) / 2, (u - l) / 2
            c = _affine(W, b, c)
            r = r @ np.abs(W).T
            l, u = c - r, c + r
        elif isinstance(layer, Conv2d):
            W, b = _params64(net, i)
            c, r = (l + u) / 2, (u - l) / 2
            c, _ = _conv(layer, W, b, c)
            r, _ = _conv(layer, np.abs(W), np.zeros_like(b), r)
            l, u = c - r, c + r
        elif isinstance(layer, ReLU):
            l, u = np.maximum(l, 0), np.maximum(u, 0)
        elif isinstance(layer, MaxPool):
            k, s = layer.window, layer.step
            l, _ = kernels.maxpool_forward(np.ascontiguousarray(l), k, k, s, s)
            u, _ = kernels.maxpool_forward(np.ascontiguousarray(u), k, k, s, s)
        elif isinstance(layer, Flatten):
            l, u = l.reshape(len(l), -1), u.reshape(len(u), -1)
        if layers:
            trail.append(Interval(l[0] if single else l, u[0] if single else u))
    out = Interval(l[0] if single else l, u[0] if single else u)
    return (out, trail) if layers else out


def slack_for(net: Network, bounds: Interval) -> float:
    if net.precision is Precision.BINARY64:
        return SLACK64
    scale = 1.0 + float(np.max(np.abs(np.concatenate([np.ravel(bounds.lo), np.ravel(bounds.hi)]))))
    return SLACK64 + 64 * float(np.finfo(np.float32).eps) * scale


def worst_margins(bounds: Interval, labels) -> np.ndarray:
    lo = np.atleast_2d(bounds.lo)
    hi = np.atleast_2d(bounds.hi).copy()
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    rows = np.arange(len(labels))
    true_lo = lo[rows, labels]
    hi[rows, labels] = -np.inf
    return true_lo - hi.max(axis=1)


def certify(net: Network, x, label, epsilon: float, lo: float = 0.0, hi: float = 1.0):
    """True iff every point of the box provably keeps class ``label`` (batched: bool array)."""
    xb, single = _as_batch(net, x)
    bounds = ibp_bounds(net, xb, epsilon, lo, hi)
    ok = worst_margins(bounds, np.atleast_1d(label)) > slack_for(net, bounds)
    return bool(ok[0]) if single else ok


def certified_accuracy(net: Network, x, labels, epsilon: float, lo: float = 0.0, hi: float = 1.0) -> float:
    """Fraction of examples that are clean-correct and certified at ``epsilon``."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    ok = certify(net, x, labels, epsilon, lo, hi) & (predict(net, x) == labels)
    return float(np.mean(ok))
