"""Small feedforward networks with exact or surrogate reverse-mode gradients.

A network is an ordered list of layer specs (affine, conv2d, relu, maxpool,
flatten) plus a parameter store. Inputs are a single example shaped like
``net.input_shape`` or a batch with one extra leading axis; outputs follow the
same convention. Everything is computed in the network's dtype except the
loss head, whose precision is chosen per call.
"""

from __future__ import annotations

import copy
import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import kernels
from .numerics import LossKind, Precision, loss_and_grad

MAGIC = b"AFG1"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """A model file is malformed or incompatible."""


class NonFiniteError(FloatingPointError):
    """The forward pass produced NaN/inf logits or loss."""


# --------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Affine:
    in_features: int
    out_features: int
    kind = "affine"

    def __str__(self):
        return f"affine({self.in_features},{self.out_features})"


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: str = "valid"
    kind = "conv2d"

    def __post_init__(self):
        if self.stride != 1:
            raise ValueError("only stride-1 convolutions are supported")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if self.padding == "same" and self.kernel % 2 == 0:
            raise ValueError("'same' padding needs an odd kernel size")

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2 if self.padding == "same" else 0

    def __str__(self):
        return f"conv2d({self.in_channels},{self.out_channels},{self.kernel},{self.stride},{self.padding})"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def __str__(self):
        return "relu"


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 0  # 0 means "same as window"
    kind = "maxpool"

    def __post_init__(self):
        if self.window < 1 or self.stride < 0:
            raise ValueError("pool window must be positive and stride non-negative")
        if self.stride == 0:
            object.__setattr__(self, "stride", self.window)

    @property
    def step(self) -> int:
        return self.stride

    def __str__(self):
        return f"maxpool({self.window},{self.step})"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def __str__(self):
        return "flatten"


PARAM_LAYERS = (Affine, Conv2d)
_LAYER_RE = re.compile(r"^\s*([a-z0-9]+)\s*(?:\((.*)\))?\s*$")


def parse_layers(text: str) -> tuple:
    """Parse ``"affine(784,256);relu;affine(256,10)"`` into layer specs."""
    layers = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        m = _LAYER_RE.match(item)
        if not m:
            raise ValueError(f"cannot parse layer {item!r}")
        name, argtext = m.group(1), m.group(2)
        args = [a.strip() for a in argtext.split(",")] if argtext else []
        try:
            if name == "affine":
                layers.append(Affine(int(args[0]), int(args[1])))
            elif name == "conv2d":
                layers.append(Conv2d(int(args[0]), int(args[1]), int(args[2]),
                                     int(args[3]) if len(args) > 3 else 1,
                                     args[4] if len(args) > 4 else "valid"))
            elif name == "relu":
                layers.append(ReLU())
            elif name == "maxpool":
                layers.append(MaxPool(int(args[0]), int(args[1]) if len(args) > 1 else 0))
            elif name == "flatten":
                layers.append(Flatten())
            else:
                raise ValueError(f"unknown layer kind {name!r}")
        except IndexError:
            raise ValueError(f"missing arguments in layer {item!r}") from None
    if not layers:
        raise ValueError("empty layer spec")
    return tuple(layers)


def format_layers(layers) -> str:
    return ";".join(str(layer) for layer in layers)


def _out_shape(layer, shape):
    if isinstance(layer, Affine):
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise ValueError(f"{layer} cannot take input of shape {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ValueError(f"{layer} cannot take input of shape {shape}")
        h, w = shape[1] + 2 * layer.pad, shape[2] + 2 * layer.pad
        if layer.kernel > h or layer.kernel > w:
            raise ValueError(f"{layer} kernel larger than input {shape}")
        return (layer.out_channels, h - layer.kernel + 1, w - layer.kernel + 1)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ValueError(f"{layer} needs (C, H, W) input, got {shape}")
        k, s = layer.window, layer.step
        if k > shape[1] or k > shape[2] or (shape[1] - k) % s or (shape[2] - k) % s:
            raise ValueError(f"{layer} does not tile input {shape}")
        return (shape[0], (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, ReLU):
        return shape
    raise TypeError(f"unknown layer {layer!r}")


def layer_shapes(layers, input_shape) -> list[tuple]:
    """Output shape of every layer; raises ValueError if the stack does not compose."""
    shapes = []
    shape = tuple(input_shape)
    for layer in layers:
        shape = _out_shape(layer, shape)
        shapes.append(shape)
    if len(shape) != 1:
        raise ValueError(f"network must end in a logit vector, got shape {shape}")
    return shapes


# --------------------------------------------------------------------------
# network container


@dataclass(frozen=True)
class BackwardMode:
    """How non-differentiable layers are handled in the backward pass."""

    kind: str = "exact"
    tau_relu: float = 0.1
    tau_pool: float = 0.1

    def __post_init__(self):
        if self.kind not in ("exact", "surrogate"):
            raise ValueError(f"unknown backward mode {self.kind!r}")
        if not (self.tau_relu > 0 and self.tau_pool > 0):
            raise ValueError("surrogate temperatures must be positive")

    @property
    def surrogate(self) -> bool:
        return self.kind == "surrogate"

    def __str__(self):
        if self.surrogate:
            return f"surrogate(tau_relu={self.tau_relu:g},tau_pool={self.tau_pool:g})"
        return "exact"


EXACT = BackwardMode()
SURROGATE = BackwardMode("surrogate")


@dataclass
class Network:
    layers: tuple
    params: dict[int, dict[str, np.ndarray]]
    input_shape: tuple
    precision: Precision = Precision.BINARY32
    width_multiplier: float = 1.0
    seed: int = 0
    masks: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return self.precision.dtype

    @property
    def n_classes(self) -> int:
        return layer_shapes(self.layers, self.input_shape)[-1][0]

    def num_params(self) -> int:
        return sum(p.size for layer in self.params.values() for p in layer.values())

    def weight_layers(self) -> list[int]:
        return sorted(self.params)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, precision: Precision) -> "Network":
        net = self.copy()
        net.precision = precision
        net.params = {i: {k: v.astype(precision.dtype) for k, v in p.items()} for i, p in net.params.items()}
        net.masks = {i: m.astype(precision.dtype) for i, m in net.masks.items()}
        return net


def _scaled(n: int, multiplier: float) -> int:
    return max(1, int(math.floor(n * multiplier + 0.5)))


def build_network(spec, width_multiplier: float = 1.0, seed: int = 0, input_shape=None,
                  precision: Precision = Precision.BINARY32) -> Network:
    """Build and initialize a network from layer specs.

    Hidden widths (affine outputs and conv channels, except the final logit
    layer) are scaled by ``width_multiplier`` and rounded to the nearest
    integer, at least 1. Weights are drawn from U(-a, a) with
    a = sqrt(6 / (fan_in + fan_out)); biases start at zero.
    """
    if isinstance(spec, str):
        spec = parse_layers(spec)
    spec = tuple(spec)
    if not spec:
        raise ValueError("empty layer spec")
    if not width_multiplier > 0:
        raise ValueError("width multiplier must be positive")
    if input_shape is None:
        if not isinstance(spec[0], Affine):
            raise ValueError("input_shape is required unless the first layer is affine")
        input_shape = (spec[0].in_features,)
    input_shape = tuple(int(d) for d in input_shape)
    layer_shapes(spec, input_shape)  # composition check on the declared sizes

    param_idx = [i for i, layer in enumerate(spec) if isinstance(layer, PARAM_LAYERS)]
    last = param_idx[-1] if param_idx else -1
    layers = []
    shape = input_shape
    for i, layer in enumerate(spec):
        if isinstance(layer, Affine):
            out = layer.out_features if i == last else _scaled(layer.out_features, width_multiplier)
            layer = Affine(shape[0], out)
        elif isinstance(layer, Conv2d):
            out = layer.out_channels if i == last else _scaled(layer.out_channels, width_multiplier)
            layer = Conv2d(shape[0], out, layer.kernel, layer.stride, layer.padding)
        layers.append(layer)
        shape = _out_shape(layer, shape)

    rng = np.random.default_rng(seed)
    dtype = precision.dtype
    params = {}
    for i, layer in enumerate(layers):
        if isinstance(layer, Affine):
            fan_in, fan_out = layer.in_features, layer.out_features
            wshape = (layer.out_features, layer.in_features)
        elif isinstance(layer, Conv2d):
            k2 = layer.kernel * layer.kernel
            fan_in, fan_out = layer.in_channels * k2, layer.out_channels * k2
            wshape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        else:
            continue
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[i] = {
            "W": rng.uniform(-bound, bound, size=wshape).astype(dtype),
            "b": np.zeros(wshape[0], dtype=dtype),
        }
    return Network(tuple(layers), params, input_shape, precision, float(width_multiplier), int(seed))


def scale_logits(net: Network, factor: float) -> Network:
    """Copy of ``net`` whose final layer (and hence every logit) is multiplied by ``factor``."""
    out = net.copy()
    last = max(out.params)
    for name in ("W", "b"):
        out.params[last][name] = (out.params[last][name] * factor).astype(out.dtype)
    return out


# --------------------------------------------------------------------------
# forward / backward


def _as_batch(net: Network, x):
    x = np.asarray(x)
    single = x.shape == net.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"input shape {x.shape} does not match network input {net.input_shape}")
    return x.astype(net.dtype, copy=False), single


def _affine(W, b, a):
    return a @ W.T + b


def _conv(layer: Conv2d, W, b, a):
    p = layer.pad
    if p:
        a = np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = kernels.im2col(np.ascontiguousarray(a), layer.kernel)
    out = cols @ W.reshape(W.shape[0], -1).T + b
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def _forward_batch(net: Network, xb, keep_cache: bool = True):
    a = xb
    cache = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Affine):
            p = net.params[i]
            cache.append(a)
            a = _affine(p["W"], p["b"], a)
        elif isinstance(layer, Conv2d):
            p = net.params[i]
            shape = a.shape
            a, cols = _conv(layer, p["W"], p["b"], a)
            cache.append((cols, shape))
        elif isinstance(layer, ReLU):
            cache.append(a)
            a = np.maximum(a, 0)
        elif isinstance(layer, MaxPool):
            x4 = np.ascontiguousarray(a)
            a, routing = kernels.maxpool_forward(x4, layer.window, layer.window, layer.step, layer.step)
            cache.append((x4, routing))
        elif isinstance(layer, Flatten):
            cache.append(a.shape)
            a = a.reshape(a.shape[0], -1)
        if not keep_cache:
            cache.clear()
    return a, cache


def forward(net: Network, x):
    """Logits for ``x`` plus the activation cache consumed by the backward sweep.

    The cache stores every layer's input, so ``backward`` never recomputes.
    """
    xb, single = _as_batch(net, x)
    logits, cache = _forward_batch(net, xb)
    return (logits[0] if single else logits), cache


def predict(net: Network, x):
    """Arg-max class (lowest index on ties)."""
    xb, single = _as_batch(net, x)
    logits, _ = _forward_batch(net, xb, keep_cache=False)
    labels = np.argmax(logits, axis=1)
    return labels[0] if single else labels


def _backward(net: Network, cache, dout, mode: BackwardMode = EXACT, want_params: bool = False,
              want_input: bool = True):
    """Single reverse sweep. Returns (input gradient or None, parameter grads)."""
    grads: dict[int, dict[str, np.ndarray]] = {}
    g = dout.astype(net.dtype, copy=False)
    stop = 0 if want_input else min(net.params, default=0)
    for i in range(len(net.layers) - 1, stop - 1, -1):
        layer = net.layers[i]
        c = cache[i]
        if isinstance(layer, Affine):
            W = net.params[i]["W"]
            if want_params:
                dW = g.T @ c
                if i in net.masks:
                    dW = dW * net.masks[i]
                grads[i] = {"W": dW, "b": g.sum(axis=0)}
            if i == stop and not want_input:
                break
            g = g @ W
        elif isinstance(layer, Conv2d):
            cols, in_shape = c
            W = net.params[i]["W"]
            o = W.shape[0]
            gf = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
            if want_params:
                dW = (gf.reshape(-1, o).T @ cols.reshape(-1, cols.shape[-1])).reshape(W.shape)
                if i in net.masks:
                    dW = dW * net.masks[i]
                grads[i] = {"W": dW, "b": gf.sum(axis=(0, 1, 2))}
            if i == stop and not want_input:
                break
            dcols = gf @ W.reshape(o, -1)
            p = layer.pad
            hp, wp = in_shape[2] + 2 * p, in_shape[3] + 2 * p
            g = kernels.col2im(np.ascontiguousarray(dcols), in_shape[1], hp, wp, layer.kernel)
            if p:
                g = g[:, :, p:-p, p:-p]
        elif isinstance(layer, ReLU):
            if mode.surrogate:
                g = g * expit(c / mode.tau_relu).astype(net.dtype)
            else:
                g = g * (c > 0)
        elif isinstance(layer, MaxPool):
            x4, routing = c
            gy = np.ascontiguousarray(g)
            if mode.surrogate:
                g = kernels.maxpool_backward_soft(x4, gy, layer.window, layer.window,
                                                  layer.step, layer.step, mode.tau_pool)
            else:
                g = kernels.maxpool_backward_exact(gy, routing, x4.shape[2], x4.shape[3])
        elif isinstance(layer, Flatten):
            g = g.reshape(c)
    return (g if want_input else None), grads


def backward(net: Network, cache, dlogits, mode: BackwardMode = EXACT):
    """Input gradient given an upstream logit gradient (single example or batch)."""
    d = np.asarray(dlogits)
    single = d.ndim == 1
    g, _ = _backward(net, cache, d[None] if single else d, mode)
    return g[0] if single else g


def input_gradients_batch(net: Network, xb, labels, loss: LossKind = LossKind.CE_STABLE,
                          mode: BackwardMode = EXACT, precision: Precision = Precision.BINARY32):
    """Per-example input gradients for a batch without raising on NaN.

    Returns ``(grads, losses, logits, finite)``; rows whose logits or loss are
    not finite get a zero gradient and ``finite[i] == False``.
    """
    xb = np.asarray(xb).astype(net.dtype, copy=False)
    labels = np.asarray(labels, dtype=np.int64)
    logits, cache = _forward_batch(net, xb)
    with np.errstate(over="ignore", invalid="ignore"):
        lval, dz = loss_and_grad(loss, logits, labels, precision)
    finite = np.isfinite(logits).all(axis=1) & np.isfinite(lval) & np.isfinite(dz).all(axis=1)
    dz = np.where(finite[:, None], dz, 0)
    with np.errstate(over="ignore", invalid="ignore"):
        g, _ = _backward(net, cache, dz, mode)
    return g, np.asarray(lval), logits, finite


def input_gradient(net: Network, x, label, loss: LossKind = LossKind.CE_STABLE,
                   mode: BackwardMode = EXACT, precision: Precision = Precision.BINARY32):
    """Gradient of the chosen loss with respect to the input, and the loss value.

    ``precision`` selects the storage format of the naive cross-entropy; the
    other losses ignore it. Raises ``NonFiniteError`` when the forward pass or
    loss is not finite, since a NaN gradient says nothing about robustness.
    """
    xb, single = _as_batch(net, x)
    g, lval, _, finite = input_gradients_batch(net, xb, np.atleast_1d(label), loss, mode, precision)
    if not finite.all():
        raise NonFiniteError("non-finite logits or loss in forward pass")
    return (g[0], lval[0]) if single else (g, lval)


def loss_and_param_gradients(net: Network, xb, labels, loss: LossKind = LossKind.CE_STABLE,
                             precision: Precision = Precision.BINARY32, reduction: str = "mean",
                             weights=None):
    """Per-example losses and parameter gradients of the reduced loss.

    ``reduction`` is ``"mean"`` or ``"sum"``; ``weights`` (per example) scales
    each example's contribution before the reduction.
    """
    xb = np.asarray(xb).astype(net.dtype, copy=False)
    labels = np.asarray(labels, dtype=np.int64)
    logits, cache = _forward_batch(net, xb)
    lval, dz = loss_and_grad(loss, logits, labels, precision)
    if weights is not None:
        dz = dz * np.asarray(weights)[:, None]
    if reduction == "mean":
        dz = dz / len(labels)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    _, grads = _backward(net, cache, np.asarray(dz), EXACT, want_params=True, want_input=False)
    return np.asarray(lval), grads


def param_gradients(net: Network, xb, labels, loss: LossKind = LossKind.CE_STABLE,
                    precision: Precision = Precision.BINARY32):
    """Mean-over-batch gradients of every parameter; masked weights get exactly 0."""
    if len(np.atleast_1d(labels)) == 0:
        raise ValueError("empty batch")
    lval, grads = loss_and_param_gradients(net, xb, labels, loss, precision)
    if not np.all(np.isfinite(lval)):
        raise NonFiniteError("non-finite loss in forward pass")
    return grads


# --------------------------------------------------------------------------
# pruning


def magnitude_prune(net: Network, fraction: float, scope: str = "per_layer") -> dict[int, np.ndarray]:
    """Masks that zero the ``floor(fraction * n)`` smallest-magnitude weights.

    ``scope`` is ``"per_layer"`` (n counted per weight tensor) or ``"global"``
    (one ranking over all weight tensors in layer order). Biases are never
    pruned; magnitude ties fall to the lower flat index first.
    """
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    idx = net.weight_layers()
    weights = [net.params[i]["W"] for i in idx]
    masks = {i: np.ones_like(w) for i, w in zip(idx, weights)}
    if scope == "per_layer":
        for i, w in zip(idx, weights):
            k = int(math.floor(fraction * w.size))
            order = np.argsort(np.abs(w).reshape(-1), kind="stable")
            masks[i].reshape(-1)[order[:k]] = 0
    elif scope == "global":
        flat = np.concatenate([np.abs(w).reshape(-1).astype(np.float64) for w in weights])
        k = int(math.floor(fraction * flat.size))
        chosen = np.argsort(flat, kind="stable")[:k]
        offsets = np.cumsum([0] + [w.size for w in weights])
        for j, i in enumerate(idx):
            local = chosen[(chosen >= offsets[j]) & (chosen < offsets[j + 1])] - offsets[j]
            masks[i].reshape(-1)[local] = 0
    else:
        raise ValueError(f"unknown prune scope {scope!r}")
    return masks


def apply_mask(net: Network, masks: dict[int, np.ndarray]) -> Network:
    """Copy of ``net`` with masked weights set to +0.0 and the masks retained."""
    out = net.copy()
    for i, m in masks.items():
        if i not in out.params:
            raise ValueError(f"layer {i} has no weights to mask")
        w = out.params[i]["W"]
        if m.shape != w.shape:
            raise ValueError(f"mask shape {m.shape} != weight shape {w.shape} at layer {i}")
        m = (np.asarray(m) != 0).astype(out.dtype)
        if i in out.masks:
            m = m * out.masks[i]
        out.masks[i] = m
        out.params[i]["W"] = np.where(m != 0, w, 0).astype(out.dtype)
    return out


# --------------------------------------------------------------------------
# serialization


def save_model(net: Network, path) -> None:
    """Write ``net`` as: b"AFG1", u32 header length, JSON header, raw LE payloads."""
    masked = sorted(net.masks)
    header = {
        "version": FORMAT_VERSION,
        "layers": format_layers(net.layers),
        "input_shape": list(net.input_shape),
        "precision": net.precision.value,
        "width_multiplier": net.width_multiplier,
        "seed": net.seed,
        "masked_layers": masked,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    le = net.dtype.newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for i in sorted(net.params):
            fh.write(net.params[i]["W"].astype(le).tobytes())
            fh.write(net.params[i]["b"].astype(le).tobytes())
        for i in masked:
            fh.write(net.masks[i].astype(le).tobytes())


def load_model(path) -> Network:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise ModelFormatError(f"{path}: truncated header at offset 4")
    (hlen,) = struct.unpack_from("<I", data, 4)
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header at offset 8: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {header.get('version')!r}")
    try:
        precision = Precision(header["precision"])
        layers = parse_layers(header["layers"])
        input_shape = tuple(header["input_shape"])
        layer_shapes(layers, input_shape)
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"{path}: invalid header: {exc}") from None
    net = build_network(layers, 1.0, 0, input_shape, precision)
    net.width_multiplier = float(header["width_multiplier"])
    net.seed = int(header["seed"])
    le = precision.dtype.newbyteorder("<")
    offset = 8 + hlen

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) * le.itemsize
        if offset + n > len(data):
            raise ModelFormatError(f"{path}: payload truncated at offset {offset}")
        arr = np.frombuffer(data, dtype=le, count=int(np.prod(shape)), offset=offset)
        offset += n
        return arr.reshape(shape).astype(precision.dtype)

    for i in sorted(net.params):
        net.params[i]["W"] = take(net.params[i]["W"].shape)
        net.params[i]["b"] = take(net.params[i]["b"].shape)
    for i in header["masked_layers"]:
        if i not in net.params:
            raise ModelFormatError(f"{path}: mask for layer {i} without weights")
        net.masks[i] = take(net.params[i]["W"].shape)
    if offset != len(data):
        raise ModelFormatError(f"{path}: {len(data) - offset} trailing bytes at offset {offset}")
    return net
