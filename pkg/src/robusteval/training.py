"""Deterministic SGD-with-momentum training, regularizers, adversarial training, pruning.

The training objective is the stable cross-entropy plus an optional penalty.
Shuffling uses one seeded generator per run, so the same config and seed
always produce bit-identical parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, run_attack
from .network import (Network, apply_mask, input_gradients_batch, loss_and_param_gradients,
                      magnitude_prune)
from .numerics import LossKind, Precision

log = logging.getLogger(__name__)

REGULARIZERS = ("none", "l2", "l1", "input_grad")
# input-space step for the finite-difference Hessian-vector product
INPUT_GRAD_STEP = 1e-4


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, message: str = "training loss became non-finite"):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


@dataclass(frozen=True)
class Regularizer:
    kind: str = "none"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if not self.lam >= 0:
            raise ValueError("regularization strength must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    regularizer: Regularizer = field(default_factory=Regularizer)
    adversarial: AttackConfig | None = None
    lr_decay: float = 1.0
    decay_every: int = 0

    def __post_init__(self):
        # lr == 0 is allowed: it freezes the parameters, which tests rely on
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.decay_every:
            return self.learning_rate * self.lr_decay ** (epoch // self.decay_every)
        return self.learning_rate


def _zeros_like_grads(net: Network):
    return {i: {k: np.zeros_like(v) for k, v in p.items()} for i, p in net.params.items()}


def _input_grad_penalty(net: Network, xb, labels, lam: float):
    n = len(labels)
    net64 = net if net.precision is Precision.BINARY64 else net.astype(Precision.BINARY64)
    xb = np.asarray(xb, dtype=np.float64)
    g, *_ = input_gradients_batch(net64, xb, labels, LossKind.CE_STABLE, precision=Precision.BINARY64)
    flat = g.reshape(n, -1)
    sq = np.einsum("ij,ij->i", flat, flat)
    penalty = lam * float(sq.mean())
    grads = _zeros_like_grads(net)
    if lam == 0:
        return penalty, grads
    # d/dtheta 0.5*|g|^2 = grad_theta (g . v) at v = g, and g . v is the
    # directional derivative of the loss along v: take it by central differences.
    norms = np.sqrt(sq)
    live = norms > 0
    if not live.any():
        return penalty, grads
    h = np.where(live, INPUT_GRAD_STEP / np.where(live, norms, 1.0), 0.0)
    shift = g * h.reshape((-1,) + (1,) * (g.ndim - 1))
    both = np.concatenate([xb + shift, xb - shift])
    w = np.where(live, 1.0 / (2.0 * np.where(live, h, 1.0)), 0.0)
    _, fd = loss_and_param_gradients(net64, both, np.concatenate([labels, labels]), LossKind.CE_STABLE,
                                     reduction="sum", weights=np.concatenate([w, -w]))
    scale = 2.0 * lam / n
    for i, p in fd.items():
        for k, v in p.items():
            grads[i][k] = (scale * v).astype(net.dtype)
    return penalty, grads


def regularizer_penalty(net: Network, xb, labels, kind: str, lam: float):
    """Penalty value and its parameter gradients.

    ``l2``: lam * sum(W**2); ``l1``: lam * sum(|W|) with subgradient 0 at 0;
    ``input_grad``: lam * mean over the batch of |grad_x ce_stable|_2^2.
    Biases are not penalized by l1/l2.
    """
    Regularizer(kind, lam)
    grads = _zeros_like_grads(net)
    if kind == "none" or lam == 0 and kind != "input_grad":
        return 0.0, grads
    if kind == "input_grad":
        return _input_grad_penalty(net, xb, np.asarray(labels, dtype=np.int64), lam)
    total = 0.0
    for i, p in net.params.items():
        w = p["W"].astype(np.float64)
        if kind == "l2":
            total += float(np.sum(w * w))
            grads[i]["W"] = (2.0 * lam * w).astype(net.dtype)
        else:
            total += float(np.sum(np.abs(w)))
            grads[i]["W"] = (lam * np.sign(w)).astype(net.dtype)
    return lam * total, grads


def objective(net: Network, x, labels, reg: Regularizer = Regularizer()) -> float:
    """Mean stable cross-entropy over the data plus the regularizer penalty."""
    lval, _ = loss_and_param_gradients(net, x, labels, LossKind.CE_STABLE)
    pen, _ = regularizer_penalty(net, x, labels, reg.kind, reg.lam)
    return float(np.mean(lval)) + pen


def train(net: Network, x, labels, cfg: TrainConfig):
    """Train a copy of ``net``; returns ``(trained_net, history)``.

    ``history[e]`` is the full-data objective after epoch ``e``. With
    ``cfg.adversarial`` set, every batch is replaced by PGD examples crafted
    against the current parameters before the step. Masked weights stay at
    exactly zero.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty training set")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    vel = _zeros_like_grads(net)
    history = []
    # divergence is detected explicitly, so overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            _epoch(net, x, labels, cfg, epoch, rng, vel, history)
    return net, history


def _epoch(net: Network, x, labels, cfg: TrainConfig, epoch: int, rng, vel, history) -> None:
    """One pass over a fresh permutation of the data; appends the epoch objective."""
    n = len(labels)
    reg = cfg.regularizer
    lr = net.dtype.type(cfg.lr_at(epoch))
    mom = net.dtype.type(cfg.momentum)
    perm = rng.permutation(n)
    for start in range(0, n, cfg.batch_size):
        idx = perm[start:start + cfg.batch_size]
        xb, yb = x[idx], labels[idx]
        if cfg.adversarial is not None:
            xb = run_attack(net, xb, yb, cfg.adversarial, indices=epoch * n + idx).adv_x
        lval, grads = loss_and_param_gradients(net, xb, yb, LossKind.CE_STABLE)
        if not np.all(np.isfinite(lval)):
            raise TrainingDivergedError(epoch)
        if reg.kind != "none":
            _, rgrads = regularizer_penalty(net, xb, yb, reg.kind, reg.lam)
            for i in grads:
                for k in grads[i]:
                    grads[i][k] = grads[i][k] + rgrads[i][k]
        for i, p in net.params.items():
            for k in p:
                g = grads[i][k]
                if k == "W" and i in net.masks:
                    g = g * net.masks[i]
                vel[i][k] = (mom * vel[i][k] + g).astype(net.dtype)
                p[k] = (p[k] - lr * vel[i][k]).astype(net.dtype)
                if not np.all(np.isfinite(p[k])):
                    raise TrainingDivergedError(epoch, "parameters became non-finite")
            if i in net.masks:
                p["W"] = np.where(net.masks[i] != 0, p["W"], 0).astype(net.dtype)
    history.append(objective(net, x, labels, reg))
    if not np.isfinite(history[-1]):
        raise TrainingDivergedError(epoch)
    log.debug("epoch %d objective %.6g", epoch, history[-1])


def adversarial_train(net: Network, x, labels, cfg: TrainConfig):
    """``train`` with every batch replaced by adversarial examples (``cfg.adversarial`` required)."""
    if cfg.adversarial is None:
        raise ValueError("adversarial_train needs cfg.adversarial")
    return train(net, x, labels, cfg)


def prune_finetune(net: Network, x, labels, fraction: float, finetune_cfg: TrainConfig,
                   scope: str = "per_layer"):
    """Magnitude-prune ``fraction`` of the weights, then finetune with the mask held fixed."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    pruned = apply_mask(net, magnitude_prune(net, fraction, scope))
    return train(pruned, x, labels, finetune_cfg)
