"""Detectors for the three attack failure modes and the overestimation gap."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackConfig, as_attack, attack_dataset, robust_accuracy, trace_improving
from .network import EXACT, SURROGATE, BackwardMode, Network, ReLU, _as_batch, _forward_batch, input_gradients_batch
from .numerics import LossKind, Precision

KINK_DELTA = 1e-6


@dataclass
class FailureReport:
    zero_loss_fraction: float = 0.0
    zero_grad_fraction: float = 0.0
    mean_grad_cosine_exact_vs_surrogate: float = 1.0
    kink_proximity_fraction: float = 0.0
    nonconverged_fraction: float = 0.0
    per_example: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        row = asdict(self)
        row.pop("per_example")
        return row


def zero_loss_report(net: Network, x, labels, precision: Precision = Precision.BINARY32) -> FailureReport:
    """Flag examples whose naive cross-entropy is exactly 0.0 and whose input gradient vanishes."""
    x, _ = _as_batch(net, x)
    labels = np.asarray(labels, dtype=np.int64)
    g, lval, _, _ = input_gradients_batch(net, x, labels, LossKind.CE_NAIVE, EXACT, precision)
    gmax = np.abs(g.reshape(len(g), -1)).max(axis=1)
    zero_loss = lval == 0.0
    zero_grad = gmax == 0.0
    per = [
        {"index": i, "loss": float(lval[i]), "grad_inf_norm": float(gmax[i]),
         "zero_loss": bool(zero_loss[i]), "zero_grad": bool(zero_grad[i])}
        for i in range(len(labels))
    ]
    return FailureReport(
        zero_loss_fraction=float(zero_loss.mean()),
        zero_grad_fraction=float(zero_grad.mean()),
        per_example=per,
    )


def _relu_inputs(net: Network, xb):
    _, cache = _forward_batch(net, xb)
    return [cache[i] for i, layer in enumerate(net.layers) if isinstance(layer, ReLU)]


def _cosine_rows(a, b):
    a = a.reshape(len(a), -1).astype(np.float64)
    b = b.reshape(len(b), -1).astype(np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = (na == 0) | (nb == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.einsum("ij,ij->i", a, b) / (na * nb)
    cos = np.where(zero, 0.0, np.clip(cos, -1.0, 1.0))
    return cos, na == 0


def gradient_agreement(net: Network, x, label, loss: LossKind = LossKind.CE_STABLE,
                       surrogate: BackwardMode = SURROGATE, delta: float = KINK_DELTA,
                       precision: Precision = Precision.BINARY32):
    """Compare exact and surrogate input gradients.

    Returns ``(cosine, exact_zero, kink_fraction)``. The cosine is defined as 0
    when either gradient is the zero vector; ``exact_zero`` says whether the
    exact gradient was. ``kink_fraction`` is the share of ReLU inputs with
    magnitude at most ``delta``. Batched inputs give per-example arrays.
    """
    xb, single = _as_batch(net, x)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    g_exact, *_ = input_gradients_batch(net, xb, labels, loss, EXACT, precision)
    g_sur, *_ = input_gradients_batch(net, xb, labels, loss, surrogate, precision)
    cos, exact_zero = _cosine_rows(g_exact, g_sur)
    pre = _relu_inputs(net, xb)
    if pre:
        flat = np.concatenate([p.reshape(len(xb), -1) for p in pre], axis=1)
        kink = (np.abs(flat) <= delta).mean(axis=1)
    else:
        kink = np.zeros(len(xb))
    if single:
        return float(cos[0]), bool(exact_zero[0]), float(kink[0])
    return cos, exact_zero, kink


def convergence_probe(loss_trace, rel_tol: float = 1e-4, patience: int = 20) -> str:
    """Classify a loss trace as ``"flat"``, ``"still_improving"`` or ``"converged"``.

    Flat means the whole trace spans at most ``rel_tol`` times its largest
    magnitude; still improving means the best value rose by at least
    ``rel_tol`` (relative) within the last ``patience`` entries.
    """
    tr = np.asarray(loss_trace, dtype=np.float64)
    if tr.size == 0:
        raise ValueError("empty loss trace")
    hi, lo = tr.max(), tr.min()
    if hi - lo <= rel_tol * max(abs(hi), abs(lo)):
        return "flat"
    if trace_improving(tr, rel_tol, patience):
        return "still_improving"
    return "converged"


def failure_report(net: Network, x, labels, vanilla: AttackConfig, threads: int = 1,
                   surrogate: BackwardMode = SURROGATE) -> FailureReport:
    """All three failure-mode statistics for one model/dataset/attack."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    report = zero_loss_report(net, x, labels, vanilla.precision)
    cos, exact_zero, kink = gradient_agreement(net, x, labels, LossKind.CE_STABLE, surrogate)
    res = attack_dataset(net, x, labels, vanilla, threads)
    report.mean_grad_cosine_exact_vs_surrogate = float(np.mean(cos))
    report.kink_proximity_fraction = float(np.mean(kink))
    report.nonconverged_fraction = float(np.mean(res.not_converged))
    for row, c, z, k, nc, it in zip(report.per_example, cos, exact_zero, kink, res.not_converged,
                                   res.iters_used):
        row.update(grad_cosine=float(c), exact_grad_zero=bool(z), kink_fraction=float(k),
                   not_converged=bool(nc), iters_used=int(it))
    return report


def overestimation_gap(net: Network, x, labels, vanilla, compensated, threads: int = 1) -> dict:
    """Robust accuracy under ``vanilla`` minus robust accuracy under ``compensated``.

    Both may be ``AttackConfig`` objects or attack callables; a config is run
    as a single attack, so passing the same config twice gives a zero gap.
    """
    if isinstance(vanilla, AttackConfig) and isinstance(compensated, AttackConfig):
        if vanilla.threat != compensated.threat:
            raise ValueError("vanilla and compensated attacks must share a threat model")
    rv = robust_accuracy(net, x, labels, as_attack(vanilla), threads)
    rc = robust_accuracy(net, x, labels, as_attack(compensated), threads)
    return {
        "clean_acc": rv["clean_acc"],
        "robust_acc_vanilla": rv["robust_acc"],
        "robust_acc_compensated": rc["robust_acc"],
        "gap": rv["robust_acc"] - rc["robust_acc"],
        "vanilla_result": rv["result"],
        "compensated_result": rc["result"],
    }
