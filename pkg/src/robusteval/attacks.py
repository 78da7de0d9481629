"""First-order L-inf attacks and the compensated attack ensemble.

All attacks take a batch ``x`` of shape (N, *input_shape) with integer labels
(or a single example with a scalar label) and return an ``AttackResult``.
Attack arithmetic runs in binary64 on the inputs; the network evaluates in
its own precision. The ascent direction is ``sign(grad)`` with ``sign(0) = 0``,
so a zero gradient leaves the iterate where it is.

Random starts are drawn from a generator seeded with ``(cfg.seed, index)``
where ``index`` is the example's position in the dataset, so sharding a
dataset never changes the result for any example.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .network import EXACT, SURROGATE, BackwardMode, Network, forward, input_gradients_batch, predict
from .numerics import LossKind, Precision, margin_loss

CHUNK = 256


@dataclass(frozen=True)
class ThreatModel:
    epsilon: float
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.lo < self.hi:
            raise ValueError(f"empty input range [{self.lo}, {self.hi}]")

    def bounds(self, x):
        """Per-coordinate box: the eps-ball around ``x`` intersected with [lo, hi]."""
        return np.maximum(x - self.epsilon, self.lo), np.minimum(x + self.epsilon, self.hi)


@dataclass(frozen=True)
class Adaptive:
    max_iters: int = 1000
    rel_tol: float = 1e-4
    patience: int = 20


@dataclass(frozen=True)
class AttackConfig:
    threat: ThreatModel
    kind: str = "pgd"
    step_alpha: float | None = None
    iters: int = 40
    random_start: bool = False
    seed: int = 0
    loss: LossKind = LossKind.CE_NAIVE
    mode: BackwardMode = EXACT
    precision: Precision = Precision.BINARY32
    adaptive: Adaptive | None = None
    early_exit: bool = False

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd", "margin_pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.iters < 1:
            raise ValueError("iters must be positive")
        if self.kind != "fgsm" and self.threat.epsilon > 0 and not self.alpha > 0:
            raise ValueError("step_alpha must be positive for iterative attacks")
        if self.adaptive is not None and self.adaptive.max_iters < self.iters:
            raise ValueError("adaptive.max_iters must be >= iters")

    @property
    def alpha(self) -> float:
        if self.step_alpha is not None:
            return float(self.step_alpha)
        return 2.5 * self.threat.epsilon / self.iters

    @property
    def objective(self) -> LossKind:
        return LossKind.MARGIN if self.kind == "margin_pgd" else self.loss

    @property
    def stopping(self) -> Adaptive:
        return self.adaptive or Adaptive()

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class AttackResult:
    """Outcome of an attack. Fields are per-example arrays for batched calls."""

    adv_x: np.ndarray
    success: np.ndarray
    iters_used: np.ndarray
    loss_trace: list
    zero_loss_hit: np.ndarray
    zero_grad_hit: np.ndarray
    not_converged: np.ndarray
    nonfinite: np.ndarray
    member: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.success)

    def example(self, i: int) -> "AttackResult":
        return AttackResult(
            self.adv_x[i], bool(self.success[i]), int(self.iters_used[i]), self.loss_trace[i],
            bool(self.zero_loss_hit[i]), bool(self.zero_grad_hit[i]), bool(self.not_converged[i]),
            bool(self.nonfinite[i]), None if self.member is None else int(self.member[i]),
        )

    @staticmethod
    def concat(parts: list["AttackResult"]) -> "AttackResult":
        return AttackResult(
            np.concatenate([p.adv_x for p in parts]),
            np.concatenate([p.success for p in parts]),
            np.concatenate([p.iters_used for p in parts]),
            [t for p in parts for t in p.loss_trace],
            np.concatenate([p.zero_loss_hit for p in parts]),
            np.concatenate([p.zero_grad_hit for p in parts]),
            np.concatenate([p.not_converged for p in parts]),
            np.concatenate([p.nonfinite for p in parts]),
            None if parts[0].member is None else np.concatenate([p.member for p in parts]),
        )


def trace_improving(trace, rel_tol: float, patience: int) -> bool:
    """True if the best value rose by at least ``rel_tol`` (relative) in the last ``patience`` entries."""
    trace = np.asarray(trace, dtype=np.float64)
    cut = max(1, len(trace) - patience)
    with np.errstate(invalid="ignore"):
        before = np.max(trace[:cut])
        gain = np.max(trace) - before
        return bool(gain > 0 and gain >= rel_tol * abs(before))


def _prepare(net: Network, x, labels, indices):
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == net.input_shape
    if single:
        x = x[None]
        labels = np.atleast_1d(labels)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(x):
        raise ValueError(f"{len(labels)} labels for {len(x)} inputs")
    indices = np.arange(len(x)) if indices is None else np.asarray(indices, dtype=np.int64)
    return x, labels, indices, single


def _finish(result: AttackResult, single: bool):
    return result.example(0) if single else result


def random_start(x, threat: ThreatModel, seed: int, indices):
    out = np.empty_like(x)
    lower, upper = threat.bounds(x)
    for row, idx in enumerate(indices):
        rng = np.random.default_rng((int(seed), int(idx)))
        delta = rng.uniform(-threat.epsilon, threat.epsilon, size=x.shape[1:])
        out[row] = np.minimum(np.maximum(x[row] + delta, lower[row]), upper[row])
    return out


def _grads(net, x, labels, cfg: AttackConfig):
    return input_gradients_batch(net, x, labels, cfg.objective, cfg.mode, cfg.precision)


def _zero_rows(g):
    return ~np.any(g.reshape(len(g), -1) != 0, axis=1)


def _iterate(net: Network, x, labels, cfg: AttackConfig, indices, adaptive: Adaptive | None):
    n = len(x)
    lower, upper = cfg.threat.bounds(x)
    cur = random_start(x, cfg.threat, cfg.seed, indices) if cfg.random_start else x.copy()
    max_steps = adaptive.max_iters if adaptive else cfg.iters
    stop_rule = cfg.stopping
    alpha = cfg.alpha
    naive = cfg.objective is not LossKind.MARGIN

    trace = np.full((n, max_steps + 1), np.nan)
    iters_used = np.zeros(n, dtype=np.int64)
    zero_loss = np.zeros(n, dtype=bool)
    zero_grad = np.zeros(n, dtype=bool)
    bad = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)

    g, lval, logits, fin = _grads(net, cur, labels, cfg)
    trace[:, 0] = lval
    zero_loss |= naive & (lval == 0)
    zero_grad |= _zero_rows(g)
    bad |= ~fin
    active &= fin
    if cfg.early_exit:
        active &= np.argmax(logits, axis=1) == labels

    for t in range(1, max_steps + 1):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        step = alpha * np.sign(g[rows])
        cur[rows] = np.minimum(np.maximum(cur[rows] + step, lower[rows]), upper[rows])
        iters_used[rows] = t
        g_new, lval, logits, fin = _grads(net, cur[rows], labels[rows], cfg)
        g[rows] = g_new
        trace[rows, t] = lval
        zero_loss[rows] |= naive & (lval == 0)
        zero_grad[rows] |= _zero_rows(g_new)
        bad[rows] |= ~fin
        done = ~fin
        if cfg.early_exit:
            done |= np.argmax(logits, axis=1) != labels[rows]
        if adaptive and t >= cfg.iters and t >= adaptive.patience + 1:
            done |= np.array([not trace_improving(trace[r, :t + 1], adaptive.rel_tol, adaptive.patience)
                              for r in rows])
        active[rows[done]] = False

    cur[bad] = x[bad]
    traces = [trace[i, :iters_used[i] + 1].copy() for i in range(n)]
    improving = np.array([trace_improving(tr, stop_rule.rel_tol, stop_rule.patience) for tr in traces],
                         dtype=bool)
    if adaptive:
        not_converged = improving & (iters_used == adaptive.max_iters)
    else:
        not_converged = improving
    success = (predict(net, cur) != labels) & ~bad
    return AttackResult(cur, success, iters_used, traces, zero_loss, zero_grad,
                        not_converged & ~bad, bad, np.full(n, -1))


def fgsm(net: Network, x, label, cfg: AttackConfig, indices=None) -> AttackResult:
    """One signed-gradient step of size epsilon, clipped to the threat box."""
    x, labels, indices, single = _prepare(net, x, label, indices)
    lower, upper = cfg.threat.bounds(x)
    g, l0, _, fin = _grads(net, x, labels, cfg)
    adv = np.minimum(np.maximum(x + cfg.threat.epsilon * np.sign(g), lower), upper)
    adv[~fin] = x[~fin]
    _, l1, _, fin1 = _grads(net, adv, labels, cfg)
    bad = ~fin | ~fin1
    naive = cfg.objective is not LossKind.MARGIN
    traces = [np.array([a, b], dtype=np.float64) for a, b in zip(l0, l1)]
    result = AttackResult(
        adv,
        (predict(net, adv) != labels) & ~bad,
        np.ones(len(x), dtype=np.int64),
        traces,
        naive & ((l0 == 0) | (l1 == 0)),
        _zero_rows(g),
        np.zeros(len(x), dtype=bool),
        bad,
        np.full(len(x), -1),
    )
    return _finish(result, single)


def pgd(net: Network, x, label, cfg: AttackConfig, indices=None) -> AttackResult:
    """Fixed-budget PGD: ``cfg.iters`` steps of ``x <- proj(x + alpha * sign(grad))``."""
    if cfg.kind == "fgsm":
        raise ValueError("pgd needs kind 'pgd' or 'margin_pgd'")
    x, labels, indices, single = _prepare(net, x, label, indices)
    return _finish(_iterate(net, x, labels, cfg, indices, None), single)


def adaptive_pgd(net: Network, x, label, cfg: AttackConfig, indices=None) -> AttackResult:
    """PGD that keeps stepping past ``cfg.iters`` while the best loss still improves.

    Each example stops once its best loss gained less than ``rel_tol``
    (relative) over the last ``patience`` steps, or at ``max_iters``;
    ``not_converged`` marks examples still improving when the cap was hit.
    """
    if cfg.adaptive is None:
        raise ValueError("adaptive_pgd needs cfg.adaptive")
    x, labels, indices, single = _prepare(net, x, label, indices)
    return _finish(_iterate(net, x, labels, cfg, indices, cfg.adaptive), single)


def run_attack(net: Network, x, label, cfg: AttackConfig, indices=None) -> AttackResult:
    if cfg.kind == "fgsm":
        return fgsm(net, x, label, cfg, indices)
    if cfg.adaptive is not None:
        return adaptive_pgd(net, x, label, cfg, indices)
    return pgd(net, x, label, cfg, indices)


def ensemble_members(base: AttackConfig, surrogate: BackwardMode = SURROGATE,
                     adaptive: Adaptive | None = None) -> list[AttackConfig]:
    """``base`` followed by {ce_stable, margin} x {exact, surrogate}, all adaptive."""
    adaptive = adaptive or base.adaptive or Adaptive(max_iters=max(Adaptive().max_iters, base.iters))
    common = dict(kind="pgd", step_alpha=base.alpha, adaptive=adaptive)
    members = [base]
    for loss in (LossKind.CE_STABLE, LossKind.MARGIN):
        for mode in (EXACT, surrogate):
            members.append(base.replace(loss=loss, mode=mode, **common))
    return members


def compensated_attack(net: Network, x, label, base: AttackConfig, indices=None,
                       members: list[AttackConfig] | None = None) -> AttackResult:
    """Run the ensemble in order and keep, per example, the first success.

    Later members only run on examples no earlier member has fooled, so the
    success set contains that of every member. For examples nobody fools the
    member whose final iterate has the highest margin loss is reported
    (margin is the one objective comparable across members).
    """
    x, labels, indices, single = _prepare(net, x, label, indices)
    members = members or ensemble_members(base)
    n = len(x)
    result = None
    best_margin = np.full(n, -np.inf)
    for k, cfg in enumerate(members):
        rows = np.arange(n) if result is None else np.flatnonzero(~result.success)
        if rows.size == 0:
            break
        part = run_attack(net, x[rows], labels[rows], cfg, indices[rows])
        part.member = np.full(rows.size, k)
        logits, _ = forward(net, part.adv_x)
        m, _ = margin_loss(logits, labels[rows])
        if result is None:
            result = part
            best_margin = np.asarray(m, dtype=np.float64)
            continue
        take = part.success | (m > best_margin[rows])
        result.zero_loss_hit[rows] |= part.zero_loss_hit
        result.zero_grad_hit[rows] |= part.zero_grad_hit
        result.nonfinite[rows] &= part.nonfinite
        for j, r in enumerate(rows):
            if take[j]:
                result.adv_x[r] = part.adv_x[j]
                result.success[r] = part.success[j]
                result.iters_used[r] = part.iters_used[j]
                result.loss_trace[r] = part.loss_trace[j]
                result.not_converged[r] = part.not_converged[j]
                result.member[r] = k
                best_margin[r] = m[j]
    return _finish(result, single)


AttackFn = Callable[[Network, np.ndarray, np.ndarray, np.ndarray], AttackResult]


def as_attack(attack) -> AttackFn:
    """Normalize an ``AttackConfig`` or callable into ``fn(net, x, labels, indices)``."""
    if isinstance(attack, AttackConfig):
        return lambda net, x, y, idx: run_attack(net, x, y, attack, idx)
    return attack


def attack_dataset(net: Network, x, labels, attack, threads: int = 1, indices=None) -> AttackResult:
    """Run ``attack`` over a dataset in fixed-size chunks (optionally on a thread pool).

    Chunk boundaries do not depend on ``threads``, so results are identical
    for any worker count.
    """
    fn = as_attack(attack)
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    starts = list(range(0, len(x), CHUNK))

    def one(s):
        sl = slice(s, s + CHUNK)
        return fn(net, x[sl], labels[sl], indices[sl])

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, starts))
    else:
        parts = [one(s) for s in starts]
    if isinstance(parts[0], AttackResult):
        return AttackResult.concat(parts)
    return np.concatenate([np.asarray(p) for p in parts])


def robust_accuracy(net: Network, x, labels, attack, threads: int = 1) -> dict:
    """Fraction of examples classified correctly both clean and at the adversarial point.

    ``attack`` is an ``AttackConfig`` or a callable ``fn(net, x, labels,
    indices)`` returning an ``AttackResult`` or an array of adversarial inputs.
    Clean-misclassified examples count as non-robust.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    clean = predict(net, x) == labels
    fn = as_attack(attack)
    out = attack_dataset(net, x, labels, fn, threads)
    adv = out.adv_x if isinstance(out, AttackResult) else np.asarray(out)
    robust = clean & (predict(net, adv) == labels)
    return {
        "clean_acc": float(clean.mean()),
        "robust_acc": float(robust.mean()),
        "robust": robust,
        "result": out if isinstance(out, AttackResult) else None,
    }
