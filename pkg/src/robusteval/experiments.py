"""Experiment runners: case-study sweeps, transfer runs and verifier comparisons.

Every runner returns plain records and can write them as CSV: one comment
line with a timestamp, one header row, then one record per line. Apart from
the timestamp line the output is a pure function of the config.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, compensated_attack, ensemble_members, robust_accuracy
from .config import ExperimentConfig
from .data import gen_synthetic, load_idx
from .diagnostics import gradient_agreement, zero_loss_report
from .network import Network, build_network, load_model, parse_layers, predict, scale_logits
from .numerics import Precision
from .training import TrainingDivergedError, prune_finetune, train
from .verifier import certified_accuracy

log = logging.getLogger(__name__)

ORDER_SLACK = 1e-9


class InvariantError(AssertionError):
    """A record violates certified <= compensated <= vanilla <= clean."""


@dataclass
class EvalRecord:
    model_id: str
    sweep_axis: str
    sweep_value: object
    epsilon: float
    clean_acc: float | None = None
    robust_acc_vanilla: float | None = None
    robust_acc_compensated: float | None = None
    certified_acc: float | None = None
    zero_loss_fraction: float | None = None
    zero_grad_fraction: float | None = None
    nonconverged_fraction: float | None = None
    mean_grad_cosine: float | None = None
    kink_fraction: float | None = None
    gap: float | None = None
    status: str = "ok"

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def check_order(self) -> None:
        if self.status != "ok":
            return
        chain = [("certified_acc", self.certified_acc),
                 ("robust_acc_compensated", self.robust_acc_compensated),
                 ("robust_acc_vanilla", self.robust_acc_vanilla),
                 ("clean_acc", self.clean_acc)]
        for (na, a), (nb, b) in zip(chain, chain[1:]):
            if a > b + ORDER_SLACK:
                raise InvariantError(f"{self.model_id} eps={self.epsilon}: {na}={a} > {nb}={b}")


# --------------------------------------------------------------------------
# CSV


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, columns: list[str], rows: list[dict]) -> None:
    stamp = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
    buf = io.StringIO()
    buf.write(f"# generated {stamp}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_records(path, records: list[EvalRecord]) -> None:
    for rec in records:
        rec.check_order()
    write_csv(path, EvalRecord.columns(), [asdict(r) for r in records])


def write_plot_data(csv_path, out_path, x: str, ys: list[str], group: str | None = None) -> None:
    """Whitespace-separated columns for gnuplot; one data block per ``group`` value."""
    rows = read_csv(csv_path)
    if not rows:
        raise ValueError(f"{csv_path} has no rows")
    for col in [x, *ys] + ([group] if group else []):
        if col not in rows[0]:
            raise ValueError(f"column {col!r} not in {csv_path}")
    blocks: dict[str, list[dict]] = {}
    for row in rows:
        blocks.setdefault(row[group] if group else "", []).append(row)
    out = [f"# {x} " + " ".join(ys)]
    for key, block in blocks.items():
        if group:
            out.append(f"# {group}={key}")
        for row in block:
            out.append(" ".join(row[c] if row[c] != "" else "NaN" for c in [x, *ys]))
        out.extend(["", ""])
    Path(out_path).write_text("\n".join(out).rstrip("\n") + "\n")


# --------------------------------------------------------------------------
# data and models from a config


def input_shape(cfg: ExperimentConfig) -> tuple:
    if cfg.model.input_shape:
        return tuple(int(d) for d in cfg.model.input_shape)
    first = parse_layers(cfg.model.layers)[0]
    if not hasattr(first, "in_features"):
        raise ValueError("model.input_shape is required for convolutional models")
    return (first.in_features,)


def load_data(cfg: ExperimentConfig):
    """``(x_train, y_train, x_test, y_test)`` shaped for the configured model."""
    d = cfg.data
    shape = input_shape(cfg)
    if d.kind == "synthetic":
        xtr, ytr = gen_synthetic(d.classes, d.dims, d.separation, d.count, d.seed, d.sigma)
        xte, yte = gen_synthetic(d.classes, d.dims, d.separation, d.test_count, d.seed + 1, d.sigma)
    else:
        x, y = load_idx(d.images, d.labels)
        if d.test_images:
            xt, yt = load_idx(d.test_images, d.test_labels or d.labels)
            xtr, ytr = x[:d.count], y[:d.count]
            xte, yte = xt[:d.test_count], yt[:d.test_count]
        else:
            xtr, ytr = x[:d.count], y[:d.count]
            xte, yte = x[d.count:d.count + d.test_count], y[d.count:d.count + d.test_count]
    return (xtr.reshape((-1,) + shape), ytr, xte.reshape((-1,) + shape), yte)


def make_model(cfg: ExperimentConfig, xtr, ytr, width: float | None = None,
               reg_lambda: float | None = None) -> Network:
    net = build_network(parse_layers(cfg.model.layers), cfg.model.width if width is None else width,
                        cfg.model.seed, input_shape(cfg), Precision(cfg.model.precision))
    net, _ = train(net, xtr, ytr, cfg.train_config(reg_lambda))
    return net


def finish_model(cfg: ExperimentConfig, net: Network) -> Network:
    if cfg.model.logit_scale != 1.0:
        net = scale_logits(net, cfg.model.logit_scale)
    return net


# --------------------------------------------------------------------------
# evaluation


def compensated_fn(cfg: ExperimentConfig, vanilla: AttackConfig):
    members = ensemble_members(vanilla, cfg.surrogate_mode(), cfg.adaptive())
    return lambda net, x, y, idx: compensated_attack(net, x, y, vanilla, idx, members)


def evaluate(net: Network, x, y, cfg: ExperimentConfig, epsilons, model_id: str, axis: str, value,
             threads: int = 1) -> list[EvalRecord]:
    """One record per epsilon: accuracies, certificate, failure-mode statistics and gap."""
    report = zero_loss_report(net, x, y, Precision(cfg.attack.precision))
    cos, _, kink = gradient_agreement(net, x, y, surrogate=cfg.surrogate_mode())
    records = []
    for eps in epsilons:
        vanilla = cfg.attack_config(eps)
        rv = robust_accuracy(net, x, y, vanilla, threads)
        rc = robust_accuracy(net, x, y, compensated_fn(cfg, vanilla), threads)
        rec = EvalRecord(
            model_id=model_id,
            sweep_axis=axis,
            sweep_value=value,
            epsilon=float(eps),
            clean_acc=rv["clean_acc"],
            robust_acc_vanilla=rv["robust_acc"],
            robust_acc_compensated=rc["robust_acc"],
            certified_acc=certified_accuracy(net, x, y, eps, cfg.attack.lo, cfg.attack.hi),
            zero_loss_fraction=report.zero_loss_fraction,
            zero_grad_fraction=report.zero_grad_fraction,
            nonconverged_fraction=float(np.mean(rv["result"].not_converged)),
            mean_grad_cosine=float(np.mean(cos)),
            kink_fraction=float(np.mean(kink)),
            gap=rv["robust_acc"] - rc["robust_acc"],
        )
        rec.check_order()
        records.append(rec)
    return records


def _failed(model_id, axis, value, epsilons, exc) -> list[EvalRecord]:
    msg = f"failed: {exc}".replace("\n", " ")
    return [EvalRecord(model_id, axis, value, float(e), status=msg) for e in epsilons]


def run_sweep(cfg: ExperimentConfig, out=None, threads: int | None = None) -> list[EvalRecord]:
    """Train/evaluate one model per sweep value and emit one record per (value, epsilon)."""
    threads = threads or cfg.output.threads
    xtr, ytr, xte, yte = load_data(cfg)
    axis = cfg.sweep.axis
    values = list(cfg.sweep.values) if axis != "none" else [""]
    epsilons = list(cfg.attack.epsilons)
    base = None
    if axis in ("prune", "epsilon", "none"):
        base = make_model(cfg, xtr, ytr)

    def point(value):
        model_id = f"{cfg.name}/{axis}={value}" if axis != "none" else cfg.name
        eps_list = [value] if axis == "epsilon" else epsilons
        try:
            if axis == "width":
                net = make_model(cfg, xtr, ytr, width=float(value))
            elif axis == "reg_lambda":
                net = make_model(cfg, xtr, ytr, reg_lambda=float(value))
            elif axis == "prune":
                net, _ = prune_finetune(base, xtr, ytr, float(value), cfg.train_config(finetune=True),
                                        cfg.sweep.prune_scope)
            else:
                net = base
            net = finish_model(cfg, net)
        except TrainingDivergedError as exc:
            log.warning("%s: %s", model_id, exc)
            return _failed(model_id, axis, value, eps_list, exc)
        log.info("evaluating %s", model_id)
        return evaluate(net, xte, yte, cfg, eps_list, model_id, axis, value)

    if threads > 1 and len(values) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(point, values))
    else:
        chunks = [point(v) for v in values]
    records = [r for chunk in chunks for r in chunk]
    if out:
        write_records(out, records)
    return records


TRANSFER_COLUMNS = [
    "epsilon", "target_clean_acc", "surrogate_clean_acc",
    "transfer_robust_vanilla", "transfer_robust_compensated",
    "whitebox_robust_vanilla", "whitebox_robust_compensated",
]


def run_transfer(surrogate, target, cfg: ExperimentConfig, x, y, epsilons=None, out=None,
                 threads: int = 1) -> list[dict]:
    """Craft examples on ``surrogate`` (vanilla and compensated) and score them on ``target``.

    ``surrogate`` and ``target`` are networks or model file paths.
    """
    surrogate = load_model(surrogate) if not isinstance(surrogate, Network) else surrogate
    target = load_model(target) if not isinstance(target, Network) else target
    if surrogate.input_shape != target.input_shape or surrogate.n_classes != target.n_classes:
        raise ValueError(
            f"surrogate {surrogate.input_shape}->{surrogate.n_classes} and target "
            f"{target.input_shape}->{target.n_classes} do not share input/class shapes"
        )
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    target_clean = predict(target, x) == y
    rows = []
    for eps in (epsilons if epsilons is not None else cfg.attack.epsilons):
        vanilla = cfg.attack_config(eps)
        row = {"epsilon": float(eps), "target_clean_acc": float(target_clean.mean())}
        for name, attack in (("vanilla", vanilla), ("compensated", compensated_fn(cfg, vanilla))):
            on_sur = robust_accuracy(surrogate, x, y, attack, threads)
            adv = on_sur["result"].adv_x
            row["surrogate_clean_acc"] = on_sur["clean_acc"]
            row[f"transfer_robust_{name}"] = float(np.mean(target_clean & (predict(target, adv) == y)))
            row[f"whitebox_robust_{name}"] = robust_accuracy(target, x, y, attack, threads)["robust_acc"]
        rows.append(row)
    if out:
        write_csv(out, TRANSFER_COLUMNS, rows)
    return rows


VERIFY_COLUMNS = [
    "epsilon", "clean_acc", "certified_acc", "robust_acc_vanilla", "robust_acc_compensated",
    "gap_vanilla", "gap_compensated",
]


def run_verify_compare(model, x, y, epsilons, cfg: ExperimentConfig, out=None, threads: int = 1) -> list[dict]:
    """Certified accuracy next to vanilla and compensated robust accuracy, per epsilon.

    The gaps are empirical minus certified accuracy for each attack.
    """
    net = load_model(model) if not isinstance(model, Network) else model
    rows = []
    for eps in epsilons:
        vanilla = cfg.attack_config(eps)
        rv = robust_accuracy(net, x, y, vanilla, threads)
        rc = robust_accuracy(net, x, y, compensated_fn(cfg, vanilla), threads)
        cert = certified_accuracy(net, x, y, eps, cfg.attack.lo, cfg.attack.hi)
        rec = EvalRecord("verify", "epsilon", eps, float(eps), rv["clean_acc"], rv["robust_acc"],
                         rc["robust_acc"], cert)
        rec.check_order()
        rows.append({
            "epsilon": float(eps),
            "clean_acc": rv["clean_acc"],
            "certified_acc": cert,
            "robust_acc_vanilla": rv["robust_acc"],
            "robust_acc_compensated": rc["robust_acc"],
            "gap_vanilla": rv["robust_acc"] - cert,
            "gap_compensated": rc["robust_acc"] - cert,
        })
    if out:
        write_csv(out, VERIFY_COLUMNS, rows)
    return rows
