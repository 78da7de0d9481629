"""Command-line entry point: ``robusteval <command> --config FILE ...``.

Exit status is 0 on success, 1 for an invalid config or arguments and 2 when
a run fails (unreadable data or model, diverged training, broken invariant).
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .diagnostics import failure_report
from .experiments import (EvalRecord, evaluate, finish_model, load_data, make_model, run_sweep,
                          run_transfer, run_verify_compare, write_csv, write_plot_data, write_records)
from .network import load_model, save_model

log = logging.getLogger("robusteval")

DIAGNOSE_COLUMNS = [
    "epsilon", "zero_loss_fraction", "zero_grad_fraction", "mean_grad_cosine_exact_vs_surrogate",
    "kink_proximity_fraction", "nonconverged_fraction",
]
PER_EXAMPLE_COLUMNS = [
    "epsilon", "index", "loss", "grad_inf_norm", "zero_loss", "zero_grad", "grad_cosine",
    "exact_grad_zero", "kink_fraction", "not_converged", "iters_used",
]


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.output.threads = args.threads
    if args.out:
        cfg.output.path = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    xtr, ytr, _, _ = load_data(cfg)
    net = finish_model(cfg, make_model(cfg, xtr, ytr))
    save_model(net, cfg.output.path)
    log.info("saved %s (%d parameters)", cfg.output.path, net.num_params())
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args)
    net = load_model(args.model)
    _, _, x, y = load_data(cfg)
    records = evaluate(net, x, y, cfg, cfg.attack.epsilons, args.model, "epsilon", "",
                       cfg.output.threads)
    write_records(cfg.output.path, records)
    return 0


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    net = load_model(args.model)
    _, _, x, y = load_data(cfg)
    rows, per = [], []
    for eps in cfg.attack.epsilons:
        rep = failure_report(net, x, y, cfg.attack_config(eps), cfg.output.threads, cfg.surrogate_mode())
        rows.append({"epsilon": float(eps), **rep.summary()})
        per.extend({"epsilon": float(eps), **row} for row in rep.per_example)
    write_csv(cfg.output.path, DIAGNOSE_COLUMNS, rows)
    if args.per_example:
        write_csv(args.per_example, PER_EXAMPLE_COLUMNS, per)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    records = run_sweep(cfg, cfg.output.path, cfg.output.threads)
    failed = sum(r.status != "ok" for r in records)
    if failed:
        log.warning("%d of %d rows failed", failed, len(records))
    return 0


def cmd_transfer(args) -> int:
    cfg = _config(args)
    _, _, x, y = load_data(cfg)
    run_transfer(args.surrogate, args.target, cfg, x, y, out=cfg.output.path, threads=cfg.output.threads)
    return 0


def cmd_verify(args) -> int:
    cfg = _config(args)
    _, _, x, y = load_data(cfg)
    run_verify_compare(args.model, x, y, cfg.attack.epsilons, cfg, cfg.output.path, cfg.output.threads)
    return 0


def cmd_plot(args) -> int:
    write_plot_data(args.input, args.out, args.x, args.y.split(","), args.group or None)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robusteval", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, model=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value config file (defaults are used when omitted)")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--threads", type=int, help="worker threads (results do not depend on this)")
        p.add_argument("--out", help="output path (overrides output.path)")
        if model:
            p.add_argument("--model", required=True, help="model file written by `train`")
        p.set_defaults(func=func)
        return p

    add("train", cmd_train, "train a model and save it")
    add("attack", cmd_attack, "vanilla and compensated attacks on a saved model", model=True)
    p = add("diagnose", cmd_diagnose, "failure-mode statistics for a saved model", model=True)
    p.add_argument("--per-example", help="also write per-example diagnostics to this CSV")
    add("sweep", cmd_sweep, "run a case-study sweep from the config")
    p = add("transfer", cmd_transfer, "attack a surrogate model and score the examples on a target")
    p.add_argument("--surrogate", required=True)
    p.add_argument("--target", required=True)
    add("verify", cmd_verify, "compare certified accuracy with empirical robust accuracy", model=True)

    p = sub.add_parser("plot", help="turn a results CSV into gnuplot data")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--x", default="epsilon")
    p.add_argument("--y", default="robust_acc_vanilla,robust_acc_compensated,certified_acc")
    p.add_argument("--group", default="", help="column whose values split the data into blocks")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"robusteval: config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, AssertionError, FloatingPointError) as exc:
        print(f"robusteval: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
