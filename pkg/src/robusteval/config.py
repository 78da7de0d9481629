"""Experiment configuration in a flat ``section.key=value`` text format.

Blank lines and lines starting with ``#`` are ignored. Lists are
comma-separated. Every key has a default, so a config file only needs the
keys it changes; unknown keys are rejected.

Example::

    data.kind=synthetic
    data.separation=0.4
    model.layers=affine(2,32);relu;affine(32,2)
    train.epochs=30
    attack.epsilons=0.05,0.1
    sweep.axis=width
    sweep.values=0.5,1,2
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attacks import Adaptive, AttackConfig, ThreatModel
from .network import BackwardMode
from .numerics import LossKind, Precision
from .training import Regularizer, TrainConfig

SWEEP_AXES = ("none", "width", "prune", "reg_lambda", "epsilon")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    kind: str = "synthetic"
    classes: int = 2
    dims: int = 2
    separation: float = 0.5
    sigma: float = 0.05
    count: int = 200
    test_count: int = 200
    seed: int = 0
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class ModelSection:
    layers: str = "affine(2,32);relu;affine(32,2)"
    input_shape: tuple = ()
    width: float = 1.0
    precision: str = "binary32"
    seed: int = 0
    logit_scale: float = 1.0


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    regularizer: str = "none"
    reg_lambda: float = 0.0
    lr_decay: float = 1.0
    decay_every: int = 0
    adversarial: bool = False
    adv_epsilon: float = 0.1
    adv_iters: int = 7
    finetune_epochs: int = 5
    finetune_learning_rate: float = 0.01


@dataclass
class AttackSection:
    kind: str = "pgd"
    epsilons: tuple = (0.05, 0.1, 0.2, 0.3)
    iters: int = 40
    step: float = 0.0
    random_start: bool = True
    seed: int = 0
    loss: str = "ce_naive"
    precision: str = "binary32"
    mode: str = "exact"
    tau_relu: float = 0.1
    tau_pool: float = 0.1
    max_iters: int = 1000
    rel_tol: float = 1e-4
    patience: int = 20
    early_exit: bool = False
    lo: float = 0.0
    hi: float = 1.0


@dataclass
class SweepSection:
    axis: str = "none"
    values: tuple = ()
    prune_scope: str = "per_layer"


@dataclass
class OutputSection:
    path: str = "results.csv"
    threads: int = 1


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)

    # --- validation -------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        if self.sweep.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}, got {self.sweep.axis!r}")
        vals = list(self.sweep.values)
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError("sweep.values must be strictly increasing")
        if self.sweep.axis != "none" and not vals:
            raise ConfigError("sweep.values is empty")
        eps = list(self.attack.epsilons)
        if any(b <= a for a, b in zip(eps, eps[1:])) or any(e < 0 for e in eps):
            raise ConfigError("attack.epsilons must be non-negative and strictly increasing")
        if self.data.kind not in ("synthetic", "idx"):
            raise ConfigError(f"data.kind must be synthetic or idx, got {self.data.kind!r}")
        if self.data.kind == "idx" and not (self.data.images and self.data.labels):
            raise ConfigError("data.images and data.labels are required for idx data")
        for name, value in (("model.precision", self.model.precision), ("attack.precision", self.attack.precision)):
            if value not in ("binary32", "binary64"):
                raise ConfigError(f"{name} must be binary32 or binary64")
        if self.attack.loss not in ("ce_naive", "ce_stable", "margin"):
            raise ConfigError(f"unknown attack.loss {self.attack.loss!r}")
        if self.attack.mode not in ("exact", "surrogate"):
            raise ConfigError(f"unknown attack.mode {self.attack.mode!r}")
        try:
            self.train_config()
            self.attack_config(eps[0] if eps else 0.0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    # --- builders ---------------------------------------------------------

    def attack_config(self, epsilon: float) -> AttackConfig:
        a = self.attack
        return AttackConfig(
            threat=ThreatModel(float(epsilon), a.lo, a.hi),
            kind=a.kind,
            step_alpha=a.step or None,
            iters=a.iters,
            random_start=a.random_start,
            seed=a.seed,
            loss=LossKind(a.loss),
            mode=BackwardMode(a.mode, a.tau_relu, a.tau_pool),
            precision=Precision(a.precision),
            adaptive=None,
            early_exit=a.early_exit,
        )

    def adaptive(self) -> Adaptive:
        a = self.attack
        return Adaptive(max(a.max_iters, a.iters), a.rel_tol, a.patience)

    def surrogate_mode(self) -> BackwardMode:
        return BackwardMode("surrogate", self.attack.tau_relu, self.attack.tau_pool)

    def train_config(self, reg_lambda: float | None = None, finetune: bool = False) -> TrainConfig:
        t = self.train
        adversarial = None
        if t.adversarial:
            adversarial = AttackConfig(
                threat=ThreatModel(t.adv_epsilon, self.attack.lo, self.attack.hi),
                iters=t.adv_iters,
                random_start=True,
                seed=t.seed,
                loss=LossKind.CE_STABLE,
                precision=Precision.BINARY64,
            )
        return TrainConfig(
            epochs=t.finetune_epochs if finetune else t.epochs,
            batch_size=t.batch_size,
            learning_rate=t.finetune_learning_rate if finetune else t.learning_rate,
            momentum=t.momentum,
            seed=t.seed,
            regularizer=Regularizer(t.regularizer, t.reg_lambda if reg_lambda is None else reg_lambda),
            adversarial=adversarial,
            lr_decay=t.lr_decay,
            decay_every=t.decay_every,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        for section in (cfg.data, cfg.model, cfg.train, cfg.attack):
            section.seed = seed
        return cfg

    # --- text format ------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"name={self.name}"]
        for sec in ("data", "model", "train", "attack", "sweep", "output"):
            obj = getattr(self, sec)
            for f in fields(obj):
                lines.append(f"{sec}.{f.name}={_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "name":
                cfg.name = value
                continue
            sec, _, name = key.partition(".")
            obj = getattr(cfg, sec, None) if sec in ("data", "model", "train", "attack", "sweep", "output") else None
            if obj is None or name not in {f.name for f in fields(obj)}:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            default = getattr(type(obj)(), name)
            try:
                setattr(obj, name, _parse(value, default))
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
        return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        nums = [float(s) for s in items]
        if all(n.is_integer() for n in nums) and not any("." in s or "e" in s.lower() for s in items):
            return tuple(int(n) for n in nums)
        return tuple(nums)
    return text


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_text(text).validate()
