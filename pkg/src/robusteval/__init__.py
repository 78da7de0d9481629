"""Robustness evaluation for small feed-forward networks.

Attacks, failure-mode diagnostics, interval bound verification and the
training and sweep machinery around them.
"""

__version__ = "0.1.0"

from .attacks import (Adaptive, AttackConfig, AttackResult, ThreatModel, adaptive_pgd,  # noqa: E402
                      attack_dataset, compensated_attack, ensemble_members, fgsm, pgd, robust_accuracy,
                      run_attack)
from .network import (EXACT, SURROGATE, BackwardMode, Network, build_network, forward,  # noqa: E402
                      load_model, parse_layers, predict, save_model)
from .numerics import LossKind, Precision  # noqa: E402
from .verifier import certified_accuracy, certify, ibp_bounds  # noqa: E402

__all__ = [
    "Adaptive", "AttackConfig", "AttackResult", "ThreatModel", "adaptive_pgd", "attack_dataset",
    "compensated_attack", "ensemble_members", "fgsm", "pgd", "robust_accuracy", "run_attack",
    "EXACT", "SURROGATE", "BackwardMode", "Network", "build_network", "forward", "load_model",
    "parse_layers", "predict", "save_model", "LossKind", "Precision", "certified_accuracy",
    "certify", "ibp_bounds", "__version__",
]
