import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robusteval.attacks import (Adaptive, AttackConfig, ThreatModel, adaptive_pgd, attack_dataset,
                                compensated_attack, ensemble_members, fgsm, pgd, robust_accuracy, run_attack,
                                trace_improving)
from robusteval.network import EXACT, SURROGATE, predict
from robusteval.numerics import LossKind

from _toys import ARCHS, F32, F64, net_with, random_net, saturating_net


def cfg(eps, **kw):
    kw.setdefault("threat", ThreatModel(eps))
    return AttackConfig(**kw)


def slope_net(w):
    """1-input, 2-class linear net: margin loss for label 0 is 2*w*x."""
    return net_with("affine(1,2)", [([[-w], [w]], [0.0, 0.0])])


def test_threat_model_validation():
    with pytest.raises(ValueError):
        ThreatModel(-0.1)
    with pytest.raises(ValueError):
        ThreatModel(0.1, 1.0, 1.0)


def test_attack_config_validation():
    with pytest.raises(ValueError):
        cfg(0.1, kind="pgd", step_alpha=-1.0)
    with pytest.raises(ValueError):
        cfg(0.1, iters=50, adaptive=Adaptive(max_iters=10))
    with pytest.raises(ValueError):
        cfg(0.1, kind="cw")
    assert cfg(0.2, iters=40).alpha == pytest.approx(2.5 * 0.2 / 40)
    assert cfg(0.2, kind="margin_pgd").objective is LossKind.MARGIN


# fgsm

def test_fgsm_sign_step():
    # margin-loss gradient is -2 at every x
    res = fgsm(slope_net(-1.0), np.array([0.5]), 0, cfg(0.1, kind="fgsm", loss=LossKind.MARGIN))
    np.testing.assert_array_equal(res.adv_x, [0.4])


def test_fgsm_zero_gradient_leaves_x():
    net = saturating_net(200.0)
    x = np.array([0.55, 0.45])
    res = fgsm(net, x, 0, cfg(0.1, kind="fgsm"))
    np.testing.assert_array_equal(res.adv_x, x)
    assert res.zero_grad_hit and res.zero_loss_hit and not res.success


def test_fgsm_eps_zero():
    net = saturating_net(1.0)
    x = np.array([[0.7, 0.2], [0.2, 0.7]])
    res = fgsm(net, x, np.array([0, 0]), cfg(0.0, kind="fgsm"))
    np.testing.assert_array_equal(res.adv_x, x)
    np.testing.assert_array_equal(res.success, [False, True])


def test_nan_gradient_is_a_failure_not_robustness():
    net = net_with("affine(1,2)", [([[np.inf], [0.0]], [0, 0])])
    res = fgsm(net, np.array([0.5]), 1, cfg(0.1, kind="fgsm"))
    assert res.nonfinite and not res.success
    np.testing.assert_array_equal(res.adv_x, [0.5])


# pgd

def test_pgd_projection_walk():
    net = slope_net(1.0)
    base = dict(threat=ThreatModel(0.3), step_alpha=0.25, loss=LossKind.MARGIN)
    walk = [float(pgd(net, np.array([0.5]), 0, AttackConfig(iters=k, **base)).adv_x[0]) for k in (1, 2, 3)]
    assert walk == [0.75, 0.8, 0.8]


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(list(ARCHS)), st.integers(0, 10_000), st.floats(0.0, 0.5), st.sampled_from(list(LossKind)))
def test_single_step_pgd_is_fgsm(arch, seed, eps, loss):
    net = random_net(arch, seed, F32)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(5,) + net.input_shape)
    y = rng.integers(0, 3, 5)
    a = fgsm(net, x, y, cfg(eps, kind="fgsm", loss=loss))
    b = pgd(net, x, y, cfg(eps, iters=1, step_alpha=eps or 1.0, loss=loss))
    assert a.adv_x.tobytes() == b.adv_x.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(list(ARCHS)), st.integers(0, 10_000), st.floats(0.0, 0.4), st.booleans())
def test_adversarial_points_stay_in_box(arch, seed, eps, start):
    net = random_net(arch, seed, F32)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(4,) + net.input_shape)
    res = pgd(net, x, rng.integers(0, 3, 4), cfg(eps, iters=5, step_alpha=0.1, random_start=start, seed=seed))
    # x + eps is rounded before the distance is measured: allow two ulps
    ulp = np.spacing(np.maximum(np.abs(x), np.abs(res.adv_x)))
    assert np.all(np.abs(res.adv_x - x) <= eps + 2 * ulp)
    assert np.all((res.adv_x >= 0) & (res.adv_x <= 1))
    assert all(len(t) == it + 1 for t, it in zip(res.loss_trace, res.iters_used))


def test_saturated_pgd_never_moves():
    net = saturating_net(200.0)
    x = np.array([[0.55, 0.45], [0.6, 0.3]])
    res = pgd(net, x, np.array([0, 0]), cfg(0.1, iters=20))
    np.testing.assert_array_equal(res.adv_x, x)
    assert all(np.all(t == 0.0) for t in res.loss_trace)
    started = pgd(net, x, np.array([0, 0]), cfg(0.1, iters=20, random_start=True, seed=3))
    one = pgd(net, x, np.array([0, 0]), cfg(0.1, iters=1, random_start=True, seed=3))
    # only the random start moves the point
    np.testing.assert_array_equal(started.adv_x, one.adv_x)
    assert not np.array_equal(started.adv_x, x)


def test_random_start_depends_on_example_index_only():
    net = random_net("affine", 0, F32)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(6, 5))
    y = rng.integers(0, 3, 6)
    c = cfg(0.2, iters=3, random_start=True, seed=11)
    full = run_attack(net, x, y, c)
    part = run_attack(net, x[3:], y[3:], c, indices=np.arange(3, 6))
    np.testing.assert_array_equal(full.adv_x[3:], part.adv_x)


def test_early_exit_stops_on_misclassification():
    net = slope_net(1.0)  # class 0 iff x <= 0
    c = AttackConfig(ThreatModel(0.3, -1.0, 1.0), step_alpha=0.1, iters=10, loss=LossKind.MARGIN, early_exit=True)
    res = pgd(net, np.array([-0.05]), 0, c)
    assert res.success and res.iters_used == 1


# adaptive

def test_adaptive_constant_loss_stops_after_patience():
    net = saturating_net(200.0)
    res = adaptive_pgd(net, np.array([0.55, 0.45]), 0,
                       cfg(0.1, iters=1, adaptive=Adaptive(max_iters=500, rel_tol=1e-4, patience=20)))
    assert res.iters_used == 21 and not res.not_converged


def test_adaptive_linear_improvement_hits_the_cap():
    net = net_with("affine(1,2)", [([[-1.0], [1.0]], [50.0, 0.0])])
    c = AttackConfig(ThreatModel(50.0, -100.0, 100.0), step_alpha=0.01, iters=5, loss=LossKind.MARGIN,
                     adaptive=Adaptive(max_iters=200, rel_tol=1e-4, patience=10))
    res = adaptive_pgd(net, np.array([0.0]), 0, c)
    assert res.iters_used == 200 and res.not_converged


def test_adaptive_requires_policy():
    with pytest.raises(ValueError):
        adaptive_pgd(slope_net(1.0), np.array([0.5]), 0, cfg(0.1))


def test_trace_improving():
    assert trace_improving([0.5, 0.6, 0.7], 1e-4, 1)
    assert not trace_improving([1.0, 1.5, 1.5001, 1.50011], 1e-3, 2)
    assert not trace_improving([0.0, 0.0, 0.0], 1e-4, 2)


# compensated attack

def test_ensemble_order():
    base = cfg(0.1)
    members = ensemble_members(base)
    assert members[0] == base
    got = [(m.loss, m.mode) for m in members[1:]]
    assert got == [(LossKind.CE_STABLE, EXACT), (LossKind.CE_STABLE, SURROGATE),
                   (LossKind.MARGIN, EXACT), (LossKind.MARGIN, SURROGATE)]
    assert all(m.adaptive is not None for m in members[1:])


def test_compensated_recovers_zero_loss_failure():
    net = saturating_net(200.0)
    x = np.array([0.55, 0.45])
    base = cfg(0.1)
    assert not pgd(net, x, 0, base).success
    res = compensated_attack(net, x, 0, base)
    assert res.success and res.member >= 1
    assert predict(net, res.adv_x) == 1


def test_compensated_fails_when_no_corner_flips():
    # linear model: the worst case over the box is attained at a corner
    net = saturating_net(1.0, F64)
    x = np.array([[0.8, 0.2], [0.3, 0.6]])
    y = np.array([0, 1])
    eps = 0.1
    for xi, yi in zip(x, y):
        corners = [xi + eps * np.array(s) for s in itertools.product((-1, 1), repeat=2)]
        assert all(predict(net, np.clip(c, 0, 1)) == yi for c in corners)
    res = compensated_attack(net, x, y, cfg(eps))
    assert not res.success.any()


@pytest.mark.parametrize("arch", list(ARCHS))
def test_compensated_success_is_superset_of_members(arch):
    net = random_net(arch, 4, F32)
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(20,) + net.input_shape)
    y = predict(net, x)
    base = cfg(0.05, iters=10, random_start=True, seed=2)
    members = ensemble_members(base, adaptive=Adaptive(max_iters=60, patience=10))
    comp = compensated_attack(net, x, y, base, members=members)
    for m in members:
        assert np.all(comp.success >= run_attack(net, x, y, m).success)


# dataset-level

def test_robust_accuracy_eps_zero_and_identity():
    net = random_net("affine", 1, F32)
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(50, 5))
    y = rng.integers(0, 3, 50)
    clean = float(np.mean(predict(net, x) == y))
    assert robust_accuracy(net, x, y, cfg(0.0, iters=5))["robust_acc"] == clean
    identity = robust_accuracy(net, x, y, lambda n, xb, yb, idx: xb)
    assert identity["robust_acc"] == identity["clean_acc"] == clean


def test_robust_accuracy_compensated_not_above_vanilla():
    net = random_net("maxpool", 2, F32)
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(30,) + net.input_shape)
    y = predict(net, x)
    base = cfg(0.03, iters=5)
    van = robust_accuracy(net, x, y, base)["robust_acc"]
    comp = robust_accuracy(net, x, y, lambda n, xb, yb, idx: compensated_attack(n, xb, yb, base, idx))["robust_acc"]
    assert comp <= van


def test_results_do_not_depend_on_thread_count():
    net = random_net("affine", 3, F32)
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(600, 5))
    y = rng.integers(0, 3, 600)
    c = cfg(0.1, iters=3, random_start=True, seed=5)
    a = attack_dataset(net, x, y, c, threads=1)
    b = attack_dataset(net, x, y, c, threads=4)
    assert a.adv_x.tobytes() == b.adv_x.tobytes()
    np.testing.assert_array_equal(a.success, b.success)


def test_fgsm_robust_accuracy_monotone_in_eps_on_linear_model():
    net = saturating_net(1.0, F64)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(200, 2))
    y = predict(net, x)
    accs = [robust_accuracy(net, x, y, cfg(e, kind="fgsm"))["robust_acc"] for e in np.linspace(0, 0.5, 11)]
    assert all(b <= a for a, b in zip(accs, accs[1:]))
