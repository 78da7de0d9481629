import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import logsumexp

from robusteval.numerics import (LossKind, Precision, cross_entropy_naive, cross_entropy_naive_grad,
                                 cross_entropy_stable, cross_entropy_stable_grad, finite_diff_grad,
                                 loss_and_grad, margin_loss, pool_backward, pool_max_forward, relu,
                                 softmax, softplus_grad)

F32, F64 = Precision.BINARY32, Precision.BINARY64
finite = st.floats(-50, 50, allow_nan=False)


# relu / softplus_grad

def test_relu_kink_convention():
    y, d = relu(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y, [0, 0, 2])
    np.testing.assert_array_equal(d, [0, 0, 1])
    y, d = relu(np.array([5.5]))
    assert y[0] == 5.5 and d[0] == 1


def test_softplus_grad_values():
    assert softplus_grad(np.array([0.0]), 1.0)[0] == 0.5
    assert softplus_grad(np.array([1.0]), 0.01)[0] == 1.0
    assert softplus_grad(np.array([-1.0]), 1.0)[0] == pytest.approx(1 / (1 + math.e), rel=1e-15)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softplus_grad_rejects_bad_tau(tau):
    with pytest.raises(ValueError):
        softplus_grad(np.array([1.0]), tau)


@given(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3))
def test_softplus_grad_tends_to_relu_derivative(x):
    got = softplus_grad(np.array([x]), 1e-6)[0]
    assert got == (1.0 if x > 0 else 0.0)


@given(st.floats(1e-3, 100))
def test_softplus_grad_half_at_zero(tau):
    assert softplus_grad(np.array([0.0]), tau)[0] == 0.5


# softmax

def test_softmax_symmetric():
    for p in (F32, F64):
        np.testing.assert_array_equal(softmax(np.array([0.0, 0.0]), p), [0.5, 0.5])


def test_softmax_saturates_in_binary32():
    s = softmax(np.array([30.0, 0.0]), F32)
    assert s.dtype == np.float32
    assert s[0] == 1.0
    # the small entry is representable in binary32 (it is not flushed to zero)
    assert s[1] == np.float32(math.exp(-30) / (1 + math.exp(-30)))


def test_softmax_binary64_keeps_residual():
    s = softmax(np.array([30.0, 0.0]), F64)
    assert s[1] == pytest.approx(9.357622968839e-14, rel=1e-10)
    assert s[0] < 1.0


def test_softmax_saturate_mode_flags_overflow():
    s = softmax(np.array([1000.0, 0.0], dtype=np.float32), F32, saturate=True)
    assert np.isnan(s).any()


@given(arrays(np.float64, st.integers(2, 8), elements=finite))
def test_softmax_is_a_distribution(z):
    s = softmax(z, F64)
    assert np.all(s >= 0)
    assert s.sum() == pytest.approx(1.0, abs=1e-12)


# cross-entropy

def test_naive_ce_examples():
    z = np.array([30.0, 0.0])
    assert cross_entropy_naive(z, 0, F32) == 0.0
    assert cross_entropy_naive(z, 0, F64) == pytest.approx(9.3576e-14, rel=1e-4)
    for p in (F32, F64):
        assert cross_entropy_naive(np.array([0.0, 0.0]), 0, p) == pytest.approx(math.log(2), rel=1e-7)


def test_naive_ce_underflow_is_inf():
    assert cross_entropy_naive(np.array([0.0, 200.0]), 0, F32) == math.inf


def test_naive_ce_zero_is_positive_zero():
    loss = cross_entropy_naive(np.array([30.0, 0.0]), 0, F32)
    assert math.copysign(1.0, loss) == 1.0


def test_naive_ce_threshold_matches_rounding_oracle():
    # binary32 rounds p to 1.0 once 1 - p drops below half an ulp of 1.0 (2**-25);
    # 1 - p = 1 / (1 + e**m), so the switch sits at m = log(2**25 - 1).
    threshold = math.log(2.0**25 - 1)
    for m in np.linspace(0, 40, 801):
        loss = cross_entropy_naive(np.array([m, 0.0]), 0, F32)
        if abs(m - threshold) > 1e-6:
            assert (loss == 0.0) == (m > threshold), m


def test_naive_grad_is_exactly_zero_when_saturated():
    loss, dz = cross_entropy_naive_grad(np.array([30.0, 0.0]), 0, F32)
    assert loss == 0.0
    assert np.all(dz == 0.0)


def test_stable_ce_examples():
    assert cross_entropy_stable(np.array([30.0, 0.0]), 0) == pytest.approx(9.3576e-14, rel=1e-4)
    assert cross_entropy_stable(np.array([0.0, 0.0]), 0) == pytest.approx(math.log(2), rel=1e-15)
    assert cross_entropy_stable(np.array([100.0, 0.0]), 1) == pytest.approx(100.0, rel=1e-12)


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(2, 10), elements=finite), st.data())
def test_stable_ce_matches_logsumexp(z, data):
    label = data.draw(st.integers(0, len(z) - 1))
    lse = logsumexp(z)
    # the oracle itself cancels for small losses, so compare at the scale of lse
    assert cross_entropy_stable(z, label) == pytest.approx(lse - z[label], abs=1e-13 * max(1.0, abs(lse)))


@given(st.floats(0, 700))
def test_stable_ce_two_class_small_loss_is_exact(m):
    # two classes: loss = log1p(exp(-m)) with no cancellation
    assert cross_entropy_stable(np.array([m, 0.0]), 0) == pytest.approx(math.log1p(math.exp(-m)), rel=1e-14)


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-5, 5)), st.data())
def test_stable_grad_matches_finite_differences(z, data):
    label = data.draw(st.integers(0, len(z) - 1))
    _, dz = cross_entropy_stable_grad(z, label)
    fd = finite_diff_grad(lambda v: cross_entropy_stable(v, label), z, 1e-5)
    np.testing.assert_allclose(dz, fd, atol=1e-8)


def test_naive_and_stable_agree_away_from_saturation():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(50, 4))
    labels = rng.integers(0, 4, 50)
    l64, g64 = cross_entropy_naive_grad(z, labels, F64)
    ls, gs = cross_entropy_stable_grad(z, labels)
    np.testing.assert_allclose(l64, ls, rtol=1e-12)
    np.testing.assert_allclose(g64, gs, atol=1e-15)


# margin loss

def test_margin_examples():
    loss, dz = margin_loss(np.array([30.0, 0.0]), 0)
    assert loss == -30
    np.testing.assert_array_equal(dz, [-1, 1])
    loss, dz = margin_loss(np.array([1.0, 1.0]), 0)
    assert loss == 0
    np.testing.assert_array_equal(dz, [-1, 1])
    loss, dz = margin_loss(np.array([0.0, 5.0, 3.0]), 1)
    assert loss == -2
    np.testing.assert_array_equal(dz, [0, -1, 1])


def test_margin_ties_pick_lowest_competitor():
    _, dz = margin_loss(np.array([2.0, 0.0, 2.0, 2.0]), 1)
    np.testing.assert_array_equal(dz, [1, -1, 0, 0])


@given(arrays(np.float64, st.integers(2, 8), elements=finite), st.data())
def test_margin_gradient_is_plus_minus_one(z, data):
    label = data.draw(st.integers(0, len(z) - 1))
    loss, dz = margin_loss(z, label)
    assert loss == np.max(np.delete(z, label)) - z[label]
    assert dz[label] == -1 and dz.sum() == 0 and np.abs(dz).sum() == 2


def test_loss_and_grad_dispatch_and_batching():
    z = np.array([[3.0, 1.0], [0.0, 2.0]])
    labels = np.array([0, 0])
    for kind in LossKind:
        loss, dz = loss_and_grad(kind, z, labels, F64)
        assert loss.shape == (2,) and dz.shape == (2, 2)
        for i in range(2):
            li, di = loss_and_grad(kind, z[i], labels[i], F64)
            assert li == loss[i]
            np.testing.assert_array_equal(di, dz[i])


# pooling

def test_pool_examples():
    y, r = pool_max_forward(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert y.tolist() == [[4.0]] and r.tolist() == [[3]]
    y, r = pool_max_forward(np.full((2, 2), 5.0))
    assert y.tolist() == [[5.0]] and r.tolist() == [[0]]
    y, _ = pool_max_forward(np.arange(16.0).reshape(4, 4), (2, 2), (2, 2))
    assert y.tolist() == [[5, 7], [13, 15]]


def test_pool_window_too_large():
    with pytest.raises(ValueError):
        pool_max_forward(np.zeros((2, 2)), (3, 3))


def test_pool_backward_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    _, r = pool_max_forward(x)
    gx = pool_backward(x, np.array([[1.0]]), routing=r)
    assert gx.tolist() == [[0, 0], [0, 1]]
    gx = pool_backward(x, np.array([[1.0]]), tau=1e6)
    np.testing.assert_allclose(gx, 0.25, atol=1e-6)
    gx = pool_backward(np.array([[0.0, 0.0], [0.0, 30.0]]), np.array([[1.0]]), tau=1.0)
    np.testing.assert_allclose(gx, [[0, 0], [0, 1]], atol=1e-12)


def test_pool_backward_argument_errors():
    x = np.zeros((2, 2))
    _, r = pool_max_forward(x)
    with pytest.raises(ValueError):
        pool_backward(x, np.ones((1, 1)))
    with pytest.raises(ValueError):
        pool_backward(x, np.ones((1, 1)), routing=r, tau=1.0)
    with pytest.raises(ValueError):
        pool_backward(x, np.ones((2, 1)), routing=r)


def _brute_pool(x, k, s):
    h, w = x.shape
    out = np.empty(((h - k) // s + 1, (w - k) // s + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = x[i * s:i * s + k, j * s:j * s + k].max()
    return out


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_pool_forward_matches_brute_force(k, s, n, seed):
    size = k + s * n
    x = np.random.default_rng(seed).integers(0, 4, (size, size)).astype(np.float64)
    y, _ = pool_max_forward(x, (k, k), (s, s))
    np.testing.assert_array_equal(y, _brute_pool(x, k, s))


@given(st.integers(0, 2**31 - 1))
def test_soft_pool_converges_to_exact_when_argmax_unique(seed):
    rng = np.random.default_rng(seed)
    x = rng.permutation(16).astype(np.float64).reshape(4, 4)
    gy = rng.normal(size=(2, 2))
    _, r = pool_max_forward(x)
    np.testing.assert_allclose(pool_backward(x, gy, tau=1e-3), pool_backward(x, gy, routing=r), atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 10))
def test_soft_pool_preserves_gradient_mass(seed, tau):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 6))
    gy = rng.normal(size=(2, 3))
    gx = pool_backward(x, gy, tau=tau)
    assert gx.sum() == pytest.approx(gy.sum(), abs=1e-10)


# finite differences

def test_finite_diff_examples():
    assert finite_diff_grad(lambda v: float(v[0] ** 2), np.array([3.0]), 1e-3)[0] == pytest.approx(6.0, abs=1e-6)
    g = finite_diff_grad(lambda v: float(relu(v)[0].sum()), np.array([2.0, -2.0]), 1e-4)
    np.testing.assert_allclose(g, [1.0, 0.0], atol=1e-9)


def test_finite_diff_matches_affine_ce_gradient():
    rng = np.random.default_rng(3)
    W, b = rng.normal(size=(4, 6)), rng.normal(size=4)
    x = rng.normal(size=6)
    _, dz = cross_entropy_stable_grad(W @ x + b, 2)
    fd = finite_diff_grad(lambda v: cross_entropy_stable(W @ v + b, 2), x, 1e-5)
    np.testing.assert_allclose(W.T @ dz, fd, rtol=1e-5, atol=1e-9)
