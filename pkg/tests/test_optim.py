import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binopt.optim import (OPTIMIZERS, Optimizer, adabound_bounds, adadelta_step, adagrad_step, adam_step,
                          amsgrad_step, apply_weight_decay, sgd_momentum_step)
from binopt.tensor import DimensionError, Tensor


def scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float reference of the bias-corrected recurrences; returns the updates."""
    v = m = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        v = b1 * v + (1 - b1) * g
        m = b2 * m + (1 - b2) * g * g
        out.append(lr * (v / (1 - b1 ** t)) / (math.sqrt(m / (1 - b2 ** t)) + eps))
    return out


def run(step, grads, lr, **kw):
    w = np.zeros(np.shape(grads[0]))
    state, ups = {}, []
    for t, g in enumerate(grads, 1):
        before = w.copy()
        if step in (adam_step, amsgrad_step):
            step(w, np.asarray(g, dtype=float), state, lr, t, **kw)
        else:
            step(w, np.asarray(g, dtype=float), state, lr, **kw)
        ups.append(before - w)
    return w, state, ups


def test_sgd_momentum_examples():
    _, state, _ = run(sgd_momentum_step, [np.ones(1)] * 3, 0.1)
    assert state["v"][0] == pytest.approx(2.71, abs=1e-15)
    state = {"v": np.ones(1)}
    w = np.zeros(1)
    for t in range(1, 6):
        sgd_momentum_step(w, np.zeros(1), state, 0.1)
        assert state["v"][0] == pytest.approx(0.9 ** t, abs=1e-15)
    assert abs(w[0]) <= 0.1 * 1 / (1 - 0.9)
    w = np.array([1.0])
    sgd_momentum_step(w, w.copy(), {}, 0.1, momentum=0.0)
    assert w[0] == 0.9


@pytest.mark.parametrize("g", [1e-3, 0.5, -7.0, 1e3])
def test_adam_first_step_magnitude(g):
    _, _, ups = run(adam_step, [np.array([g])], 0.01)
    assert abs(abs(ups[0][0]) - 0.01 * abs(g) / (abs(g) + 1e-8)) < 1e-12


def test_adam_scale_invariance_constant_gradient():
    mags = []
    for g in np.logspace(-3, 3, 13):
        _, _, ups = run(adam_step, [np.array([g])] * 50, 0.01)
        mags.append(np.abs(ups))
    ref = mags[len(mags) // 2]
    for m in mags:
        assert np.max(np.abs(m - ref) / ref) < 1e-3
    _, _, ups = run(adam_step, [np.array([0.01, 1.0])] * 30, 0.01)
    assert np.allclose(ups[-1], 0.01, atol=1e-5)


def test_adam_alternating_gradient_matches_hand_simulation():
    grads = [np.array([(-1.0) ** t]) for t in range(20)]
    _, state, ups = run(adam_step, grads, 0.01)
    ref = scalar_adam([float(g[0]) for g in grads], 0.01)
    assert np.allclose([u[0] for u in ups], ref, rtol=0, atol=1e-15)
    m_hat = state["m"][0] / (1 - 0.999 ** 20)
    assert m_hat == pytest.approx(1.0, abs=1e-12)
    assert abs(ups[-1][0]) < 0.2 * abs(ups[0][0])


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(1, 30), st.sampled_from([-1.0, 1.0]))
def test_adam_cumulative_displacement_opposes_gradient(mag, steps, sgn):
    w, _, _ = run(adam_step, [np.array([sgn * mag])] * steps, 0.01)
    assert np.sign(w[0]) == -sgn


def test_weight_decay_examples():
    assert apply_weight_decay(np.array([2.0]), np.array([0.0]), 1e-5)[0] == 2e-5
    g = np.array([0.3])
    assert apply_weight_decay(np.array([5.0]), g, 0.0) is g
    assert apply_weight_decay(np.array([1.0]), np.array([0.0]), -1e-4)[0] == -1e-4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3).filter(lambda x: abs(x) > 1e-6), min_size=1, max_size=30), st.floats(1e-4, 1.0))
def test_sgd_without_momentum_moves_exactly_lr_g(gs, lr):
    w = np.zeros(1)
    for g in gs:
        before = w.copy()
        sgd_momentum_step(w, np.array([g]), {}, lr, momentum=0.0)
        assert before[0] - w[0] == lr * g or abs((before[0] - w[0]) - lr * g) <= 1e-12 * max(1, abs(w[0]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=40), st.integers(0, 2**31 - 1))
def test_amsgrad_never_exceeds_adam_on_shared_stream(gs, seed):
    g2 = np.random.default_rng(seed).normal(size=len(gs))
    grads = [np.array([a, b]) for a, b in zip(gs, g2)]
    _, _, ua = run(adam_step, grads, 0.01)
    _, _, um = run(amsgrad_step, grads, 0.01)
    for a, m in zip(ua, um):
        assert np.all(np.abs(m) <= np.abs(a) + 1e-15)


def test_amsgrad_decreasing_gradients_use_historical_max():
    grads = [np.array([1.0 / t]) for t in range(1, 20)]
    _, state, _ = run(amsgrad_step, grads, 0.01)
    assert state["m_max"][0] == pytest.approx(1.0 * 1e-3 / (1 - 0.999), rel=1e-12)


def test_adagrad_constant_gradient_shrinks_like_inverse_sqrt():
    _, _, ups = run(adagrad_step, [np.ones(1)] * 100, 0.01)
    for t, u in enumerate(ups, 1):
        assert u[0] == pytest.approx(0.01 / math.sqrt(t), rel=1e-8)


@pytest.mark.parametrize("g", [0.01, 1.0, -3.0])
def test_adadelta_first_step(g):
    rho, eps = 0.9, 1e-6
    _, _, ups = run(adadelta_step, [np.array([g])], 1.0, rho=rho, eps=eps)
    assert ups[0][0] == pytest.approx(math.sqrt(eps / (eps + (1 - rho) * g * g)) * g, rel=1e-12)


def test_adabound_bounds_converge_to_final_rate():
    lo, hi = adabound_bounds(0.001, 0.001, 1)
    assert lo < 0.1 < hi
    lo, hi = adabound_bounds(0.001, 0.001, 10**9)
    assert lo == pytest.approx(0.1, rel=1e-5) and hi == pytest.approx(0.1, rel=1e-5)
    lo, hi = adabound_bounds(0.0005, 0.001, 10**9)
    assert lo == pytest.approx(0.05, rel=1e-5)


def _params(rng, shapes=((3, 2), (4,))):
    return [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]


@pytest.mark.parametrize("name", OPTIMIZERS)
def test_zero_gradient_zero_decay_leaves_parameters(name):
    ps = _params(np.random.default_rng(0))
    before = [p.data.copy() for p in ps]
    opt = Optimizer(name, ps, weight_decay=0.0)
    for _ in range(5):
        for p in ps:
            p.grad = np.zeros_like(p.data)
        opt.step()
    for p, b in zip(ps, before):
        assert np.array_equal(p.data, b)


@pytest.mark.parametrize("name", OPTIMIZERS)
def test_state_round_trip_continues_identically(name):
    rng = np.random.default_rng(1)
    grads = [[rng.normal(size=s) for s in ((3, 2), (4,))] for _ in range(8)]
    a = _params(np.random.default_rng(2))
    opt_a = Optimizer(name, a, weight_decay=1e-3)
    for gs in grads[:4]:
        for p, g in zip(a, gs):
            p.grad = g
        opt_a.step()
    b = [Tensor(p.data.copy(), requires_grad=True) for p in a]
    opt_b = Optimizer(name, b)
    opt_b.load_state_dict(opt_a.state_dict())
    for gs in grads[4:]:
        for ps, opt in ((a, opt_a), (b, opt_b)):
            for p, g in zip(ps, gs):
                p.grad = g.copy()
            opt.step()
    for p, q in zip(a, b):
        assert np.array_equal(p.data, q.data)
    for st_ in opt_a.state:
        for k, v in st_.items():
            if k in ("m", "m_max", "sum_sq", "sq_avg", "acc_delta"):
                assert np.all(v >= 0)


def test_decay_mask_and_decoupled_mode():
    w, b = Tensor(np.ones((2, 2)), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    opt = Optimizer("sgd", [w, b], lr=0.1, weight_decay=0.5, decay_mask=[True, False], momentum=0.0)
    opt.step()
    assert np.allclose(w.data, 1 - 0.1 * 0.5) and np.array_equal(b.data, np.ones(2))
    w2 = Tensor(np.ones(2), requires_grad=True)
    opt = Optimizer("adam", [w2], lr=0.1, weight_decay=0.5, decoupled=True)
    w2.grad = np.zeros(2)
    opt.step()
    assert np.allclose(w2.data, 0.95)


def test_errors():
    with pytest.raises(ValueError, match="unknown optimizer"):
        Optimizer("lion", [])
    with pytest.raises(DimensionError):
        sgd_momentum_step(np.zeros(2), np.zeros(3), {}, 0.1)


def test_default_learning_rates():
    assert Optimizer("sgd", []).lr == 0.1 and Optimizer("adam", []).lr == 0.0025
    assert Optimizer("adadelta", []).lr == 1.0 and Optimizer("rmsprop", []).lr == 0.01
