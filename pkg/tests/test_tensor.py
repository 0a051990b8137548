import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binopt.tensor import (BackwardStateError, BatchNormState, ContractError, DimensionError, Tape,
                           Tensor, add, avg_pool2d, backward, batchnorm, conv2d, linear, matmul, mul,
                           power, reshape, softmax_cross_entropy, tensor_mean, tensor_sum)
from oracles import op_gradient_errors

SEEDS = range(5)


def rand(rng, *shape):
    return Tensor(rng.uniform(-2, 2, shape), requires_grad=True)


# --- examples ---------------------------------------------------------------

def test_matmul_identity_and_hand_values():
    assert np.array_equal(matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]])).data, [[3, 4], [5, 6]])
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_all_ones_and_delta_kernel():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data.tolist() == [[[[9.0]]]]
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    assert np.array_equal(conv2d(Tensor(x), Tensor(k), pad=1).data, x)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for f in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, f, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[f])
    assert np.allclose(out, ref, atol=1e-12)


def test_batchnorm_constant_input_gives_beta():
    x = np.ones((4, 2, 3, 3)) * np.array([3.0, -1.0])[None, :, None, None]
    beta = Tensor([0.25, -0.5])
    out = batchnorm(Tensor(x), Tensor([1.0, 2.0]), beta)
    assert np.max(np.abs(out.data - beta.data[None, :, None, None])) < 1e-3


def test_batchnorm_normalizes():
    x = np.random.default_rng(2).normal(3, 5, size=(8, 3, 4, 4))
    out = batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-10)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-6)


def test_batchnorm_eval_uses_running_stats():
    st_ = BatchNormState(2)
    x = np.random.default_rng(3).normal(size=(16, 2))
    batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), running_stats=st_)
    assert np.allclose(st_.running_mean, 0.1 * x.mean(axis=0))
    assert np.allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
    with pytest.raises(ContractError):
        batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), training=False)


def test_cross_entropy_examples():
    assert softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(np.log(4), abs=1e-12)
    logits = np.zeros((1, 4))
    logits[0, 2] = 1000.0
    assert softmax_cross_entropy(Tensor(logits), [2]).item() < 1e-6
    with pytest.raises(IndexError):
        softmax_cross_entropy(Tensor(np.zeros((1, 4))), [4])


def test_scalar_chain_rule():
    x = Tensor(2.0, requires_grad=True)
    backward(mul(x, 3.0))
    assert x.grad == 3.0
    x = Tensor(5.0, requires_grad=True)
    backward(x ** 2)
    assert x.grad == 10.0


# --- finite differences -----------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_every_op_matches_finite_differences(seed):
    for name, err, tol in op_gradient_errors(seed):
        assert err < tol, name


# --- tape semantics ---------------------------------------------------------

def test_shared_input_accumulates_both_paths():
    rng = np.random.default_rng(0)
    a = rand(rng, 3)
    backward(tensor_sum(mul(a, a)))
    b = Tensor(a.data.copy(), requires_grad=True)
    backward(tensor_sum(power(b, 2)))
    assert np.allclose(a.grad, b.grad, rtol=0, atol=1e-15)


def test_tape_is_topological_and_visits_once():
    a = Tensor(np.ones(3), requires_grad=True)
    b = mul(a, 2.0)
    c = add(b, b)
    loss = tensor_sum(c)
    tape = Tape.from_output(loss)
    idx = [n._index for n in tape.nodes]
    assert idx == sorted(idx) and len(set(map(id, tape.nodes))) == len(tape) == 3
    backward(loss)
    assert np.array_equal(a.grad, [4.0, 4.0, 4.0])
    assert all(t.grad is not None for t in (b, c, loss))


def test_backward_twice_is_rejected_and_non_scalar_rejected():
    a = Tensor(np.ones(2), requires_grad=True)
    loss = tensor_sum(a)
    backward(loss)
    with pytest.raises(BackwardStateError):
        backward(loss)
    with pytest.raises(ContractError):
        backward(mul(a, 2.0))


def test_no_graph_without_requires_grad():
    out = add(Tensor([1.0]), Tensor([2.0]))
    assert out.is_leaf and not out.requires_grad


def test_repeated_runs_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x, w = rand(rng, 2, 3, 6, 6), rand(rng, 4, 3, 3, 3)
        loss = tensor_mean(power(conv2d(x, w, 1, 1), 2))
        backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()
    a, b = run(), run()
    assert a[0] == b[0] and np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_grad_shapes_match_data(m, k, seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, m, k), rand(rng, k, m)
    backward(tensor_sum(matmul(a, b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert np.allclose(a.grad, np.tile(b.data.sum(axis=1), (m, 1)))
