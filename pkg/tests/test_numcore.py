import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from prunecert import numcore as nc
from prunecert.numcheck import finite_diff_grad

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
matrices = st.tuples(st.integers(1, 5), st.integers(1, 5)).flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_frobenius_examples():
    assert nc.frobenius_norm([[3, 4]]) == 5.0
    assert nc.frobenius_norm(np.zeros((2, 2))) == 0.0
    assert nc.frobenius_norm([[1, -2], [3, 4]]) == pytest.approx(math.sqrt(30), abs=1e-12)


def test_one_and_inf_norm_examples():
    W = [[1, -2], [3, 4]]
    assert nc.one_norm(W) == 6.0
    assert nc.inf_norm(W) == 7.0
    assert nc.one_norm(np.eye(4)) == nc.inf_norm(np.eye(4)) == 1.0


def test_non_finite_rejected():
    with pytest.raises(nc.InvalidInputError):
        nc.frobenius_norm([[1.0, np.nan]])
    with pytest.raises(nc.InvalidInputError):
        nc.one_norm([[np.inf]])


@pytest.mark.parametrize("W, expected", [(np.diag([3.0, 1.0]), 3.0), ([[0.0, 1.0], [0.0, 0.0]], 1.0),
                                         ([[1.0, 1.0], [1.0, 1.0]], 2.0)])
def test_spectral_examples(W, expected):
    assert nc.spectral_norm(W) == pytest.approx(expected, rel=1e-9)


def test_power_iteration_reports_convergence():
    sigma, ok = nc.power_iteration(np.diag([2.0, 1.0]))
    assert ok and sigma == pytest.approx(2.0, rel=1e-10)
    with pytest.raises(nc.ContractError):
        nc.power_iteration(np.eye(2), tol=0)


@settings(max_examples=200, deadline=None)
@given(matrices)
def test_spectral_below_surrogates(W):
    s = nc.spectral_norm(W)
    bound = min(nc.frobenius_norm(W), math.sqrt(nc.one_norm(W) * nc.inf_norm(W)))
    assert s <= bound * (1 + 1e-9) + 1e-12
    assert s == pytest.approx(np.linalg.norm(W, 2), rel=1e-6, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(matrices, st.data())
def test_zeroing_an_entry_never_increases_norms(W, data):
    i = data.draw(st.integers(0, W.shape[0] - 1))
    j = data.draw(st.integers(0, W.shape[1] - 1))
    V = W.copy()
    V[i, j] = 0.0
    for f in (nc.frobenius_norm, nc.one_norm, nc.inf_norm):
        assert f(V) <= f(W)


def test_grad_scalar_examples():
    tape = nc.Tape()
    x = tape.leaf(3.0)
    assert nc.grad(tape, nc.square(x), [x])[0] == pytest.approx(6.0)
    tape = nc.Tape()
    x = tape.leaf(0.0)
    assert nc.grad(tape, nc.tanh(x), [x])[0] == pytest.approx(1.0)


def test_grad_requires_scalar():
    tape = nc.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(nc.ContractError):
        nc.grad(tape, nc.tanh(x), [x])


def _mlp_loss(x, W1, b1, W2):
    h = nc.relu(nc.add(nc.matmul(x, nc.transpose(W1)), b1))
    out = nc.matmul(h, nc.transpose(W2))
    return nc.mean(nc.square(nc.sub(nc.log_softmax(out), 0.1)))


@pytest.mark.parametrize("seed", range(20))
def test_grad_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x, W1, b1, W2 = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(3, 4))
    tape = nc.Tape()
    leaves = [tape.leaf(v) for v in (W1, b1, W2)]
    g = nc.grad(tape, _mlp_loss(x, *leaves), leaves)
    for k, base in enumerate((W1, b1, W2)):
        def f(v, k=k):
            args = [W1, b1, W2]
            args[k] = v
            return float(nc.value_of(_mlp_loss(x, *args)))
        fd = finite_diff_grad(f, base, 1e-6)
        assert np.allclose(g[k], fd, rtol=1e-4, atol=1e-7)


def test_backward_deterministic():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(3, 3))
    out = []
    for _ in range(2):
        tape = nc.Tape()
        w = tape.leaf(W)
        out.append(nc.grad(tape, nc.sum_(nc.tanh(nc.matmul(w, w))), [w])[0])
    assert np.array_equal(out[0], out[1])


def test_relu_subgradient_zero_at_zero():
    tape = nc.Tape()
    x = tape.leaf(np.zeros(3))
    assert np.array_equal(nc.grad(tape, nc.sum_(nc.relu(x)), [x])[0], np.zeros(3))


def test_input_jacobian_linear_and_chain():
    W1 = np.array([[1.0, 2.0], [0.5, -1.0]])
    W2 = np.array([[2.0, 0.0], [1.0, 3.0]])
    J = nc.input_jacobian(lambda s: nc.matmul(W1, s), np.array([0.3, -0.2]))
    assert np.allclose(J, W1)
    J2 = nc.input_jacobian(lambda s: nc.matmul(W2, nc.matmul(W1, s)), np.zeros(2))
    assert np.allclose(J2, [[2.0, 4.0], [2.5, -1.0]])


def test_input_jacobian_matches_fd_on_relu_net(rng):
    W1, W2 = rng.normal(size=(6, 3)), rng.normal(size=(2, 6))
    s = rng.normal(size=3)

    def fwd(x):
        return nc.matmul(W2, nc.relu(nc.matmul(W1, x)))

    J = nc.input_jacobian(fwd, s)
    for i in range(2):
        fd = finite_diff_grad(lambda x: float(nc.value_of(fwd(x))[i]), s)
        assert np.allclose(J[i], fd, atol=1e-6)


def test_input_jacobian_rejects_matrix_input():
    with pytest.raises(nc.InvalidInputError):
        nc.input_jacobian(lambda s: s, np.zeros((2, 2)))
