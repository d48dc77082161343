import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate

from contextflow import diffcore as dc
from contextflow.diffcore import GradientError, SingularMatrixError, Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def cofactor_det(m):
    n = m.shape[0]
    if n == 1:
        return m[0, 0]
    return sum((-1) ** j * m[0, j] * cofactor_det(np.delete(m[1:], j, axis=1)) for j in range(n))


# --- lu_logabsdet -----------------------------------------------------------


def test_identity_logabsdet():
    assert dc.lu_logabsdet(np.eye(2)) == (1.0, 0.0)


def test_diag_logabsdet():
    sign, lad = dc.lu_logabsdet(np.diag([2.0, 3.0]))
    assert sign == 1.0
    assert lad == pytest.approx(1.791759469228055, abs=1e-14)


def test_swap_logabsdet():
    assert dc.lu_logabsdet(np.array([[0.0, 1.0], [1.0, 0.0]])) == (-1.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_logabsdet_matches_cofactor_expansion(n, seed):
    m = np.random.default_rng(seed).standard_normal((n, n))
    det = cofactor_det(m)
    if abs(det) < 1e-6:
        return
    sign, lad = dc.lu_logabsdet(m)
    assert sign == np.sign(det)
    assert lad == pytest.approx(math.log(abs(det)), abs=1e-10)


def test_singular_raises():
    with pytest.raises(SingularMatrixError, match="pivot"):
        dc.lu_factor(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_oversized_matrix_rejected():
    with pytest.raises(ValueError, match="exceeds"):
        dc.lu_factor(np.eye(1025))


def test_batched_solve_and_inverse():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 3, 3)) + 3 * np.eye(3)
    b = rng.standard_normal((5, 3, 2))
    f = dc.lu_factor(a)
    np.testing.assert_allclose(f.solve(b), np.linalg.solve(a, b), atol=1e-12)
    np.testing.assert_allclose(f.inverse(), np.linalg.inv(a), atol=1e-12)
    single = dc.lu_factor(a[0])
    np.testing.assert_allclose(single.solve(b), np.linalg.solve(a[0], b), atol=1e-12)


# --- backward ---------------------------------------------------------------


def test_sum_of_squares_gradient():
    x = leaf([1.0, 2.0])
    grads = dc.backward((x * x).sum())
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])


def test_logdet_gradient_at_identity():
    w = leaf(np.eye(2))
    grads = dc.backward(dc.logabsdet(w))
    np.testing.assert_allclose(grads[w], np.eye(2), atol=1e-12)


def test_constant_leaf_absent():
    x = leaf([1.0, 2.0])
    c = Tensor(np.array([3.0, 4.0]))
    grads = dc.backward((x * c).sum())
    assert c not in grads and x in grads


def test_unused_param_absent():
    x, y = leaf([1.0]), leaf([2.0])
    assert y not in dc.backward((x * 2.0).sum())


def test_non_scalar_root_rejected():
    with pytest.raises(GradientError, match="scalar"):
        dc.backward(leaf([1.0, 2.0]) * 2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_names_path():
    x = leaf([-1.0])
    with pytest.raises(GradientError, match="log"):
        dc.backward(dc.log(x).sum())


def test_diamond_visits_once():
    x = leaf([3.0])
    y = x * 2.0
    z = (y + y).sum()
    assert dc.backward(z)[x][0] == 4.0


def test_graph_freed_unless_retained():
    x = leaf([1.0])
    loss = (x * x).sum()
    dc.backward(loss, retain_graph=True)
    assert loss._parents
    dc.backward(loss)
    assert not loss._parents


# --- op gradients -----------------------------------------------------------

UNARY = {
    "exp": dc.exp,
    "log": lambda a: dc.log(dc.exp(a) + 1.0),
    "tanh": dc.tanh,
    "sigmoid": dc.sigmoid,
    "softplus": dc.softplus,
    "log_sigmoid": dc.log_sigmoid,
    "square": dc.square,
    "power": lambda a: dc.power(dc.exp(a), 1.5),
    "neg": dc.neg,
    "clamp": lambda a: dc.clamp(a, -5.0, 5.0),
    "logsumexp": lambda a: dc.logsumexp(a, axis=1),
    "mean": lambda a: dc.mean(a, axis=0),
    "transpose": lambda a: dc.transpose(a) * Tensor(np.arange(a.size).reshape(a.shape[::-1])),
    "getitem": lambda a: a[:, 1:] * 3.0,
    "take": lambda a: dc.take(a, np.array([0, 0, 2]), axis=1),
    "swap_last": lambda a: dc.swap_last(a) @ Tensor(np.ones((a.shape[0], 2))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_unary_gradients(name, seed):
    x = leaf(np.random.default_rng(seed).standard_normal((3, 4)))
    assert dc.finite_diff_check(lambda: UNARY[name](x).sum() * 1.0 + (UNARY[name](x) ** 2).sum(), [x]) < 1e-4


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ b.T,
    "concat": lambda a, b: dc.concat([a, b], axis=0) * 2.0,
    "where": lambda a, b: dc.where(np.array([[True, False, True, False]] * 3), a, b),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    rng = np.random.default_rng(1)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((3, 4)))
    assert dc.finite_diff_check(lambda: (BINARY[name](a, b) ** 2).sum(), [a, b]) < 1e-4


def test_broadcast_gradients():
    rng = np.random.default_rng(2)
    a, b = leaf(rng.standard_normal((2, 3, 4))), leaf(rng.standard_normal((3, 1)))
    assert dc.finite_diff_check(lambda: ((a * b + b) ** 2).sum(), [a, b]) < 1e-4


def test_batched_matmul_gradients():
    rng = np.random.default_rng(3)
    a, b = leaf(rng.standard_normal((2, 3, 3))), leaf(rng.standard_normal((3, 2)))
    assert dc.finite_diff_check(lambda: ((a @ b) ** 2).sum(), [a, b]) < 1e-4


def test_solve_and_logabsdet_gradients():
    rng = np.random.default_rng(4)
    a = leaf(rng.standard_normal((2, 3, 3)) + 2 * np.eye(3))
    b = leaf(rng.standard_normal((2, 3, 2)))
    assert dc.finite_diff_check(lambda: (dc.solve(a, b) ** 2).sum() + dc.logabsdet(a).sum(), [a, b]) < 1e-4


def test_conv2d_matches_correlation_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    out = dc.conv2d(Tensor(x), Tensor(w)).data
    for n, o in itertools.product(range(2), range(4)):
        ref = sum(correlate(x[n, c], w[o, c], mode="same") for c in range(3))
        np.testing.assert_allclose(out[n, o], ref, atol=1e-12)


def test_conv2d_gradients():
    rng = np.random.default_rng(6)
    x, w, b = leaf(rng.standard_normal((2, 2, 4, 4))), leaf(rng.standard_normal((3, 2, 3, 3))), leaf(rng.standard_normal(3))
    assert dc.finite_diff_check(lambda: (dc.conv2d(x, w, b) ** 2).sum(), [x, w, b]) < 1e-4


def test_reshape_and_permute_roundtrip_bitwise():
    x = np.random.default_rng(7).standard_normal((2, 3, 4))
    t = Tensor(x)
    np.testing.assert_array_equal(t.reshape(6, 4).reshape(2, 3, 4).data, x)
    np.testing.assert_array_equal(t.transpose(2, 0, 1).transpose(1, 2, 0).data, x)


def test_logsumexp_is_stable():
    out = dc.logsumexp(Tensor(np.array([[-1000.0, 0.0], [1000.0, 1000.0]])), axis=1).data
    np.testing.assert_allclose(out, [0.0, 1000.0 + math.log(2.0)])


# --- finite_diff_check --------------------------------------------------------


def test_checker_exact_for_quadratic():
    x = leaf([1.0])
    assert dc.finite_diff_check(lambda: (x * x).sum(), [x], eps=1e-5) < 1e-8


def test_checker_reports_wrong_gradient():
    x = leaf([1.0])

    def f():
        y = dc.custom_op(x.data * 0.5, [(x, lambda g: g * 0.5 + 0.1)], "wrong")
        return y.sum()

    assert dc.finite_diff_check(f, [x]) == pytest.approx(0.1, abs=1e-6)


def test_checker_rejects_bad_eps():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        dc.finite_diff_check(lambda: x.sum(), [x], eps=1e-2)


def test_rng_is_reproducible_and_splittable():
    a = dc.make_rng(5).random(3)
    b = dc.make_rng(5).random(3)
    np.testing.assert_array_equal(a, b)
    c1, c2 = dc.split_rng(dc.make_rng(5), 2)
    assert not np.array_equal(c1.random(3), c2.random(3))
