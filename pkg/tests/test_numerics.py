import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from molex.errors import InvalidRowError, NumericError, ShapeError
from molex.numerics import (
    Rng,
    activation,
    activation_grad,
    dumps_matrix,
    finite_diff_check,
    load_matrix,
    loads_matrix,
    matmul,
    row_softmax,
    save_matrix,
    sigmoid,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for p in range(a.shape[1]):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_matmul_examples():
    assert np.array_equal(matmul([[1, 0], [0, 1]], [[3], [1]]), [[3], [1]])
    assert np.array_equal(matmul([[1, 2]], [[3], [4]]), [[11]])


def test_matmul_matches_triple_loop_exactly(rng):
    a, b = rng.normal((5, 4)), rng.normal((4, 3))
    assert np.array_equal(matmul(a, b), triple_loop(a, b))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32))
def test_matmul_bitwise_oracle(n, k, m, seed):
    r = Rng(seed)
    a, b = r.normal((n, k)), r.normal((k, m))
    assert np.array_equal(matmul(a, b), triple_loop(a, b))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    assert np.array_equal(row_softmax([[0.0, 0.0]]), [[0.5, 0.5]])
    assert np.array_equal(row_softmax([[-np.inf, -np.inf, 5.0]]), [[0.0, 0.0, 1.0]])
    np.testing.assert_allclose(row_softmax([[0.2, 0.7]]), [[0.37754, 0.62246]], atol=1e-5)


def test_softmax_errors():
    with pytest.raises(InvalidRowError):
        row_softmax([[0.0, 1.0], [-np.inf, -np.inf]])
    with pytest.raises(NumericError):
        row_softmax([[np.nan, 1.0]])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite), finite)
def test_softmax_rows_sum_to_one_and_shift_invariant(m, c):
    p = row_softmax(m)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(p >= 0)
    np.testing.assert_allclose(row_softmax(m + c), p, atol=1e-12, rtol=0)


def test_activation_examples():
    assert np.array_equal(activation(np.array([-1.0, 2.0]), "relu"), [0.0, 2.0])
    assert activation(np.array([0.0]), "sigmoid")[0] == 0.5
    x = np.array([1.0])
    ref = 0.5 * 1.0 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    assert abs(activation(x, "gelu")[0] - ref) < 1e-15
    m = np.array([[1.5, -2.0]])
    assert activation(m, "identity") is m or np.array_equal(activation(m, "identity"), m)


@pytest.mark.parametrize("kind", ["relu", "gelu", "sigmoid", "identity"])
def test_activation_grad_matches_differences(kind, rng):
    x = rng.normal((20,), 2.0)
    x = x[np.abs(x) > 1e-3]  # keep away from the relu kink
    h = 1e-6
    fd = (activation(x + h, kind) - activation(x - h, kind)) / (2 * h)
    np.testing.assert_allclose(activation_grad(x, kind), fd, rtol=1e-6, atol=1e-8)


def test_sigmoid_extremes_are_finite():
    s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[2] == 1.0


def test_finite_diff_examples(rng):
    p = rng.normal((3, 2))
    assert finite_diff_check(lambda q: 0.5 * np.sum(q * q), p, p, 1e-5) < 1e-7
    assert finite_diff_check(lambda q: 0.0, p, np.zeros_like(p), 1e-5) == 0.0
    err = finite_diff_check(lambda q: 0.5 * np.sum(q * q), p, 2 * p, 1e-5)
    assert abs(err - 1.0 / 3.0) < 1e-6


def test_finite_diff_errors(rng):
    p = rng.normal((2,))
    with pytest.raises(NumericError):
        finite_diff_check(lambda q: float("nan"), p, p)
    with pytest.raises(ValueError):
        finite_diff_check(lambda q: 0.0, p, p, h=0.0)


def test_rng_determinism_and_children():
    a, b = Rng(7), Rng(7)
    assert np.array_equal(a.words(10), b.words(10))
    assert np.array_equal(a.normal((4, 4)), b.normal((4, 4)))
    assert not np.array_equal(Rng(7).child(1).words(4), Rng(7).child(2).words(4))
    assert not np.array_equal(Rng(7).words(4), Rng(8).words(4))


def test_rng_distributions():
    r = Rng(3)
    u = r.random(20000)
    assert 0 <= u.min() and u.max() < 1 and abs(u.mean() - 0.5) < 0.01
    z = r.normal((20000,))
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03
    k = r.integers(5, 10000)
    assert set(np.unique(k)) == set(range(5))
    perm = r.permutation(50)
    assert sorted(perm.tolist()) == list(range(50))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_matrix_text_round_trip_is_exact(m):
    back = loads_matrix(dumps_matrix(m))
    assert back.shape == m.shape and np.array_equal(back, m)


def test_matrix_file_round_trip(tmp_path, rng):
    m = rng.normal((3, 5))
    save_matrix(tmp_path / "m.mat", m)
    assert (tmp_path / "m.mat").read_text().splitlines()[0] == "3 5"
    assert np.array_equal(load_matrix(tmp_path / "m.mat"), m)
