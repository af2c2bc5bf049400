import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resfields.linalg import DimensionError, as_tensor, axpy, matmul, reduce


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            c[i, j] = s
    return c


def test_matmul_examples():
    m = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(matmul(np.eye(2), m), m)
    assert np.array_equal(matmul([[1.0, 2]], [[3.0], [4]]), [[11.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    ref = triple_loop(a, b)
    assert np.max(np.abs(matmul(a, b) - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
       st.integers(0, 2**31))
def test_matmul_associative(m, k, n, p, seed):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(m, k)), r.normal(size=(k, n)), r.normal(size=(n, p))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    scale = np.max(np.abs(a)) * np.max(np.abs(b)) * np.max(np.abs(c)) * k * n
    assert np.max(np.abs(left - right)) <= 1e-10 * scale


def test_axpy_examples():
    assert np.array_equal(axpy(0.0, np.array([5.0, 7]), np.array([1.0, 2])), [1, 2])
    assert np.array_equal(axpy(2.0, np.ones(2), np.array([0.0, 1])), [2, 3])
    x = np.array([1.5, -2.0])
    assert np.array_equal(axpy(-1.0, x, x), np.zeros(2))
    with pytest.raises(DimensionError):
        axpy(1.0, np.ones(2), np.ones(3))


def test_reduce_examples():
    assert reduce(np.array([1.0, 2, 3]), "mean") == 2
    assert np.array_equal(reduce(np.array([[1.0, 5], [3, 2]]), "max", axis=0), [3, 5])
    with pytest.raises(DimensionError):
        reduce(np.zeros((0,)), "sum", axis=0)
    with pytest.raises(DimensionError):
        reduce(np.ones((2, 2)), "sum", axis=2)
    with pytest.raises(ValueError):
        reduce(np.ones(2), "median")


def test_reduce_is_repeatable(rng):
    x = rng.normal(size=(100, 37))
    assert np.array_equal(reduce(x, "sum", 0), reduce(x.copy(), "sum", 0))


def test_extent_zero_rejected():
    with pytest.raises(DimensionError):
        as_tensor(np.zeros((3, 0)))
    assert as_tensor(2.0).shape == ()
