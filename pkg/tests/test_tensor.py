import numpy as np
import pytest

from bst.errors import ShapeError
from bst.tensor import Rng, dense, matmul_dense, rng_normal, transpose2d


def triple_loop(a, b):
    m, k_ext = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for k in range(k_ext):
                acc = np.float32(acc + np.float32(a[i, k] * b[k, j]))
            out[i, j] = acc
    return out


def test_identity_left(rng):
    m = rng.normal((3, 3))
    assert np.array_equal(matmul_dense(np.eye(3, dtype=np.float32), m), m)


def test_zero_left(rng):
    out = matmul_dense(np.zeros((2, 4), np.float32), rng.normal((4, 5)))
    assert out.shape == (2, 5) and not out.any()


def test_matches_triple_loop_bitwise(rng):
    a, b = rng.normal((7, 5)), rng.normal((5, 3))
    assert np.array_equal(matmul_dense(a, b), triple_loop(a, b))


def test_identity_associativity(rng):
    a, b = rng.normal((6, 4)), rng.normal((4, 9))
    eye = np.eye(4, dtype=np.float32)
    assert np.array_equal(matmul_dense(matmul_dense(a, eye), b), matmul_dense(a, b))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul_dense(np.ones((2, 3), np.float32), np.ones((4, 2), np.float32))


def test_transpose(rng):
    a = rng.normal((3, 4))
    t = transpose2d(a)
    assert t[2, 1] == a[1, 2]
    assert np.array_equal(transpose2d(t), a)
    assert transpose2d(np.ones((1, 6), np.float32)).shape == (6, 1)
    assert transpose2d(rng.normal((2, 3, 5))).shape == (2, 5, 3)
    with pytest.raises(ShapeError):
        transpose2d(np.ones(4, np.float32))


def test_rng_normal_properties():
    assert np.all(rng_normal(Rng(0), (4, 4), mean=2.5, std=0.0) == np.float32(2.5))
    assert np.array_equal(Rng(7).normal((50,)), Rng(7).normal((50,)))
    draws = rng_normal(Rng(1), (10**6,)).astype(np.float64)
    assert abs(draws.mean()) <= 0.01
    assert 0.99 <= draws.std() <= 1.01
    with pytest.raises(ValueError):
        rng_normal(Rng(0), (2,), std=-1.0)


def test_dense_validation():
    assert dense([[1, 2]]).dtype == np.float32
    with pytest.raises(ShapeError):
        dense(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(ShapeError):
        dense(np.zeros((0, 3)))
