import numpy as np
import pytest

from bst.bsr import decode, encode
from bst.errors import ShapeError
from bst.pruner import PruneConfig, prune_batch_to_bsr
from bst.sparse_ops import (
    bspmm,
    grad_weight,
    save_activation,
    sparse_linear_backward,
    sparse_linear_forward,
)
from bst.tensor import matmul_dense


def f32(gen, *shape):
    return gen.standard_normal(shape).astype(np.float32)


def test_empty_bsr(nprng):
    a = encode(np.zeros((8, 16), np.float32), 1, 4)
    out, stats = bspmm(a, f32(nprng, 16, 5))
    assert not out.any() and stats.macs_executed == 0
    assert stats.blocks_skipped == stats.blocks_visited == 32


def test_fully_dense_matches_oracle_exactly(nprng):
    x = f32(nprng, 12, 32) + 100
    b = f32(nprng, 32, 70)
    out, stats = bspmm(encode(x, 1, 8), b)
    assert np.array_equal(out, matmul_dense(x, b))
    assert stats.macs_executed == stats.macs_dense_equivalent


def test_random_half_sparse(nprng):
    x = f32(nprng, 8, 196, 384)
    m, _ = prune_batch_to_bsr(x, PruneConfig(0.5, 16))
    w = f32(nprng, 384, 384)
    out, stats = bspmm(m, w)
    ref = decode(m).astype(np.float64) @ w.astype(np.float64)
    assert np.all(np.abs(out - ref) <= 1e-4 * (1 + np.abs(ref)))
    assert np.array_equal(out, matmul_dense(decode(m), w))
    ratio = stats.macs_executed / stats.macs_dense_equivalent
    assert abs(ratio - 0.5) <= 1 / (196 * 8)
    assert stats.macs_executed == stats.blocks_processed * 16 * 384


@pytest.mark.parametrize("br,bc,tile", [(2, 4, 3), (4, 4, 64), (1, 1, 7)])
def test_general_blocks_and_tiles(nprng, br, bc, tile):
    x = f32(nprng, 8, 16)
    x.reshape(8 // br, br, 16 // bc, bc).transpose(0, 2, 1, 3)[nprng.random((8 // br, 16 // bc)) < 0.5] = 0
    b = f32(nprng, 16, 10)
    out, _ = bspmm(encode(x, br, bc), b, tile=tile)
    assert np.array_equal(out, matmul_dense(x, b))


def test_bspmm_shape_errors(nprng):
    with pytest.raises(ShapeError):
        bspmm(encode(f32(nprng, 4, 8), 1, 4), f32(nprng, 6, 2))


def test_grad_weight_cases(nprng):
    x = f32(nprng, 2, 5, 12)
    dy = f32(nprng, 10, 7)
    all_pruned = save_activation(x, PruneConfig(1.0, 4))
    assert not grad_weight(dy, all_pruned).any()
    dense_dw = matmul_dense(np.ascontiguousarray(dy.T), x.reshape(10, 12))
    assert np.array_equal(grad_weight(dy, save_activation(x, PruneConfig(0.0, 4))), dense_dw)
    assert np.array_equal(grad_weight(dy, save_activation(x, None)), dense_dw)
    half = save_activation(x, PruneConfig(0.5, 4))
    ref = dy.T.astype(np.float64) @ half.to_dense().reshape(10, 12).astype(np.float64)
    np.testing.assert_allclose(grad_weight(dy, half), ref, rtol=1e-4, atol=1e-5)


def test_ineligible_falls_back_dense(nprng):
    x = f32(nprng, 2, 3, 10)
    saved = save_activation(x, PruneConfig(0.5, 4))
    assert saved.bsr is None and np.array_equal(saved.to_dense(), x)


def hand_linear(x, w, bias):
    b, p, din = x.shape
    out = np.zeros((b, p, w.shape[0]), np.float64)
    for i in range(b):
        for j in range(p):
            for o in range(w.shape[0]):
                out[i, j, o] = sum(float(x[i, j, k]) * float(w[o, k]) for k in range(din)) + bias[o]
    return out


def test_forward_vs_hand_oracle(nprng):
    x, w, bias = f32(nprng, 2, 4, 8), f32(nprng, 3, 8), f32(nprng, 3)
    y, saved = sparse_linear_forward(x, w, bias, PruneConfig(0.0, 4))
    np.testing.assert_allclose(y, hand_linear(x, w, bias), rtol=1e-5, atol=1e-5)
    assert np.array_equal(saved.to_dense(), x)


def test_forward_pure_in_sparsity(nprng):
    x, w, bias = f32(nprng, 3, 8, 16), f32(nprng, 5, 16), f32(nprng, 5)
    y0, _ = sparse_linear_forward(x, w, bias, PruneConfig(0.0, 4))
    y9, _ = sparse_linear_forward(x, w, bias, PruneConfig(0.9, 4))
    assert np.array_equal(y0, y9)


def test_backward_split(nprng):
    x, w, bias = f32(nprng, 3, 8, 16), f32(nprng, 5, 16), f32(nprng, 5)
    dy = f32(nprng, 3, 8, 5)
    grads = {}
    for s in (0.0, 0.8, 1.0):
        _, saved = sparse_linear_forward(x, w, bias, PruneConfig(s, 4))
        grads[s] = sparse_linear_backward(dy, saved, w)
    for s in (0.8, 1.0):
        assert np.array_equal(grads[s][0], grads[0.0][0])
        assert np.array_equal(grads[s][2], grads[0.0][2])
    assert not grads[1.0][1].any()


def test_backward_finite_differences():
    # float64 shadow: loss = sum(y^2)
    gen = np.random.default_rng(3)
    x = gen.standard_normal((2, 3, 8))
    w = gen.standard_normal((4, 8))
    bias = gen.standard_normal(4)
    cfg = PruneConfig(0.0, 4)

    def loss(x_, w_, b_):
        y, _ = sparse_linear_forward(x_, w_, b_, cfg)
        return float((y ** 2).sum())

    y, saved = sparse_linear_forward(x, w, bias, cfg)
    dx, dw, db = sparse_linear_backward(2 * y, saved, w)
    eps = 1e-6
    for arr, grad in ((x, dx), (w, dw), (bias, db)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss(x, w, bias)
            arr[idx] = orig - eps
            down = loss(x, w, bias)
            arr[idx] = orig
            num[idx] = (up - down) / (2 * eps)
        np.testing.assert_allclose(grad, num, rtol=1e-2, atol=1e-6)


def test_dw_error_monotone_in_sparsity(nprng):
    x, w, bias = f32(nprng, 4, 16, 32), f32(nprng, 8, 32), f32(nprng, 8)
    dy = f32(nprng, 4, 16, 8)
    _, dense_saved = sparse_linear_forward(x, w, bias, None)
    dw_dense = sparse_linear_backward(dy, dense_saved, w)[1]
    errs = []
    for s in (0.9, 0.5, 0.1, 0.0):
        _, saved = sparse_linear_forward(x, w, bias, PruneConfig(s, 8))
        errs.append(np.linalg.norm(sparse_linear_backward(dy, saved, w)[1] - dw_dense))
    assert all(a >= b for a, b in zip(errs, errs[1:]))
    assert errs[-1] == 0.0
