"""Block-sparse kernels and the dense-forward / sparse-backward linear operator.

``bspmm`` runs in three phases per block row, mirroring a GPU load/compute
split: parse ``crow``/``col`` into a predicate array over the block columns,
gather each stored block's values, and accumulate into the current output
tile, skipping blocks whose predicate is unset. Every output cell is still
accumulated in k-ascending order, so a fully stored matrix reproduces
:func:`bst.tensor.matmul_dense` bit for bit.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import bsr as bsr_mod
from .errors import FormatError, ShapeError
from .pruner import PruneConfig, eligible, prune_batch_to_bsr
from .tensor import matmul_dense, transpose2d

DEFAULT_TILE = 64


@dataclass(frozen=True)
class BspmmStats:
    blocks_visited: int
    blocks_skipped: int
    macs_executed: int
    macs_dense_equivalent: int

    @property
    def blocks_processed(self):
        return self.blocks_visited - self.blocks_skipped


@njit(parallel=True, cache=True)
def _bspmm_kernel(crow, col, values, br, bc, b, out, tile, processed, macs):
    n_brows = crow.shape[0] - 1
    kb = b.shape[0] // bc
    n = b.shape[1]
    n_tiles = (n + tile - 1) // tile
    for ib in prange(n_brows):
        # phase 1: predicate array + slot of each stored block
        pred = np.zeros(kb, dtype=np.bool_)
        slot = np.zeros(kb, dtype=np.int64)
        for p in range(crow[ib], crow[ib + 1]):
            pred[col[p]] = True
            slot[col[p]] = p
        done = 0
        mac = 0
        for t in range(n_tiles):
            j0 = t * tile
            j1 = min(n, j0 + tile)
            for kbi in range(kb):
                if not pred[kbi]:
                    continue
                if t == 0:
                    done += 1
                base = slot[kbi] * br * bc
                # phase 2 + 3: gather block values, rank-1 updates into the tile
                for r in range(br):
                    orow = out[ib * br + r, j0:j1]
                    for cc in range(bc):
                        v = values[base + r * bc + cc]
                        brow = b[kbi * bc + cc, j0:j1]
                        for j in range(j1 - j0):
                            orow[j] += v * brow[j]
                mac += br * bc * (j1 - j0)
        processed[ib] = done
        macs[ib] = mac


def bspmm(a, b, tile=DEFAULT_TILE):
    """``decode(a) @ b`` for a BSR ``a`` (M x K) and dense ``b`` (K x N), skipping absent blocks."""
    if b.ndim != 2 or a.cols != b.shape[0]:
        raise ShapeError(f"bspmm shape mismatch: {a.shape} x {b.shape}")
    if a.values.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.values.dtype} vs {b.dtype}")
    problems = bsr_mod.validate(a)
    if problems:
        raise FormatError("; ".join(problems))
    if tile < 1:
        raise ValueError("tile must be >= 1")
    b = np.ascontiguousarray(b)
    out = np.zeros((a.rows, b.shape[1]), dtype=b.dtype)
    processed = np.zeros(a.block_rows, dtype=np.int64)
    macs = np.zeros(a.block_rows, dtype=np.int64)
    _bspmm_kernel(a.crow, a.col, a.values, a.br, a.bc, b, out, int(tile), processed, macs)
    visited = a.block_rows * a.block_cols
    stats = BspmmStats(
        blocks_visited=visited,
        blocks_skipped=visited - int(processed.sum()),
        macs_executed=int(macs.sum()),
        macs_dense_equivalent=a.rows * a.cols * b.shape[1],
    )
    return out, stats


@njit(parallel=True, cache=True)
def _grad_weight_kernel(crow, col, values, br, bc, dy_t, dw):
    n_out = dy_t.shape[0]
    n_brows = crow.shape[0] - 1
    # dW is partitioned by output row; rows of x are visited in ascending order
    for o in prange(n_out):
        for ib in range(n_brows):
            for p in range(crow[ib], crow[ib + 1]):
                c0 = col[p] * bc
                base = p * br * bc
                for r in range(br):
                    d = dy_t[o, ib * br + r]
                    for cc in range(bc):
                        dw[o, c0 + cc] += d * values[base + r * bc + cc]


@dataclass(frozen=True, eq=False)
class SavedActivation:
    """Activation kept for the weight gradient: block-pruned BSR, or dense when ineligible."""

    original_shape: tuple
    cfg: PruneConfig | None
    bsr: bsr_mod.BsrMatrix | None = None
    dense: np.ndarray | None = None

    @property
    def dense_bytes(self):
        b, p, d = self.original_shape
        itemsize = self.bsr.values.itemsize if self.bsr is not None else self.dense.itemsize
        return b * p * d * itemsize

    @property
    def stored_bytes(self):
        return self.bsr.nbytes if self.bsr is not None else int(self.dense.nbytes)

    @property
    def value_bytes(self):
        return self.bsr.value_bytes if self.bsr is not None else int(self.dense.nbytes)

    @property
    def index_bytes(self):
        return self.bsr.index_bytes if self.bsr is not None else 0

    def to_dense(self):
        if self.bsr is not None:
            return bsr_mod.decode(self.bsr).reshape(self.original_shape)
        return self.dense.reshape(self.original_shape)


def save_activation(x, cfg):
    """Prune ``x[B, P, D]`` for storage, falling back to dense when ``b`` does not divide ``D``."""
    if eligible(x.shape[-1], cfg):
        m, _ = prune_batch_to_bsr(x, cfg)
        return SavedActivation(tuple(x.shape), cfg, bsr=m)
    return SavedActivation(tuple(x.shape), cfg, dense=np.ascontiguousarray(x))


def grad_weight(dy, saved):
    """``dy^T @ x`` with ``x`` the saved (possibly pruned) activation; absent blocks cost nothing."""
    b, p, d = saved.original_shape
    dy = np.asarray(dy)
    if dy.ndim != 2 or dy.shape[0] != b * p:
        raise ShapeError(f"dy has shape {dy.shape}, expected ({b * p}, Dout)")
    if saved.bsr is None:
        return matmul_dense(transpose2d(dy), saved.dense.reshape(b * p, d))
    m = saved.bsr
    if dy.dtype != m.values.dtype:
        raise ShapeError(f"dtype mismatch: {dy.dtype} vs {m.values.dtype}")
    dw = np.zeros((dy.shape[1], d), dtype=dy.dtype)
    _grad_weight_kernel(m.crow, m.col, m.values, m.br, m.bc, transpose2d(dy), dw)
    return dw


def _check_linear(x, weight, bias):
    if x.ndim != 3:
        raise ShapeError(f"expected x of shape (B, P, Din), got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[2]:
        raise ShapeError(f"weight {weight.shape} incompatible with x {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias {bias.shape} incompatible with weight {weight.shape}")


def sparse_linear_forward(x, weight, bias, cfg):
    """``y = x @ W^T + bias`` from the unpruned ``x``; only the saved copy is pruned."""
    _check_linear(x, weight, bias)
    bsz, p, din = x.shape
    y = matmul_dense(x.reshape(bsz * p, din), transpose2d(weight))
    if bias is not None:
        y += bias
    return y.reshape(bsz, p, weight.shape[0]), save_activation(x, cfg)


def sparse_linear_backward(dy, saved, weight):
    """Return ``(dx, dW, dbias)``; only ``dW`` sees the pruned activation."""
    bsz, p, din = saved.original_shape
    dout = weight.shape[0]
    if dy.shape != (bsz, p, dout):
        raise ShapeError(f"dy has shape {dy.shape}, expected {(bsz, p, dout)}")
    dy2 = dy.reshape(bsz * p, dout)
    dx = matmul_dense(dy2, weight).reshape(bsz, p, din)
    dbias = dy2.sum(axis=0)
    return dx, grad_weight(dy2, saved), dbias
