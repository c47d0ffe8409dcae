"""Magnitude-based structured activation pruning.

Blocks are contiguous length-``b`` segments of the trailing axis. Each sample
of a batch is scored and pruned on its own: its ``round(s*N)`` lowest-l2
blocks are zeroed, so every sample keeps the same number of blocks.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .bsr import encode, prune_count
from .errors import ShapeError

log = logging.getLogger(__name__)

__all__ = [
    "PruneConfig",
    "PruneDecision",
    "block_l2_scores",
    "eligible",
    "prune_batch_to_bsr",
    "prune_count",
    "select_topk_prune",
]


@dataclass(frozen=True)
class PruneConfig:
    sparsity: float
    block_size: int

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError(f"sparsity must be in [0, 1], got {self.sparsity}")
        if int(self.block_size) != self.block_size or self.block_size < 1:
            raise ValueError(f"block size must be a positive integer, got {self.block_size}")


@dataclass(frozen=True, eq=False)
class PruneDecision:
    scores: np.ndarray       # (..., n_blocks)
    pruned_mask: np.ndarray  # same shape, True = zeroed
    k: int
    n_blocks: int


def eligible(trailing, cfg):
    """Whether an activation with this trailing extent can be block-pruned."""
    return cfg is not None and trailing % cfg.block_size == 0


def block_l2_scores(x, b):
    """l2 norm of every length-``b`` segment of each row of ``x``.

    ``x`` has shape ``(..., P, D)``; the result has shape ``(..., P*D/b)`` with
    blocks numbered row-major.
    """
    x = np.asarray(x)
    if x.shape[-1] % b:
        raise ShapeError(f"block size {b} does not divide trailing extent {x.shape[-1]}")
    lead = x.shape[:-2] if x.ndim >= 2 else ()
    segs = x.reshape(*lead, -1, b).astype(np.float64)
    return np.sqrt(np.einsum("...i,...i->...", segs, segs))


def select_topk_prune(scores, s):
    """Mark the ``round(s*N)`` lowest-scoring blocks of each row of ``scores``.

    Ties go to the lower block index (stable sort).
    """
    scores = np.asarray(scores)
    n = scores.shape[-1]
    k = prune_count(s, n)
    mask = np.zeros(scores.shape, dtype=bool)
    if k:
        order = np.argsort(scores, axis=-1, kind="stable")[..., :k]
        np.put_along_axis(mask, order, True, axis=-1)
    return PruneDecision(scores=scores, pruned_mask=mask, k=k, n_blocks=n)


def prune_batch_to_bsr(x, cfg):
    """Top-k prune each sample of ``x[B, P, D]`` and encode as one ``(B*P) x D`` BSR matrix."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected a (B, P, D) activation, got shape {x.shape}")
    bsz, p, d = x.shape
    b = cfg.block_size
    if d % b:
        raise ShapeError(f"block size {b} does not divide trailing extent {d}")
    decision = select_topk_prune(block_l2_scores(x, b), cfg.sparsity)
    pruned = x.reshape(bsz, -1, b).copy()
    pruned[decision.pruned_mask] = 0
    return encode(pruned.reshape(bsz * p, d), 1, b), decision
