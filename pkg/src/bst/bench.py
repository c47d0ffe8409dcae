"""Table generators and the BSpMM timing harness behind the CLI."""

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .bsr import compression_report
from .errors import ShapeError
from .pruner import PruneConfig, prune_batch_to_bsr
from .sparse_ops import bspmm
from .tensor import matmul_dense

TABLE_ROWS, TABLE_COLS = 196, 384
TABLE_BLOCKS = (1, 4, 8, 16, 32, 64, 128, 384)
TABLE_SPARSITIES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

BENCH_SHAPE = (64, 196, 384)
BENCH_BLOCKS = (4, 16, 64)
BENCH_SPARSITIES = (0.1, 0.3, 0.5, 0.7, 0.9)


def overhead_table(rows=TABLE_ROWS, cols=TABLE_COLS, blocks=TABLE_BLOCKS, sparsities=TABLE_SPARSITIES):
    """BSR overhead over ideal compression, in percent.

    Returns ``{s: {b: value or error string}}`` with ``1 x b`` blocks over a
    ``rows x cols`` float32 matrix and 4-byte indices.
    """
    table = {}
    for s in sparsities:
        row = {}
        for b in blocks:
            try:
                row[b] = 100.0 * compression_report(rows, cols, 1, b, s).overhead_over_ideal
            except (ShapeError, ValueError) as exc:
                row[b] = f"error: {exc}"
        table[s] = row
    return table


def format_table_cell(v):
    return f"{v:.2f}" if isinstance(v, float) else v


@dataclass(frozen=True)
class BenchRow:
    kind: str            # "dense" or "bspmm"
    block_size: int      # 0 for the dense baseline
    sparsity: float
    median_seconds: float
    macs_executed: int
    macs_dense_equivalent: int
    blocks_processed: int

    @property
    def dense_equivalent_gmacs(self):
        """Dense-equivalent throughput: the dense MAC count over the measured time."""
        return self.macs_dense_equivalent / self.median_seconds / 1e9


def _median_time(fn, reps):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench(shape=BENCH_SHAPE, blocks=BENCH_BLOCKS, sparsities=BENCH_SPARSITIES, reps=5, seed=0, out_features=None):
    """Time ``prune(x) @ W`` for each ``(b, s)`` against the dense product.

    ``x`` is a random ``(B, P, D)`` activation flattened to ``(B*P) x D`` and
    ``W`` is ``D x out_features`` (default ``D``). Pruning happens outside
    the timed region.
    """
    bsz, p, d = shape
    n_out = out_features or d
    gen = np.random.Generator(np.random.PCG64(seed))
    x = gen.standard_normal(shape, dtype=np.float32)
    w = gen.standard_normal((d, n_out), dtype=np.float32)
    x2 = x.reshape(bsz * p, d)
    dense_macs = bsz * p * d * n_out
    rows = [BenchRow("dense", 0, 0.0, _median_time(lambda: matmul_dense(x2, w), reps), dense_macs, dense_macs, 0)]
    for b in blocks:
        for s in sparsities:
            m, _ = prune_batch_to_bsr(x, PruneConfig(s, b))
            _, stats = bspmm(m, w)
            t = _median_time(lambda: bspmm(m, w), reps)
            rows.append(BenchRow("bspmm", b, s, t, stats.macs_executed, stats.macs_dense_equivalent,
                                 stats.blocks_processed))
    return rows
