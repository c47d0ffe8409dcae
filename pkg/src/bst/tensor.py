"""Dense tensor core.

A dense tensor is a C-contiguous ``numpy.ndarray`` of ``float32`` (``float64``
is accepted everywhere for gradient-check shadows). The matmul here is the
correctness oracle for every sparse kernel: it accumulates each output cell in
a fixed k-ascending order, one multiply and one add per step, so the sparse
kernels can be compared against it bit for bit.
"""

import os

import numba
import numpy as np
from numba import njit, prange

from .errors import ShapeError

DTYPE = np.float32


def configure_threads(n=None):
    """Set the kernel worker count (defaults to ``BST_THREADS``)."""
    if n is None:
        env = os.environ.get("BST_THREADS")
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def dense(data, dtype=DTYPE):
    """Coerce to a contiguous dense tensor, validating rank and extents."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"rank must be in [1, 4], got {arr.ndim}")
    if 0 in arr.shape:
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
    return arr


class Rng:
    """Seeded PCG64 stream.

    The same seed gives the same stream regardless of thread count; all
    draws are made on the calling thread.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, mean=0.0, std=1.0, dtype=DTYPE):
        return rng_normal(self, shape, mean, std, dtype)

    def spawn(self, *keys):
        """Independent child stream keyed by ``(seed, *keys)``."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child.gen = np.random.Generator(np.random.PCG64([self.seed, *map(int, keys)]))
        return child


def rng_normal(rng, shape, mean=0.0, std=1.0, dtype=DTYPE):
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    z = rng.gen.standard_normal(shape)
    return np.ascontiguousarray(z * std + mean, dtype=dtype)


@njit(parallel=True, cache=True)
def _matmul_kernel(a, b, c):
    m, k_ext = a.shape
    n = b.shape[1]
    # each output row is owned by exactly one worker
    for i in prange(m):
        for k in range(k_ext):
            v = a[i, k]
            for j in range(n):
                c[i, j] += v * b[k, j]


def matmul_dense(a, b):
    """``a @ b`` with per-cell k-ascending accumulation in the input dtype."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul_dense expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    c = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    _matmul_kernel(a, b, c)
    return c


def transpose2d(a):
    """Swap the last two axes (rank 2, or rank 3 with a leading batch axis)."""
    if a.ndim == 2:
        return np.ascontiguousarray(a.T)
    if a.ndim == 3:
        return np.ascontiguousarray(a.transpose(0, 2, 1))
    raise ShapeError(f"transpose2d expects rank 2 or 3, got rank {a.ndim}")


configure_threads()
