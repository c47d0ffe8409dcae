"""Block-sparse activation pruning for memory-compressed training."""

import os

# numba reads these once at import; BST_THREADS is the only supported knob.
_threads = os.environ.get("BST_THREADS")
if _threads:
    os.environ.setdefault("NUMBA_NUM_THREADS", str(max(int(_threads), os.cpu_count() or 1)))
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
