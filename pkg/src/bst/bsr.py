"""Block Sparse Compressed Row (BSR) matrices.

A BSR matrix stores only the ``br x bc`` blocks that hold at least one
nonzero. ``crow[n+1] - crow[n]`` is the number of stored blocks in block row
``n`` and ``col[crow[n]:crow[n+1]]`` their block-column positions, strictly
increasing. Block payloads are packed row-major, in crow/col order.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError

INDEX_DTYPE = np.int32

_MAGIC = b"BSR\x00"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQIIQB3x")
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def prune_count(s, n):
    """Number of blocks pruned at sparsity ``s`` out of ``n``: round(s*n), half up.

    A 1e-9 slack makes decimal sparsities like 0.7 behave as written even when
    their binary product lands a hair under the .5 boundary.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {s}")
    return min(int(n), int(math.floor(s * n + 0.5 + 1e-9)))


@dataclass(frozen=True, eq=False)
class BsrMatrix:
    rows: int
    cols: int
    br: int
    bc: int
    crow: np.ndarray
    col: np.ndarray
    values: np.ndarray

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnzb(self):
        return int(self.col.shape[0])

    @property
    def block_rows(self):
        return self.rows // self.br

    @property
    def block_cols(self):
        return self.cols // self.bc

    @property
    def value_bytes(self):
        return int(self.values.nbytes)

    @property
    def index_bytes(self):
        return int(self.crow.nbytes + self.col.nbytes)

    @property
    def nbytes(self):
        return self.value_bytes + self.index_bytes

    @property
    def zero_block_fraction(self):
        total = self.block_rows * self.block_cols
        return 1.0 - self.nnzb / total

    def blocks(self):
        """Stored payloads as a ``(nnzb, br, bc)`` view."""
        return self.values.reshape(self.nnzb, self.br, self.bc)

    def block_row_ids(self):
        """Block-row index of every stored block, in storage order."""
        return np.repeat(np.arange(self.block_rows), np.diff(self.crow))

    def to_bytes(self):
        code = _DTYPE_CODES[self.values.dtype]
        head = _HEADER.pack(_MAGIC, _VERSION, self.rows, self.cols, self.br, self.bc, self.nnzb, code)
        return b"".join([
            head,
            self.crow.astype("<i4").tobytes(),
            self.col.astype("<i4").tobytes(),
            self.values.astype(self.values.dtype.newbyteorder("<")).tobytes(),
        ])

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < _HEADER.size:
            raise FormatError("truncated BSR header")
        magic, version, rows, cols, br, bc, nnzb, code = _HEADER.unpack_from(buf, 0)
        if magic != _MAGIC or version != _VERSION:
            raise FormatError(f"not a BSR v{_VERSION} container")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown value dtype code {code}")
        if br < 1 or bc < 1 or rows % br or cols % bc:
            raise FormatError(f"bad block shape {br}x{bc} for {rows}x{cols}")
        dtype = _CODE_DTYPES[code]
        n_crow = rows // br + 1
        sizes = [n_crow * 4, nnzb * 4, nnzb * br * bc * dtype.itemsize]
        if len(buf) != _HEADER.size + sum(sizes):
            raise FormatError(f"BSR payload is {len(buf) - _HEADER.size} bytes, expected {sum(sizes)}")
        off = _HEADER.size
        crow = np.frombuffer(buf, "<i4", n_crow, off).astype(INDEX_DTYPE)
        off += sizes[0]
        col = np.frombuffer(buf, "<i4", nnzb, off).astype(INDEX_DTYPE)
        off += sizes[1]
        values = np.frombuffer(buf, dtype.newbyteorder("<"), nnzb * br * bc, off).astype(dtype)
        m = cls(rows, cols, br, bc, crow, col, values)
        problems = validate(m)
        if problems:
            raise FormatError("; ".join(problems))
        return m


def _check_blocking(rows, cols, br, bc):
    if br < 1 or bc < 1:
        raise ShapeError(f"block shape must be positive, got {br}x{bc}")
    if rows % br or cols % bc:
        raise ShapeError(f"block shape {br}x{bc} does not divide {rows}x{cols}")


def encode(dense, br, bc):
    """Encode a 2-D array, storing exactly the blocks with a nonzero element."""
    dense = np.asarray(dense)
    if dense.ndim != 2:
        raise ShapeError(f"encode expects a 2-D matrix, got shape {dense.shape}")
    rows, cols = dense.shape
    _check_blocking(rows, cols, br, bc)
    tiles = dense.reshape(rows // br, br, cols // bc, bc).transpose(0, 2, 1, 3)
    present = (tiles != 0).any(axis=(2, 3))
    crow = np.zeros(rows // br + 1, dtype=INDEX_DTYPE)
    np.cumsum(present.sum(axis=1), out=crow[1:])
    col = np.nonzero(present)[1].astype(INDEX_DTYPE)
    values = np.ascontiguousarray(tiles[present]).reshape(-1)
    return BsrMatrix(rows, cols, br, bc, crow, col, values)


def validate(m):
    """Every invariant violation of ``m``; an empty list means well-formed."""
    problems = []
    if m.br < 1 or m.bc < 1:
        return [f"block shape {m.br}x{m.bc} not positive"]
    if m.rows % m.br:
        problems.append(f"br={m.br} does not divide rows={m.rows}")
    if m.cols % m.bc:
        problems.append(f"bc={m.bc} does not divide cols={m.cols}")
    crow = np.asarray(m.crow)
    col = np.asarray(m.col)
    if crow.ndim != 1 or crow.shape[0] != m.rows // m.br + 1:
        problems.append(f"crow length {crow.shape[0]} != rows/br + 1 = {m.rows // m.br + 1}")
        return problems
    if crow[0] != 0:
        problems.append("crow[0] != 0")
    if np.any(np.diff(crow) < 0):
        problems.append("crow non-monotone")
    if crow[-1] != col.shape[0]:
        problems.append(f"crow[last]={crow[-1]} != len(col)={col.shape[0]}")
    if col.size and (col.min() < 0 or col.max() >= m.cols // max(m.bc, 1)):
        problems.append("col out of range")
    if not problems and col.size > 1:
        owner = np.repeat(np.arange(crow.shape[0] - 1), np.diff(crow))
        same_row = owner[1:] == owner[:-1]
        bad = same_row & (np.diff(col) <= 0)
        if bad.any():
            rows_bad = np.unique(owner[1:][bad])
            problems.append(f"col not strictly increasing in block rows {rows_bad.tolist()[:8]}")
    expected = col.shape[0] * m.br * m.bc
    if m.values.shape != (expected,):
        problems.append(f"values length {m.values.size} != nnzb*br*bc = {expected}")
    return problems


def decode(m):
    problems = validate(m)
    if problems:
        raise FormatError("; ".join(problems))
    out = np.zeros((m.rows, m.cols), dtype=m.values.dtype)
    tiles = out.reshape(m.block_rows, m.br, m.block_cols, m.bc).transpose(0, 2, 1, 3)
    tiles[m.block_row_ids(), m.col] = m.blocks()
    return out


def nnzb_in_row(m, block_row):
    if not 0 <= block_row < m.block_rows:
        raise IndexError(f"block row {block_row} out of range [0, {m.block_rows})")
    return int(m.crow[block_row + 1] - m.crow[block_row])


def save(m, path):
    with open(path, "wb") as fh:
        fh.write(m.to_bytes())


def load(path):
    with open(path, "rb") as fh:
        return BsrMatrix.from_bytes(fh.read())


@dataclass(frozen=True)
class CompressionReport:
    dense_bytes: int
    value_bytes: int
    index_bytes: int
    total_bytes: int
    sparsity: float
    realized_sparsity: float
    nnzb: int
    overhead_fraction: float
    overhead_over_ideal: float

    @property
    def compressed_fraction(self):
        return self.total_bytes / self.dense_bytes


def compression_report(rows, cols, br, bc, s, value_unit_bytes=4, index_unit_bytes=4):
    """Byte accounting for a ``rows x cols`` matrix with ``round(s*N)`` blocks zeroed.

    ``overhead_fraction`` is index bytes over dense bytes. ``overhead_over_ideal``
    is ``total/dense - (1 - s)``, the encoding cost over a perfect ``1 - s``
    compression; block counts are integral, so at large blocks the realized
    sparsity differs from ``s`` and this figure can dip below the crow cost.
    """
    _check_blocking(rows, cols, br, bc)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {s}")
    n_blocks = (rows // br) * (cols // bc)
    nnzb = n_blocks - prune_count(s, n_blocks)
    dense_bytes = rows * cols * value_unit_bytes
    value_bytes = nnzb * br * bc * value_unit_bytes
    index_bytes = (nnzb + rows // br + 1) * index_unit_bytes
    total = value_bytes + index_bytes
    return CompressionReport(
        dense_bytes=dense_bytes,
        value_bytes=value_bytes,
        index_bytes=index_bytes,
        total_bytes=total,
        sparsity=s,
        realized_sparsity=1.0 - nnzb / n_blocks,
        nnzb=nnzb,
        overhead_fraction=index_bytes / dense_bytes,
        overhead_over_ideal=total / dense_bytes - (1.0 - s),
    )
