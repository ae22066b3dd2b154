"""Sparse matrix and (multi-)vector kernels.

CSR is the single storage format.  All kernels accumulate per row in
ascending column-index order, so repeated runs (and the multi-RHS kernel
versus k single spmv calls) are bit-identical.

Multi-right-hand-side blocks are stored interleaved: the k values of row i
are contiguous in memory (an (n, k) C-contiguous array).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, MatrixMarketError


@dataclass
class CsrMatrix:
    """Compressed sparse row matrix with sorted, duplicate-free columns per row."""

    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.row_offsets.shape != (self.nrows + 1,):
            raise DimensionMismatchError("row_offsets must have length nrows+1")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != len(self.values):
            raise DimensionMismatchError("row_offsets must span [0, nnz]")
        if np.any(np.diff(self.row_offsets) < 0):
            raise DimensionMismatchError("row_offsets must be nondecreasing")
        if len(self.col_indices) != len(self.values):
            raise DimensionMismatchError("col_indices and values length mismatch")
        if len(self.col_indices) and (
            self.col_indices.min() < 0 or self.col_indices.max() >= self.ncols
        ):
            raise DimensionMismatchError("column index out of range")
        for i in range(self.nrows):
            lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
            cols = self.col_indices[lo:hi]
            if np.any(np.diff(cols) <= 0):
                raise DimensionMismatchError(
                    f"columns of row {i} not strictly increasing"
                )

    @property
    def nnz(self) -> int:
        return len(self.values)

    @classmethod
    def from_coo(cls, nrows, ncols, rows, cols, vals) -> "CsrMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows) > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if np.any(dup):
                k = int(np.flatnonzero(dup)[0])
                raise MatrixMarketError(
                    f"duplicate entry at ({rows[k]}, {cols[k]})"
                )
        offsets = np.zeros(nrows + 1, dtype=np.int64)
        np.add.at(offsets, rows + 1, 1)
        np.cumsum(offsets, out=offsets)
        return cls(nrows, ncols, offsets, cols, vals)

    @classmethod
    def from_dense(cls, dense, tol: float = 0.0) -> "CsrMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(np.abs(dense) > tol)
        return cls.from_coo(*dense.shape, rows, cols, dense[rows, cols])

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.nrows, self.ncols))
        for i in range(self.nrows):
            lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
            out[i, self.col_indices[lo:hi]] = self.values[lo:hi]
        return out

    def row(self, i: int):
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def diagonal(self) -> np.ndarray:
        d = np.zeros(min(self.nrows, self.ncols))
        for i in range(len(d)):
            cols, vals = self.row(i)
            k = np.searchsorted(cols, i)
            if k < len(cols) and cols[k] == i:
                d[i] = vals[k]
        return d

    def transpose(self) -> "CsrMatrix":
        rows = np.repeat(np.arange(self.nrows), np.diff(self.row_offsets))
        return CsrMatrix.from_coo(
            self.ncols, self.nrows, self.col_indices, rows, self.values
        )

    def submatrix(self, row_idx, col_idx) -> "CsrMatrix":
        """Extract rows ``row_idx`` and remap columns onto ``col_idx``.

        Columns outside ``col_idx`` are dropped.
        """
        row_idx = np.asarray(row_idx, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        colmap = -np.ones(self.ncols, dtype=np.int64)
        colmap[col_idx] = np.arange(len(col_idx))
        out_r, out_c, out_v = [], [], []
        for new_i, i in enumerate(row_idx):
            cols, vals = self.row(i)
            keep = colmap[cols] >= 0
            out_r.extend([new_i] * int(keep.sum()))
            out_c.extend(colmap[cols[keep]])
            out_v.extend(vals[keep])
        return CsrMatrix.from_coo(len(row_idx), len(col_idx), out_r, out_c, out_v)


@dataclass
class MultiVector:
    """Block of k vectors stored row-interleaved: values[i] holds row i's k entries."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionMismatchError("MultiVector needs an (n, k) array")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, n: int, k: int) -> "MultiVector":
        return cls(np.zeros((n, k)))

    @classmethod
    def from_columns(cls, columns) -> "MultiVector":
        return cls(np.column_stack([np.asarray(c, dtype=np.float64) for c in columns]))

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j].copy()

    def set_column(self, j: int, v) -> None:
        self.values[:, j] = v

    def copy(self) -> "MultiVector":
        return MultiVector(self.values.copy())


GRAM_MODES = ("full", "block_diagonal", "diagonal")


@dataclass
class GramMatrix:
    """k x k inner-product matrix with a declared sparsity mode."""

    values: np.ndarray
    mode: str = "full"
    block_size: int | None = None

    def __post_init__(self):
        if self.mode not in GRAM_MODES:
            raise ValueError(f"unknown gram mode {self.mode!r}")
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def k(self) -> int:
        return self.values.shape[0]


def spmv(A: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """Exact CSR product, accumulating each row in ascending column order."""
    x = np.asarray(x, dtype=np.float64)
    if A.ncols != len(x):
        raise DimensionMismatchError(f"spmv: {A.ncols} columns vs vector of {len(x)}")
    prod = A.values * x[A.col_indices]
    out = np.zeros(A.nrows)
    counts = np.diff(A.row_offsets)
    nz = counts > 0
    if np.any(nz):
        out[nz] = np.add.reduceat(prod, A.row_offsets[:-1][nz])
    return out


def spmm_multi(A: CsrMatrix, X: MultiVector) -> MultiVector:
    """A times every column of X; bit-identical to k separate spmv calls."""
    if A.ncols != X.n:
        raise DimensionMismatchError("spmm_multi: shape mismatch")
    out = np.empty((A.nrows, X.k))
    for j in range(X.k):
        out[:, j] = spmv(A, X.values[:, j])
    return MultiVector(out)


def dot_block(X: MultiVector, Y: MultiVector, mode: str = "full",
              block_size: int | None = None) -> GramMatrix:
    """Columnwise inner products of X and Y, sparsified per mode."""
    if X.values.shape != Y.values.shape:
        raise DimensionMismatchError("dot_block: shape mismatch")
    k = X.k
    if mode == "full":
        g = X.values.T @ Y.values
    elif mode == "diagonal":
        g = np.diag(np.einsum("ij,ij->j", X.values, Y.values))
    elif mode == "block_diagonal":
        if block_size is None or block_size <= 0 or k % block_size != 0:
            raise DimensionMismatchError(
                f"block size {block_size} does not divide k={k}"
            )
        g = np.zeros((k, k))
        for s in range(0, k, block_size):
            sl = slice(s, s + block_size)
            g[sl, sl] = X.values[:, sl].T @ Y.values[:, sl]
    else:
        raise ValueError(f"unknown gram mode {mode!r}")
    return GramMatrix(g, mode=mode, block_size=block_size)


# BLAS-1 style helpers (columnwise on MultiVector)

def axpy(alpha: float, x, y):
    """Return alpha*x + y."""
    xv = x.values if isinstance(x, MultiVector) else np.asarray(x)
    yv = y.values if isinstance(y, MultiVector) else np.asarray(y)
    if xv.shape != yv.shape:
        raise DimensionMismatchError("axpy: shape mismatch")
    out = alpha * xv + yv
    return MultiVector(out) if isinstance(x, MultiVector) else out


def scale(alpha: float, x):
    xv = x.values if isinstance(x, MultiVector) else np.asarray(x)
    out = alpha * xv
    return MultiVector(out) if isinstance(x, MultiVector) else out


def norm2(x):
    """Euclidean norm; columnwise for MultiVector."""
    if isinstance(x, MultiVector):
        return np.sqrt(np.einsum("ij,ij->j", x.values, x.values))
    x = np.asarray(x)
    return float(np.sqrt(np.dot(x, x)))


def copy(x):
    if isinstance(x, MultiVector):
        return x.copy()
    return np.array(x, dtype=np.float64, copy=True)


# Matrix Market I/O (coordinate, real, general/symmetric)

def read_matrix_market(path) -> CsrMatrix:
    with open(path) as f:
        header = f.readline()
        parts = header.strip().split()
        if (
            len(parts) != 5
            or parts[0] != "%%MatrixMarket"
            or parts[1].lower() != "matrix"
            or parts[2].lower() != "coordinate"
            or parts[3].lower() != "real"
            or parts[4].lower() not in ("general", "symmetric")
        ):
            raise MatrixMarketError(f"malformed header: {header.strip()!r}")
        symmetric = parts[4].lower() == "symmetric"
        line = f.readline()
        while line.startswith("%"):
            line = f.readline()
        try:
            nrows, ncols, nnz = (int(t) for t in line.split())
        except ValueError as e:
            raise MatrixMarketError(f"bad size line: {line.strip()!r}") from e
        rows, cols, vals = [], [], []
        for _ in range(nnz):
            toks = f.readline().split()
            if len(toks) != 3:
                raise MatrixMarketError("truncated entry line")
            i, j, v = int(toks[0]) - 1, int(toks[1]) - 1, float(toks[2])
            if not (0 <= i < nrows and 0 <= j < ncols):
                raise MatrixMarketError(f"index out of range: ({i + 1}, {j + 1})")
            rows.append(i)
            cols.append(j)
            vals.append(v)
            if symmetric and i != j:
                rows.append(j)
                cols.append(i)
                vals.append(v)
    return CsrMatrix.from_coo(nrows, ncols, rows, cols, vals)


def write_matrix_market(A: CsrMatrix, path) -> None:
    with open(path, "w") as f:
        f.write("%%MatrixMarket matrix coordinate real general\n")
        f.write(f"{A.nrows} {A.ncols} {A.nnz}\n")
        for i in range(A.nrows):
            cols, vals = A.row(i)
            for j, v in zip(cols, vals):
                f.write(f"{i + 1} {j + 1} {v:.17g}\n")


def read_vector(path) -> np.ndarray:
    return np.loadtxt(path, ndmin=1)


def write_vector(x, path) -> None:
    with open(path, "w") as f:
        for v in np.asarray(x).ravel():
            f.write(f"{v:.17g}\n")
