"""Classical and approximate-inverse preconditioners.

Includes Jacobi, SSOR, ILU(0), SPAI-1 least-squares assembly on the pattern
of A, SAINV A-biconjugation with drop tolerance and row cap, and the
structured-grid transfer hierarchy reused by the hierarchical backup codec.

SAINV follows the SPD convention: A^-1 is approximated by Z D^-1 Z^T with Z
unit upper triangular (columns z_i) and pivots D_ii = <z_i, A z_i>.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FactorBreakdownError, SingularDiagonalError
from .grids import StructuredGrid
from .sparse import CsrMatrix, MultiVector, spmv


class Preconditioner:
    """Linear operator M applied as z = M r."""

    def apply(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_multi(self, R: MultiVector) -> MultiVector:
        out = np.empty_like(R.values)
        for j in range(R.k):
            out[:, j] = self.apply(R.values[:, j])
        return MultiVector(out)


class IdentityPreconditioner(Preconditioner):
    def apply(self, r):
        return np.array(r, copy=True)


class JacobiPreconditioner(Preconditioner):
    def __init__(self, inv_diag):
        self.inv_diag = inv_diag

    def apply(self, r):
        return self.inv_diag * r


class SsorPreconditioner(Preconditioner):
    """Symmetric SOR sweep: z = w(2-w) (D/w + U)^-1 D (D/w + L)^-1 r."""

    def __init__(self, A: CsrMatrix, relax: float):
        self.A = A
        self.relax = relax
        self.diag = A.diagonal()

    def apply(self, r):
        A, w, d = self.A, self.relax, self.diag
        n = A.nrows
        y = np.zeros(n)
        # forward solve (D/w + L) y = r
        for i in range(n):
            cols, vals = A.row(i)
            below = cols < i
            acc = r[i] - np.dot(vals[below], y[cols[below]])
            y[i] = acc * w / d[i]
        y *= d
        z = np.zeros(n)
        # backward solve (D/w + U) z = y
        for i in range(n - 1, -1, -1):
            cols, vals = A.row(i)
            above = cols > i
            acc = y[i] - np.dot(vals[above], z[cols[above]])
            z[i] = acc * w / d[i]
        return w * (2.0 - w) * z


class IluPreconditioner(Preconditioner):
    """Forward/backward substitution on an in-place ILU(0) factorization."""

    def __init__(self, LU: CsrMatrix):
        self.LU = LU

    def apply(self, r):
        LU = self.LU
        n = LU.nrows
        y = np.zeros(n)
        for i in range(n):
            cols, vals = LU.row(i)
            below = cols < i
            y[i] = r[i] - np.dot(vals[below], y[cols[below]])
        z = np.zeros(n)
        for i in range(n - 1, -1, -1):
            cols, vals = LU.row(i)
            above = cols > i
            k = np.searchsorted(cols, i)
            z[i] = (y[i] - np.dot(vals[above], z[cols[above]])) / vals[k]
        return z


class DenseSolvePreconditioner(Preconditioner):
    """Exact solve with the (local) matrix via a dense Cholesky factor;
    the exact-block-Jacobi building block for strip-partitioned runs."""

    def __init__(self, A: CsrMatrix):
        try:
            self._chol = np.linalg.cholesky(A.to_dense())
        except np.linalg.LinAlgError as e:
            raise FactorBreakdownError("matrix is not positive definite") from e

    def apply(self, r):
        y = np.linalg.solve(self._chol, r)
        return np.linalg.solve(self._chol.T, y)


class SparseMatrixPreconditioner(Preconditioner):
    """Apply a stored sparse matrix M (e.g. a SPAI-1 approximate inverse)."""

    def __init__(self, M: CsrMatrix):
        self.M = M

    def apply(self, r):
        return spmv(self.M, r)


def jacobi(A: CsrMatrix) -> Preconditioner:
    d = A.diagonal()
    if np.any(d == 0.0):
        raise SingularDiagonalError("zero diagonal entry")
    return JacobiPreconditioner(1.0 / d)


def ssor(A: CsrMatrix, relax: float = 1.0) -> Preconditioner:
    if not 0.0 < relax < 2.0:
        raise ValueError("relaxation factor must lie in (0, 2)")
    if np.any(A.diagonal() == 0.0):
        raise SingularDiagonalError("zero diagonal entry")
    return SsorPreconditioner(A, relax)


def ilu0(A: CsrMatrix) -> Preconditioner:
    """ILU with zero fill-in: sparsity(L+U) = sparsity(A)."""
    n = A.nrows
    vals = A.values.copy()
    offsets, cols = A.row_offsets, A.col_indices
    diag_pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        lo, hi = offsets[i], offsets[i + 1]
        k = lo + np.searchsorted(cols[lo:hi], i)
        if k >= hi or cols[k] != i:
            raise FactorBreakdownError(f"missing diagonal in row {i}")
        diag_pos[i] = k
    for i in range(n):
        lo, hi = offsets[i], offsets[i + 1]
        for kk in range(lo, hi):
            k = cols[kk]
            if k >= i:
                break
            piv = vals[diag_pos[k]]
            if piv == 0.0:
                raise FactorBreakdownError(f"zero pivot in row {k}")
            factor = vals[kk] / piv
            vals[kk] = factor
            # subtract factor * U-part of row k from row i, pattern of A only
            klo, khi = diag_pos[k] + 1, offsets[k + 1]
            irow = cols[lo:hi]
            for jj in range(klo, khi):
                pos = lo + np.searchsorted(irow, cols[jj])
                if pos < hi and cols[pos] == cols[jj]:
                    vals[pos] -= factor * vals[jj]
        if vals[diag_pos[i]] == 0.0:
            raise FactorBreakdownError(f"zero pivot in row {i}")
    return IluPreconditioner(CsrMatrix(n, n, offsets.copy(), cols.copy(), vals))


def spai1(A: CsrMatrix) -> CsrMatrix:
    """Sparse approximate inverse on the pattern of A.

    Column m_j minimizes ||A m_j - e_j||_2 over the pattern of A's column j;
    the small dense least-squares problem of every column is solved via QR.
    """
    n = A.nrows
    At = A.transpose()       # row i of At = column i of A
    dense = A.to_dense()
    rows_out, cols_out, vals_out = [], [], []
    for j in range(n):
        pattern, _ = At.row(j)
        # rows touched by the pattern columns
        touched = np.unique(np.concatenate([At.row(c)[0] for c in pattern]))
        sub = dense[np.ix_(touched, pattern)]
        rhs = (touched == j).astype(np.float64)
        q, r = np.linalg.qr(sub)
        rd = np.abs(np.diag(r))
        if rd.min() <= 1e-13 * max(rd.max(), 1.0):
            raise FactorBreakdownError(f"rank-deficient subproblem for column {j}")
        m_j = np.linalg.solve(r, q.T @ rhs)
        rows_out.extend(pattern)
        cols_out.extend([j] * len(pattern))
        vals_out.extend(m_j)
    return CsrMatrix.from_coo(n, n, rows_out, cols_out, vals_out)


@dataclass
class SainvConfig:
    eps: float = 0.0
    omega: float = float("inf")

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("drop tolerance must be nonnegative")
        if self.omega <= 1.0:
            raise ValueError("row cap omega must be greater than one")


@dataclass
class SainvFactors:
    Z: CsrMatrix
    D: np.ndarray


def sainv(A: CsrMatrix, cfg: SainvConfig | None = None) -> SainvFactors:
    """Right-looking outer-product A-biconjugation with drop/cap updates.

    Z starts as the identity; at step i the pivot D_ii = <z_i, A z_i> is
    formed and every later column j > i is updated by
    alpha = -(<z_j, A z_i>/D_ii) z_i.  A candidate entry alpha_n survives the
    drop test |alpha_n| > eps * max|A| and is then added to an existing
    entry, inserted if the row cap leaves room, or replaces the current
    smallest-magnitude entry if larger; otherwise it is dropped.  The unit
    diagonal is never evicted.
    """
    cfg = cfg or SainvConfig()
    n = A.nrows
    max_abs = np.abs(A.values).max() if A.nnz else 0.0
    drop = cfg.eps * max_abs
    if np.isinf(cfg.omega):
        cap = n
    else:
        cap = max(2, int(round(cfg.omega * A.nnz / n)))
    # columns of Z as dicts row -> value
    z = [{i: 1.0} for i in range(n)]
    D = np.zeros(n)
    for i in range(n):
        # v = A z_i
        v = {}
        for row, zval in z[i].items():
            cols, vals = A.row(row)
            for c, a in zip(cols, vals):
                v[c] = v.get(c, 0.0) + a * zval
        d_ii = sum(z[i].get(r, 0.0) * val for r, val in v.items())
        if d_ii <= 0.0:
            raise FactorBreakdownError(
                f"nonpositive pivot {d_ii:.3e} at step {i}: input not SPD "
                "or dropping too aggressive"
            )
        D[i] = d_ii
        for j in range(i + 1, n):
            coeff = sum(val * v.get(r, 0.0) for r, val in z[j].items())
            if coeff == 0.0:
                continue
            scale = -coeff / d_ii
            zj = z[j]
            for row, zval in z[i].items():
                a_n = scale * zval
                if abs(a_n) <= drop:
                    continue
                if row in zj:
                    zj[row] += a_n
                elif len(zj) < cap:
                    zj[row] = a_n
                else:
                    # replace the smallest-magnitude off-diagonal entry
                    min_row = min(
                        (r for r in zj if r != j), key=lambda r: abs(zj[r]),
                        default=None,
                    )
                    if min_row is not None and abs(a_n) > abs(zj[min_row]):
                        del zj[min_row]
                        zj[row] = a_n
    rows_out, cols_out, vals_out = [], [], []
    for jcol, col in enumerate(z):
        for row, val in sorted(col.items()):
            rows_out.append(row)
            cols_out.append(jcol)
            vals_out.append(val)
    return SainvFactors(CsrMatrix.from_coo(n, n, rows_out, cols_out, vals_out), D)


def sainv_apply(factors: SainvFactors, x: np.ndarray) -> np.ndarray:
    """Apply Z D^-1 Z^T x."""
    Zt = factors.Z.transpose()
    y = spmv(Zt, x) / factors.D
    return spmv(factors.Z, y)


class SainvPreconditioner(Preconditioner):
    def __init__(self, factors: SainvFactors):
        self.factors = factors

    def apply(self, r):
        return sainv_apply(self.factors, r)


@dataclass
class Hierarchy:
    """Structured-grid transfer operators for the hierarchical backup codec.

    levels[l] = (dims, restriction, prolongation); coarse point (I, J) sits
    at fine point (2I, 2J), dims halve rounding up so every coarse point has
    a fine anchor.  Prolongation is bilinear interpolation, which equals
    2 * restriction^T per dimension on interior points.
    """

    levels: list


def _coarsen_1d(n: int):
    """Full-weighting restriction and linear prolongation for one axis."""
    nc = (n + 1) // 2
    rr, rc, rv = [], [], []
    for ii in range(nc):
        f = 2 * ii
        sten = [(f - 1, 0.25), (f, 0.5), (f + 1, 0.25)]
        sten = [(c, w) for c, w in sten if 0 <= c < n]
        total = sum(w for _, w in sten)
        for c, w in sten:
            rr.append(ii)
            rc.append(c)
            rv.append(w / total)
    R = CsrMatrix.from_coo(nc, n, rr, rc, rv)
    pr, pc, pv = [], [], []
    for f in range(n):
        if f % 2 == 0:
            pr.append(f)
            pc.append(f // 2)
            pv.append(1.0)
        else:
            left, right = f // 2, f // 2 + 1
            if right < nc:
                pr.extend([f, f])
                pc.extend([left, right])
                pv.extend([0.5, 0.5])
            else:
                pr.append(f)
                pc.append(left)
                pv.append(1.0)
    P = CsrMatrix.from_coo(n, nc, pr, pc, pv)
    return R, P


def _kron(Ay: CsrMatrix, Ax: CsrMatrix) -> CsrMatrix:
    """Kronecker product for tensorized 2D transfer operators (y outer, x inner)."""
    rows, cols, vals = [], [], []
    for iy in range(Ay.nrows):
        ycols, yvals = Ay.row(iy)
        for ix in range(Ax.nrows):
            xcols, xvals = Ax.row(ix)
            r = iy * Ax.nrows + ix
            for jy, vy in zip(ycols, yvals):
                for jx, vx in zip(xcols, xvals):
                    rows.append(r)
                    cols.append(jy * Ax.ncols + jx)
                    vals.append(vy * vx)
    return CsrMatrix.from_coo(Ay.nrows * Ax.nrows, Ay.ncols * Ax.ncols,
                              rows, cols, vals)


def build_hierarchy(grid: StructuredGrid, levels: int) -> Hierarchy:
    """Full-weighting restriction / bilinear prolongation per level."""
    if levels < 1:
        raise ValueError("need at least one level")
    dims = (grid.nx, grid.ny)
    out = [(dims, CsrMatrix.identity(dims[0] * dims[1]),
            CsrMatrix.identity(dims[0] * dims[1]))]
    for _ in range(levels - 1):
        nx, ny = dims
        ncx, ncy = (nx + 1) // 2, (ny + 1) // 2
        if ncx < 2 or ncy < 2:
            raise ValueError(f"cannot coarsen {nx}x{ny} further")
        Rx, Px = _coarsen_1d(nx)
        Ry, Py = _coarsen_1d(ny)
        out.append(((ncx, ncy), _kron(Ry, Rx), _kron(Py, Px)))
        dims = (ncx, ncy)
    return Hierarchy(out)


def restrict_full(hier: Hierarchy, x: np.ndarray, level: int) -> np.ndarray:
    """Restrict a finest-level vector down to ``level``."""
    for _, R, _ in hier.levels[1 : level + 1]:
        x = spmv(R, x)
    return x


def prolongate_full(hier: Hierarchy, xc: np.ndarray, level: int) -> np.ndarray:
    """Prolongate a level-``level`` vector back to the finest level."""
    for _, _, P in reversed(hier.levels[1 : level + 1]):
        xc = spmv(P, xc)
    return xc
