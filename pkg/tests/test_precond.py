"""Preconditioners, SAINV factors and the grid-transfer hierarchy."""

import numpy as np
import pytest

import ftkrylov as fk
from ftkrylov.precond import DenseSolvePreconditioner


def model(nx=8, ny=8, eps_y=1.0):
    grid = fk.StructuredGrid(nx, ny)
    A = fk.assemble_poisson(grid, fk.Anisotropy(1.0, eps_y))
    b = fk.make_rhs(grid, A, "ones")
    return grid, A, b


def iterations(A, b, M, tol=1e-10):
    _, rec = fk.solve(fk.LocalSystem(A, M),
                      b, fk.SolverConfig(variant="classic", tol=tol,
                                         maxit=5000))
    assert rec.converged
    return rec.iterations


def test_jacobi_is_diagonal_scaling():
    _, A, _ = model()
    M = fk.jacobi(A)
    r = np.random.default_rng(0).standard_normal(A.nrows)
    assert np.allclose(M.apply(r), r / A.diagonal())


def test_jacobi_rejects_zero_diagonal():
    A = fk.CsrMatrix.from_dense(np.array([[0.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(fk.SingularDiagonalError):
        fk.jacobi(A)


def test_ssor_is_spd_and_helps():
    _, A, b = model()
    M = fk.ssor(A, 1.2)
    # the SSOR application is a symmetric operator: <Mx, y> == <x, My>
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2, A.nrows))
    assert np.dot(M.apply(x), y) == pytest.approx(np.dot(x, M.apply(y)),
                                                  rel=1e-12)
    _, Aa, ba = model(16, 16, eps_y=0.01)
    assert iterations(Aa, ba, fk.ssor(Aa, 1.2)) < iterations(Aa, ba, None)


def test_ilu0_exact_on_tridiagonal():
    # 1D Laplacian has no fill, so ILU(0) is a full LU: one iteration
    grid = fk.StructuredGrid(16, 2)
    A = fk.assemble_poisson(grid, fk.Anisotropy(1.0, 1e-12))
    # build a strictly tridiagonal matrix instead (single grid line)
    n = 12
    dense = 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    T = fk.CsrMatrix.from_dense(dense)
    M = fk.ilu0(T)
    x = np.random.default_rng(5).standard_normal(n)
    assert np.allclose(M.apply(dense @ x), x)


def test_ilu0_reduces_iterations():
    _, A, b = model(16, 16, eps_y=0.01)
    assert iterations(A, b, fk.ilu0(A)) < iterations(A, b, fk.jacobi(A))


def test_dense_solve_preconditioner_is_exact():
    _, A, _ = model(6, 6)
    M = DenseSolvePreconditioner(A)
    x = np.random.default_rng(8).standard_normal(A.nrows)
    assert np.allclose(M.apply(fk.spmv(A, x)), x)
    indef = fk.CsrMatrix.from_dense(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(fk.FactorBreakdownError):
        DenseSolvePreconditioner(indef)


def test_spai1_pattern_and_symmetry_of_use():
    _, A, _ = model(6, 6)
    M = fk.spai1(A)
    # approximate inverse lives on the pattern of A
    assert np.array_equal(M.row_offsets, A.row_offsets) or M.nnz <= A.nnz
    resid = np.linalg.norm(A.to_dense() @ M.to_dense() - np.eye(A.nrows))
    assert resid < np.linalg.norm(np.eye(A.nrows))    # better than M = 0


def test_sainv_factors_reproduce_inverse_when_exact():
    rng = np.random.default_rng(13)
    B = rng.standard_normal((12, 12))
    Ad = B @ B.T + 12 * np.eye(12)
    A = fk.CsrMatrix.from_dense(Ad)
    f = fk.sainv(A, fk.SainvConfig(eps=0.0))
    # Z D^{-1} Z^T == A^{-1} for exact biconjugation
    approx = f.Z.to_dense() @ np.diag(1.0 / f.D) @ f.Z.to_dense().T
    assert np.allclose(approx, np.linalg.inv(Ad), atol=1e-8)
    r = rng.standard_normal(12)
    assert np.allclose(fk.sainv_apply(f, r), np.linalg.solve(Ad, r))


def test_sainv_row_cap_limits_fill():
    _, A, _ = model(10, 10, eps_y=0.01)
    omega = 2.0
    f = fk.sainv(A, fk.SainvConfig(eps=1e-3, omega=omega))
    # the cap applies per column of Z (the biconjugated search vectors)
    cols = np.diff(f.Z.transpose().row_offsets)
    assert cols.max() <= max(2, int(round(omega * A.nnz / A.nrows)))


def test_sainv_config_validation():
    with pytest.raises(ValueError):
        fk.SainvConfig(eps=-1.0)
    with pytest.raises(ValueError):
        fk.SainvConfig(omega=1.0)


def test_hierarchy_transfer_shapes_and_constants():
    grid = fk.StructuredGrid(8, 8)
    hier = fk.build_hierarchy(grid, 3)
    assert [lvl[0] for lvl in hier.levels] == [(8, 8), (4, 4), (2, 2)]
    ones = np.ones(64)
    coarse = fk.restrict_full(hier, ones, 1)
    assert coarse.shape == (16,)
    assert np.allclose(coarse, 1.0)        # full weighting preserves constants
    back = fk.prolongate_full(hier, coarse, 1)
    assert back.shape == (64,)
    assert np.allclose(back, 1.0)          # bilinear interpolation too


def test_hierarchy_round_trip_error_is_smooth_limited():
    grid = fk.StructuredGrid(16, 16)
    hier = fk.build_hierarchy(grid, 2)
    xs, ys = np.meshgrid(np.linspace(0, 1, 16), np.linspace(0, 1, 16))
    smooth = np.sin(np.pi * xs) * np.sin(np.pi * ys)
    x = smooth.ravel()
    rt = fk.prolongate_full(hier, fk.restrict_full(hier, x, 1), 1)
    assert np.max(np.abs(rt - x)) < 0.25 * np.max(np.abs(x))


def test_hierarchy_refuses_too_deep():
    with pytest.raises(ValueError):
        fk.build_hierarchy(fk.StructuredGrid(4, 4), 4)
