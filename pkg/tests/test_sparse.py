"""CSR container, multivectors, kernels and Matrix Market round trips."""

import numpy as np
import pytest

import ftkrylov as fk


def small_matrix():
    dense = np.array([[4.0, -1.0, 0.0],
                      [-1.0, 4.0, -2.0],
                      [0.0, -2.0, 5.0]])
    return fk.CsrMatrix.from_dense(dense), dense


def test_from_coo_sorts_and_rejects_duplicates():
    A = fk.CsrMatrix.from_coo(2, 2, [1, 0, 0], [1, 1, 0], [3.0, 2.0, 1.0])
    assert np.allclose(A.to_dense(), [[1.0, 2.0], [0.0, 3.0]])
    assert A.nnz == 3
    with pytest.raises(fk.MatrixMarketError):
        fk.CsrMatrix.from_coo(2, 2, [0, 0], [1, 1], [2.0, 4.0])


def test_invalid_structure_rejected():
    with pytest.raises(fk.DimensionMismatchError):
        fk.CsrMatrix(2, 2, [0, 1], [0], [1.0])          # bad offsets length
    with pytest.raises(fk.DimensionMismatchError):
        fk.CsrMatrix(1, 1, [0, 1], [4], [1.0])          # column out of range
    with pytest.raises(fk.DimensionMismatchError):
        fk.CsrMatrix(1, 3, [0, 2], [1, 1], [1.0, 2.0])  # duplicate column


def test_spmv_matches_dense():
    A, dense = small_matrix()
    x = np.array([1.0, -2.0, 0.5])
    assert np.allclose(fk.spmv(A, x), dense @ x)
    with pytest.raises(fk.DimensionMismatchError):
        fk.spmv(A, np.ones(4))


def test_diagonal_transpose_submatrix():
    A, dense = small_matrix()
    assert np.allclose(A.diagonal(), np.diag(dense))
    assert np.allclose(A.transpose().to_dense(), dense.T)
    sub = A.submatrix(np.array([0, 2]), np.array([1, 2]))
    assert np.allclose(sub.to_dense(), dense[np.ix_([0, 2], [1, 2])])


def test_multivector_and_block_kernels():
    rng = np.random.default_rng(0)
    A, dense = small_matrix()
    X = fk.MultiVector(rng.standard_normal((3, 2)))
    Y = fk.MultiVector(rng.standard_normal((3, 2)))
    assert np.allclose(fk.spmm_multi(A, X).values, dense @ X.values)
    full = fk.dot_block(X, Y, mode="full")
    assert np.allclose(full.values, X.values.T @ Y.values)
    diag = fk.dot_block(X, Y, mode="diagonal")
    assert np.allclose(np.diag(diag.values),
                       np.diag(X.values.T @ Y.values))
    assert np.count_nonzero(
        diag.values - np.diag(np.diag(diag.values))) == 0


def test_vector_helpers():
    x = np.array([3.0, 4.0])
    y = np.array([1.0, 1.0])
    assert np.allclose(fk.axpy(2.0, x, y), 2.0 * x + y)
    assert np.allclose(fk.scale(0.5, x), [1.5, 2.0])
    assert fk.norm2(x) == pytest.approx(5.0)
    c = fk.copy(x)
    c[0] = 0.0
    assert x[0] == 3.0


def test_matrix_market_round_trip(tmp_path):
    A, dense = small_matrix()
    path = tmp_path / "a.mtx"
    fk.write_matrix_market(A, path)
    B = fk.read_matrix_market(path)
    assert B.nrows == 3 and B.ncols == 3
    assert np.allclose(B.to_dense(), dense)


def test_matrix_market_rejects_garbage(tmp_path):
    path = tmp_path / "bad.mtx"
    path.write_text("%%MatrixMarket matrix coordinate real general\n2 2\n")
    with pytest.raises(fk.MatrixMarketError):
        fk.read_matrix_market(path)
    path.write_text("not a matrix market file\n")
    with pytest.raises(fk.MatrixMarketError):
        fk.read_matrix_market(path)


def test_vector_file_round_trip(tmp_path):
    x = np.array([1.5, -2.25, 1e-17])
    path = tmp_path / "x.vec"
    fk.write_vector(x, path)
    assert np.array_equal(fk.read_vector(path), x)
