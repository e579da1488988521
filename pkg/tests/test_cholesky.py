import numpy as np
import pytest
import scipy.sparse as sp

from carforest.cholesky import NotPositiveDefinite, SymbolicCholesky
from carforest.graph import knn_adjacency, laplacian


def spd_matrix(seed, n=60, d=4, shift=0.3):
    rng = np.random.default_rng(seed)
    w = knn_adjacency(rng.random((n, 2)), d).w
    return (laplacian(w) + shift * sp.identity(n)).tocsc()


class TestSparseCholesky:
    @pytest.mark.parametrize("seed", range(4))
    def test_logdet_and_solve(self, seed):
        a = spd_matrix(seed)
        dense = a.toarray()
        chol = SymbolicCholesky(a).factor_matrix(a)
        assert chol.logdet == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-12)
        b = np.random.default_rng(seed).standard_normal((a.shape[0], 3))
        np.testing.assert_allclose(chol.solve(b), np.linalg.solve(dense, b), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(chol.solve(b[:, 0]), np.linalg.solve(dense, b[:, 0]), rtol=1e-10)

    @pytest.mark.parametrize("seed", range(4))
    def test_inverse_diagonal(self, seed):
        a = spd_matrix(seed)
        chol = SymbolicCholesky(a).factor_matrix(a)
        np.testing.assert_allclose(chol.inverse_diagonal(), np.diag(np.linalg.inv(a.toarray())), rtol=1e-10)

    def test_symbolic_reuse_across_values(self):
        a = spd_matrix(7)
        sym = SymbolicCholesky(a)
        for shift in (0.1, 1.0, 10.0):
            m = (a + shift * sp.identity(a.shape[0])).tocsc()
            assert sym.factor_matrix(m).logdet == pytest.approx(np.linalg.slogdet(m.toarray())[1], rel=1e-12)

    def test_sample_covariance(self):
        a = spd_matrix(1, n=8, d=2, shift=1.0)
        chol = SymbolicCholesky(a).factor_matrix(a)
        draws = chol.sample(np.random.default_rng(0), size=40000)
        np.testing.assert_allclose(np.cov(draws), np.linalg.inv(a.toarray()), atol=0.02)

    def test_not_positive_definite(self):
        a = spd_matrix(2, shift=0.0)  # singular Laplacian
        a = (a - 0.5 * sp.identity(a.shape[0])).tocsc()
        with pytest.raises(NotPositiveDefinite):
            SymbolicCholesky(a).factor_matrix(a)

    def test_entries_outside_pattern(self):
        sym = SymbolicCholesky(sp.identity(3, format="csc"))
        with pytest.raises(ValueError):
            sym.align(sp.csc_matrix(np.ones((3, 3))))
