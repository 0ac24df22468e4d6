import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from hvfilter.artifacts import read_factor, read_pattern, write_factor, write_pattern
from hvfilter.sparse import (
    DenseOracle,
    EntryOracle,
    NotPositiveDefiniteError,
    PatternViolationError,
    SparseLowerTri,
    SparseUpperTri,
    SparsityPattern,
    SymmetricPatternMatrix,
    factor_logpdf,
    ichol,
    invert_transpose_lower,
    pattern_restricted_forecast_cov,
    pattern_restricted_gram,
    reverse_cholesky,
)

from conftest import dense_gaussian_logpdf, hv_setup, random_spd


class RecordingOracle(EntryOracle):
    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        self.n = self.matrix.shape[0]
        self.seen = set()

    def entries(self, rows, cols):
        self.seen.update(zip(np.ravel(rows).tolist(), np.ravel(cols).tolist()))
        return self.matrix[rows, cols]


def random_hv_factor(n, seed):
    rng = np.random.default_rng(seed)
    _, s, _ = hv_setup(n, seed)
    vals = rng.uniform(-0.5, 0.5, s.nnz)
    vals[s.diag_positions] = rng.uniform(0.5, 2.0, n)
    return s, SparseLowerTri(s, vals)


class TestPattern:
    def test_from_rows_and_dense(self):
        s = SparsityPattern.from_rows([[0], [0, 1], [1, 2]])
        assert s.nnz == 5
        assert s.to_dense().tolist() == [[1, 0, 0], [1, 1, 0], [0, 1, 1]]
        assert SparsityPattern.from_dense(s.to_dense()) == s

    def test_rejects_upper_entries(self):
        with pytest.raises(ValueError):
            SparsityPattern.from_rows([[0, 1], [1]])

    def test_full_and_diagonal(self):
        assert SparsityPattern.full(4).nnz == 10
        assert SparsityPattern.full(4).is_full
        assert SparsityPattern.diagonal(4).nnz == 4
        assert not SparsityPattern.diagonal(4).is_full


class TestIchol:
    def test_identity_diagonal_pattern(self):
        l = ichol(DenseOracle(np.eye(3)), SparsityPattern.diagonal(3))
        assert np.array_equal(l.to_dense(), np.eye(3))

    def test_two_by_two(self):
        l = ichol(DenseOracle([[4, 2], [2, 5]]), SparsityPattern.full(2))
        np.testing.assert_allclose(l.to_dense(), [[2, 0], [1, 2]], atol=1e-15)

    def test_skip_rule(self):
        a = [[1, .5, 0], [.5, 1, .5], [0, .5, 1]]
        s = SparsityPattern.from_rows([[0], [0, 1], [1, 2]])
        l = ichol(DenseOracle(a), s).to_dense()
        np.testing.assert_allclose(
            [l[0, 0], l[1, 0], l[1, 1], l[2, 0], l[2, 1], l[2, 2]],
            [1, .5, .8660254037844386, 0, .5773502691896258, .816496580927726], atol=1e-12)

    def test_reads_only_pattern_entries(self):
        _, s, sigma = hv_setup(80, 1)
        rec = RecordingOracle(sigma.to_dense())
        ichol(rec, s)
        allowed = set(zip(s.row_ids.tolist(), s.indices.tolist()))
        assert rec.seen and rec.seen <= allowed

    def test_not_positive_definite(self):
        a = np.array([[1.0, 2.0, 0], [2.0, 1.0, 0], [0, 0, 1]])
        s = SparsityPattern.from_rows([[0], [0, 1], [2]])
        with pytest.raises(NotPositiveDefiniteError, match="not positive definite on pattern") as exc:
            ichol(DenseOracle(a), s)
        assert exc.value.row == 1

    def test_full_pattern_failure_reports_row(self):
        a = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(NotPositiveDefiniteError) as exc:
            ichol(DenseOracle(a), SparsityPattern.full(2))
        assert exc.value.row == 1

    def test_shift(self):
        l = ichol(DenseOracle(np.eye(2)), SparsityPattern.full(2), shift=3.0)
        np.testing.assert_allclose(l.diagonal(), [2, 2])
        with pytest.raises(ValueError):
            ichol(DenseOracle(np.eye(2)), SparsityPattern.full(2), shift=-1.0)

    def test_numba_kernel_matches_dense_on_full_pattern(self, rng):
        from hvfilter import _kernels
        a = random_spd(30, rng)
        s = SparsityPattern.full(30)
        vals, status = _kernels.ichol(s.indptr, s.indices, DenseOracle(a).on_pattern(s), 0.0)
        assert status == _kernels.OK
        np.testing.assert_allclose(SparseLowerTri(s, vals).to_dense(), np.linalg.cholesky(a), atol=1e-10)

    def test_marginal_exactness(self):
        _, s, sigma = hv_setup(200, 2)
        l = ichol(sigma, s).to_dense()
        prod = l @ l.T
        np.testing.assert_allclose(prod[s.row_ids, s.indices], sigma.on_pattern(s), atol=1e-10)


class TestReverseCholesky:
    def test_identity(self):
        s = SparsityPattern.full(3)
        u = reverse_cholesky(SymmetricPatternMatrix(s, DenseOracle(np.eye(3)).on_pattern(s)))
        np.testing.assert_allclose(u.to_dense(), np.eye(3), atol=1e-15)

    def test_two_by_two(self):
        s = SparsityPattern.full(2)
        u = reverse_cholesky(SymmetricPatternMatrix(s, np.array([2.0, 1.0, 2.0]))).to_dense()
        np.testing.assert_allclose(u, [[np.sqrt(1.5), 1 / np.sqrt(2)], [0, np.sqrt(2)]], atol=1e-15)

    def test_round_trip(self):
        s, l = random_hv_factor(128, 3)
        u0 = SparseUpperTri(l)
        lam = pattern_restricted_gram(u0)
        u = reverse_cholesky(lam)
        np.testing.assert_allclose(u.values, u0.values, atol=1e-10)

    def test_pattern_violation(self):
        s = SparsityPattern.from_rows([[0], [1], [0, 1, 2]])
        lam = SymmetricPatternMatrix(s, np.array([2.0, 2.0, 0.5, 0.5, 2.0]))
        with pytest.raises(PatternViolationError, match="pattern violation"):
            reverse_cholesky(lam)

    def test_not_positive_definite(self):
        s = SparsityPattern.full(2)
        with pytest.raises(NotPositiveDefiniteError, match="precision not positive definite"):
            reverse_cholesky(SymmetricPatternMatrix(s, np.array([1.0, 2.0, 1.0])))


class TestInverseAndProducts:
    def test_identity_inverse(self):
        s = SparsityPattern.diagonal(3)
        u = invert_transpose_lower(SparseLowerTri(s, np.ones(3)))
        np.testing.assert_allclose(u.to_dense(), np.eye(3))

    def test_two_by_two_inverse(self):
        u = invert_transpose_lower(SparseLowerTri(SparsityPattern.full(2), np.array([2.0, 1.0, 2.0])))
        np.testing.assert_allclose(u.to_dense(), [[0.5, -0.25], [0, 0.5]], atol=1e-15)

    @pytest.mark.parametrize("n", [64, 300])
    def test_inverse_on_hv_pattern(self, n):
        _, l = random_hv_factor(n, n)
        u = invert_transpose_lower(l)
        assert u.pattern == l.pattern
        assert np.max(np.abs(l.to_dense().T @ u.to_dense() - np.eye(n))) < 1e-10

    def test_zero_diagonal(self):
        s = SparsityPattern.from_rows([[0], [0, 1]])
        with pytest.raises(ZeroDivisionError):
            invert_transpose_lower(SparseLowerTri(s, np.array([1.0, 1.0, 0.0])))

    def test_gram_examples(self):
        s = SparsityPattern.diagonal(3)
        u = SparseUpperTri(SparseLowerTri(s, np.ones(3)))
        np.testing.assert_allclose(pattern_restricted_gram(u).to_dense(), np.eye(3))
        lam = pattern_restricted_gram(u, extra_diag=np.array([0.0, 5.0, 0.0]))
        assert lam.to_dense()[1, 1] == 6.0
        with pytest.raises(ValueError):
            pattern_restricted_gram(u, extra_diag=np.array([0.0, -1.0, 0.0]))

    def test_gram_on_hv_pattern(self, rng):
        s, l = random_hv_factor(64, 4)
        u = SparseUpperTri(l)
        extra = np.where(rng.uniform(size=64) < 0.3, 2.0, 0.0)
        lam = pattern_restricted_gram(u, extra).to_dense()
        ud = u.to_dense()
        ref = ud @ ud.T + np.diag(extra)
        support = (s.to_dense() + s.to_dense().T) > 0
        assert np.max(np.abs(lam - ref)[support]) < 1e-12
        # the product has no mass off the pattern
        assert np.max(np.abs(ref[~support])) < 1e-12
        assert np.all(lam[~support] == 0)

    def test_forecast_cov_examples(self):
        s = SparsityPattern.full(4)
        np.testing.assert_allclose(
            pattern_restricted_forecast_cov(np.zeros((4, 4)), DenseOracle(np.eye(4)), s).to_dense(), np.eye(4))
        np.testing.assert_allclose(
            pattern_restricted_forecast_cov(np.eye(4), None, s).to_dense(), np.eye(4))

    @pytest.mark.parametrize("sparse_rows", [False, True])
    def test_forecast_cov_on_hv_pattern(self, sparse_rows, rng):
        import scipy.sparse as sp
        h, s, q = hv_setup(64, 5)
        m = rng.standard_normal((64, 64)) * (rng.uniform(size=(64, 64)) < 0.1)
        rows = sp.csr_matrix(m) if sparse_rows else m
        got = pattern_restricted_forecast_cov(rows, q, s).on_pattern(s)
        ref = (m @ m.T + q.to_dense())[s.row_ids, s.indices]
        assert np.max(np.abs(got - ref)) < 1e-12


class TestFactorLogpdf:
    def test_examples(self):
        u = SparseUpperTri(SparseLowerTri(SparsityPattern.diagonal(1), np.ones(1)))
        assert factor_logpdf([0.0], [0.0], u) == pytest.approx(-0.9189385332046727, abs=1e-12)
        assert factor_logpdf([1.0], [0.0], u) == pytest.approx(-1.4189385332046727, abs=1e-12)

    def test_dense_oracle(self, rng):
        s, l = random_hv_factor(32, 6)
        u = SparseUpperTri(l)
        ud = u.to_dense()
        cov = np.linalg.inv(ud @ ud.T)
        x, m = rng.standard_normal(32), rng.standard_normal(32)
        assert abs(factor_logpdf(x, m, u) - dense_gaussian_logpdf(x, m, cov)) < 1e-10

    def test_dimension_mismatch(self):
        u = SparseUpperTri(SparseLowerTri(SparsityPattern.diagonal(2), np.ones(2)))
        with pytest.raises(ValueError, match="dimension mismatch"):
            factor_logpdf(np.zeros(3), np.zeros(3), u)


class TestConditionalIndependence:
    """Zero pattern of the factors matches partial covariances of the implied law."""

    def test_factor_zeros_match_partial_covariances(self):
        s, l = random_hv_factor(48, 7)
        ld = l.to_dense()
        cov = ld @ ld.T
        mask = s.to_dense().astype(bool)
        u = invert_transpose_lower(l).to_dense()
        for i in range(48):
            for j in range(i):
                # cov(w_i, w_j | w_{0:j-1})
                a = np.arange(j)
                if j:
                    k = cov[np.ix_(a, a)]
                    c = cov[i, j] - cov[i, a] @ np.linalg.solve(k, cov[a, j])
                else:
                    c = cov[i, j]
                assert (abs(c) < 1e-10) == (not mask[i, j])
                # cov(w_i, w_j | w_{0:j-1}, w_{j+1:i-1})
                b = np.setdiff1d(np.arange(i), [j])
                if b.size:
                    k = cov[np.ix_(b, b)]
                    c2 = cov[i, j] - cov[i, b] @ np.linalg.solve(k, cov[b, j])
                else:
                    c2 = cov[i, j]
                assert (abs(c2) < 1e-10) == (abs(u[j, i]) < 1e-12)
                assert (abs(u[j, i]) < 1e-12) == (not mask[i, j])

    def test_nnz_bounded_by_conditioning_size(self):
        h, s, sigma = hv_setup(400, 8)
        lam = pattern_restricted_gram(invert_transpose_lower(ichol(sigma, s)))
        assert lam.values.size == s.nnz <= 400 * (h.config.N + 1)
        assert s.row_lengths().max() <= h.config.N + 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_dense_reduction(n, seed):
    a = random_spd(n, np.random.default_rng(seed))
    l = ichol(DenseOracle(a), SparsityPattern.full(n)).to_dense()
    assert np.max(np.abs(l - scipy.linalg.cholesky(a, lower=True))) < 1e-10


def test_matrix_market_round_trip(tmp_path):
    s, l = random_hv_factor(50, 9)
    write_pattern(tmp_path / "p.mtx", s)
    assert read_pattern(tmp_path / "p.mtx") == s
    write_factor(tmp_path / "l.mtx", l)
    back = read_factor(tmp_path / "l.mtx")
    assert back.pattern == s and np.array_equal(back.values, l.values)
    u = invert_transpose_lower(l)
    write_factor(tmp_path / "u.mtx", u)
    back_u = read_factor(tmp_path / "u.mtx", upper=True)
    np.testing.assert_array_equal(back_u.to_dense(), u.to_dense())
    text = (tmp_path / "u.mtx").read_text()
    assert text.startswith("%%MatrixMarket matrix coordinate real general")
