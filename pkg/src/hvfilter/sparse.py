"""Fixed-pattern sparse lower-triangular factors and the kernels that produce them.

A :class:`SparsityPattern` is a lower-triangular boolean pattern stored in
CSR form with sorted rows and the diagonal last.  :class:`SparseLowerTri`
attaches values to a pattern; :class:`SparseUpperTri` is an upper-triangular
factor stored as the transpose of a lower-triangular layout, so that a factor
``L`` on ``S`` and ``U = L^{-T}`` on ``S^T`` share one pattern object.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import _kernels

LOG_2PI = np.log(2.0 * np.pi)


class NotPositiveDefiniteError(ValueError):
    """Raised when a pivot of a pattern-restricted factorization is not positive."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class PatternViolationError(RuntimeError):
    """Raised when a factorization would create fill outside its pattern."""


@dataclass(frozen=True, eq=False)
class SparsityPattern:
    """Lower-triangular sparsity pattern; row ``i`` is ``{i}`` plus its conditioning set."""

    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        n = indptr.shape[0] - 1
        if n < 1 or indptr[0] != 0 or indptr[-1] != indices.shape[0]:
            raise ValueError("malformed pattern pointers")
        counts = np.diff(indptr)
        if np.any(counts < 1):
            raise ValueError("every row needs its diagonal entry")
        rows = np.repeat(np.arange(n), counts)
        if np.any(indices[indptr[1:] - 1] != np.arange(n)):
            raise ValueError("diagonal must be the last entry of each row")
        if np.any(indices > rows):
            raise ValueError("pattern is not lower-triangular")
        same_row = rows[1:] == rows[:-1]
        if np.any(np.diff(indices)[same_row] <= 0):
            raise ValueError("row indices must be strictly increasing")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]]) -> "SparsityPattern":
        """Build from per-row column lists; the diagonal is added if missing."""
        cleaned = []
        for i, r in enumerate(rows):
            cols = sorted(set(int(c) for c in r) | {i})
            cleaned.append(cols)
        indptr = np.zeros(len(cleaned) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(c) for c in cleaned])
        indices = np.fromiter((c for r in cleaned for c in r), dtype=np.int64, count=indptr[-1])
        return cls(indptr, indices)

    @classmethod
    def full(cls, n: int) -> "SparsityPattern":
        return cls.from_rows([range(i + 1) for i in range(n)])

    @classmethod
    def diagonal(cls, n: int) -> "SparsityPattern":
        return cls(np.arange(n + 1), np.arange(n))

    @classmethod
    def from_dense(cls, mask) -> "SparsityPattern":
        mask = np.tril(np.asarray(mask, dtype=bool))
        return cls.from_rows([np.flatnonzero(row) for row in mask])

    @property
    def n(self) -> int:
        return self.indptr.shape[0] - 1

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.indptr)

    @cached_property
    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.row_lengths())

    @cached_property
    def diag_positions(self) -> np.ndarray:
        return self.indptr[1:] - 1

    @cached_property
    def is_full(self) -> bool:
        """Whether every lower-triangular entry is in the pattern."""
        return self.nnz == self.n * (self.n + 1) // 2

    @cached_property
    def _csc(self):
        # column k lists rows i >= k ascending (k itself first) and the CSR slot of (i, k)
        order = np.lexsort((self.row_ids, self.indices))
        colptr = np.zeros(self.n + 1, dtype=np.int64)
        colptr[1:] = np.cumsum(np.bincount(self.indices, minlength=self.n))
        return colptr, np.ascontiguousarray(self.row_ids[order]), np.ascontiguousarray(order)

    def to_scipy(self) -> sp.csr_matrix:
        data = np.ones(self.nnz, dtype=np.int8)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray().astype(bool)

    def positions(self, rows, cols) -> np.ndarray:
        """CSR slots of (rows, cols); -1 where the entry is outside the pattern."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        keys = self.row_ids * self.n + self.indices
        query = rows * self.n + cols
        pos = np.searchsorted(keys, query)
        pos = np.minimum(pos, self.nnz - 1)
        return np.where(keys[pos] == query, pos, -1)

    def __eq__(self, other):
        if not isinstance(other, SparsityPattern):
            return NotImplemented
        return (self is other) or (
            np.array_equal(self.indptr, other.indptr) and np.array_equal(self.indices, other.indices)
        )

    __hash__ = object.__hash__


@dataclass(frozen=True, eq=False)
class SparseLowerTri:
    """Values on a fixed lower-triangular pattern, aligned with ``pattern.indices``."""

    pattern: SparsityPattern
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.shape != (self.pattern.nnz,):
            raise ValueError("values do not match the pattern")
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.pattern.n

    def diagonal(self) -> np.ndarray:
        return self.values[self.pattern.diag_positions]

    def to_scipy(self) -> sp.csr_matrix:
        p = self.pattern
        return sp.csr_matrix((self.values, p.indices, p.indptr), shape=(p.n, p.n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def matvec(self, x) -> np.ndarray:
        p = self.pattern
        return _kernels.matvec_lower(p.indptr, p.indices, self.values, np.asarray(x, dtype=float))

    def rmatvec(self, x) -> np.ndarray:
        """``L.T @ x``."""
        p = self.pattern
        return _kernels.matvec_lower_transpose(p.indptr, p.indices, self.values, np.asarray(x, dtype=float))

    def solve(self, b) -> np.ndarray:
        """``L^{-1} b`` by forward substitution."""
        p = self.pattern
        return _kernels.solve_lower(p.indptr, p.indices, self.values, np.asarray(b, dtype=float))

    def solve_transpose(self, b) -> np.ndarray:
        """``L^{-T} b`` by back substitution."""
        p = self.pattern
        return _kernels.solve_lower_transpose(p.indptr, p.indices, self.values, np.asarray(b, dtype=float))

    def structural_nonzeros(self) -> np.ndarray:
        return self.values != 0.0


@dataclass(frozen=True, eq=False)
class SparseUpperTri:
    """Upper-triangular factor ``U`` stored through its transpose ``U.T`` (lower)."""

    lower: SparseLowerTri

    @property
    def pattern(self) -> SparsityPattern:
        return self.lower.pattern

    @property
    def values(self) -> np.ndarray:
        return self.lower.values

    @property
    def n(self) -> int:
        return self.lower.n

    def diagonal(self) -> np.ndarray:
        return self.lower.diagonal()

    def to_scipy(self) -> sp.csr_matrix:
        return self.lower.to_scipy().T.tocsr()

    def to_dense(self) -> np.ndarray:
        return self.lower.to_dense().T

    def matvec(self, x) -> np.ndarray:
        return self.lower.rmatvec(x)

    def rmatvec(self, x) -> np.ndarray:
        """``U.T @ x``."""
        return self.lower.matvec(x)

    def solve(self, b) -> np.ndarray:
        """``U^{-1} b``."""
        return self.lower.solve_transpose(b)

    def solve_transpose(self, b) -> np.ndarray:
        """``U^{-T} b``."""
        return self.lower.solve(b)


@dataclass(frozen=True, eq=False)
class SymmetricPatternMatrix:
    """Symmetric matrix whose lower triangle lives on ``pattern``."""

    pattern: SparsityPattern
    values: np.ndarray

    def to_scipy(self) -> sp.csr_matrix:
        low = SparseLowerTri(self.pattern, self.values).to_scipy()
        diag = sp.diags(low.diagonal())
        return (low + low.T - diag).tocsr()

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()


class EntryOracle:
    """On-demand view of a symmetric positive-definite matrix.

    Subclasses implement :meth:`entries`, vectorized over index arrays.
    """

    n: int

    def entries(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, i, j):
        out = self.entries(np.atleast_1d(np.asarray(i, dtype=np.int64)),
                           np.atleast_1d(np.asarray(j, dtype=np.int64)))
        return out[0] if np.ndim(i) == 0 and np.ndim(j) == 0 else out

    def on_pattern(self, pattern: SparsityPattern) -> np.ndarray:
        """Entries at every slot of ``pattern`` (the only entries ever read)."""
        return np.asarray(self.entries(pattern.row_ids, pattern.indices), dtype=float)

    def to_dense(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.n), np.arange(self.n), indexing="ij")
        return self.entries(i.ravel(), j.ravel()).reshape(self.n, self.n)

    def permuted(self, order) -> "EntryOracle":
        """Oracle for the matrix with rows and columns reordered by ``order``."""
        return PermutedOracle(self, order)


class DenseOracle(EntryOracle):
    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        self.n = self.matrix.shape[0]

    def entries(self, rows, cols):
        return self.matrix[rows, cols]

    def to_dense(self):
        return self.matrix.copy()

    def permuted(self, order):
        order = np.asarray(order)
        return DenseOracle(self.matrix[np.ix_(order, order)])


class PermutedOracle(EntryOracle):
    def __init__(self, base: EntryOracle, order):
        self.base = base
        self.order = np.asarray(order, dtype=np.int64)
        self.n = base.n

    def entries(self, rows, cols):
        return self.base.entries(self.order[rows], self.order[cols])


class PatternOracle(EntryOracle):
    """Symmetric matrix known only on a pattern (and its transpose)."""

    def __init__(self, pattern: SparsityPattern, values):
        self.pattern = pattern
        self.values = np.asarray(values, dtype=float)
        self.n = pattern.n

    def entries(self, rows, cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        lo = np.minimum(rows, cols)
        hi = np.maximum(rows, cols)
        pos = self.pattern.positions(hi, lo)
        if np.any(pos < 0):
            raise KeyError("entry requested outside the known pattern")
        return self.values[pos]

    def on_pattern(self, pattern):
        if pattern == self.pattern:
            return self.values
        return super().on_pattern(pattern)


class SumOracle(EntryOracle):
    def __init__(self, *parts: EntryOracle):
        self.parts = parts
        self.n = parts[0].n

    def entries(self, rows, cols):
        return sum(p.entries(rows, cols) for p in self.parts)


# Full patterns (the dense special case) are routed to LAPACK.  The values of
# a full pattern are the row-major lower triangle, i.e. np.tril_indices order.


def _to_dense_lower(p: SparsityPattern, vals) -> np.ndarray:
    out = np.zeros((p.n, p.n))
    out[p.row_ids, p.indices] = vals
    return out


def _from_dense_lower(p: SparsityPattern, dense) -> np.ndarray:
    return np.ascontiguousarray(dense[p.row_ids, p.indices])


def _dense_cholesky(a_lower):
    """Lower Cholesky factor from the lower triangle, or None if not positive definite."""
    c, info = scipy.linalg.lapack.dpotrf(a_lower, lower=1, clean=1, overwrite_a=1)
    return c if info == 0 else None


def ichol(a: EntryOracle, s: SparsityPattern, shift: float = 0.0) -> SparseLowerTri:
    """Incomplete Cholesky factor of ``a`` restricted to the pattern ``s``.

    Only the entries of ``a`` on ``s`` are evaluated.  ``shift`` inflates the
    diagonal and defaults to zero.

    Raises
    ------
    NotPositiveDefiniteError
        If a diagonal pivot is not positive.
    """
    if shift < 0:
        raise ValueError("diagonal shift must be nonnegative")
    a_vals = np.ascontiguousarray(a.on_pattern(s), dtype=np.float64)
    if not np.all(np.isfinite(a_vals)):
        raise ValueError("matrix entries on the pattern are not finite")
    if s.is_full:
        dense = _to_dense_lower(s, a_vals)
        dense[np.diag_indices(s.n)] += shift
        c = _dense_cholesky(dense)
        if c is not None:
            return SparseLowerTri(s, _from_dense_lower(s, c))
    vals, status = _kernels.ichol(s.indptr, s.indices, a_vals, float(shift))
    if status != _kernels.OK:
        raise NotPositiveDefiniteError(f"not positive definite on pattern (row {status})", row=int(status))
    return SparseLowerTri(s, vals)


def _lower_inverse(l: SparseLowerTri) -> np.ndarray:
    p = l.pattern
    if p.is_full and np.all(l.diagonal() != 0):
        inv, info = scipy.linalg.lapack.dtrtri(_to_dense_lower(p, l.values), lower=1)
        if info == 0:
            return _from_dense_lower(p, inv)
    colptr, colrows, colpos = p._csc
    vals, status = _kernels.lower_inverse(p.indptr, p.indices, l.values, colptr, colrows, colpos)
    if status != _kernels.OK:
        raise ZeroDivisionError(f"zero diagonal in triangular factor (row {status})")
    return vals


def invert_transpose_lower(l: SparseLowerTri) -> SparseUpperTri:
    """``U = L^{-T}`` computed on the transpose of ``L``'s pattern."""
    return SparseUpperTri(SparseLowerTri(l.pattern, _lower_inverse(l)))


def invert_transpose_upper(u: SparseUpperTri) -> SparseLowerTri:
    """``L = U^{-T}`` computed on ``U``'s (transposed) pattern."""
    return SparseLowerTri(u.pattern, _lower_inverse(u.lower))


def pattern_restricted_gram(u: SparseUpperTri, extra_diag=None) -> SymmetricPatternMatrix:
    """``U U^T + diag(extra_diag)`` on the pattern shared with ``u``."""
    p = u.pattern
    if extra_diag is None:
        extra = np.zeros(p.n)
    else:
        extra = np.ascontiguousarray(extra_diag, dtype=np.float64)
        if extra.shape != (p.n,):
            raise ValueError("extra_diag must have one entry per variable")
        if np.any(extra < 0):
            raise ValueError("extra_diag must be nonnegative")
    if p.is_full:
        w = _to_dense_lower(p, u.values)
        g = w.T @ w
        g[np.diag_indices(p.n)] += extra
        return SymmetricPatternMatrix(p, _from_dense_lower(p, g))
    vals = _kernels.gram_transpose(p.indptr, p.indices, u.values, extra)
    return SymmetricPatternMatrix(p, vals)


def reverse_cholesky(lam: SymmetricPatternMatrix) -> SparseUpperTri:
    """Upper factor ``U`` with ``U U^T = lam``, i.e. the Cholesky factor under reversed ordering.

    Raises
    ------
    NotPositiveDefiniteError
        If ``lam`` is not positive definite.
    PatternViolationError
        If the factorization would fill entries outside the pattern.
    """
    p = lam.pattern
    if p.is_full:
        # U = P chol(P lam P) P with P the order-reversing permutation
        flipped = _to_dense_lower(p, lam.values)[::-1, ::-1].T.copy()
        c = _dense_cholesky(flipped)
        if c is not None:
            return SparseUpperTri(SparseLowerTri(p, _from_dense_lower(p, c[::-1, ::-1].T)))
    vals, status, row = _kernels.reverse_cholesky(p.indptr, p.indices, np.ascontiguousarray(lam.values))
    if status == -2:
        raise PatternViolationError(f"pattern violation while eliminating row {row}")
    if status != _kernels.OK:
        raise NotPositiveDefiniteError(f"precision not positive definite (row {status})", row=int(status))
    return SparseUpperTri(SparseLowerTri(p, vals))


def pattern_restricted_forecast_cov(l_rows, q: EntryOracle | None, s: SparsityPattern) -> PatternOracle:
    """Entries of ``M M^T + Q`` on ``s``, where ``M`` holds the rows of the forecast factor.

    ``l_rows`` may be a scipy sparse matrix or a dense array.
    """
    if sp.issparse(l_rows):
        m = sp.csr_matrix(l_rows)
        m.sort_indices()
        vals = _kernels.pattern_row_dots(
            m.indptr.astype(np.int64), m.indices.astype(np.int64), m.data.astype(np.float64),
            s.indptr, s.indices,
        )
    else:
        m = np.asarray(l_rows, dtype=float)
        rows, cols = s.row_ids, s.indices
        if 4 * s.nnz > s.n * s.n:
            # nearly full pattern: one BLAS product beats gathered dot products
            vals = (m @ m.T)[rows, cols]
        else:
            vals = np.empty(s.nnz)
            step = max(1, (1 << 22) // max(m.shape[1], 1))
            for k in range(0, s.nnz, step):
                sl = slice(k, k + step)
                vals[sl] = np.einsum("ij,ij->i", m[rows[sl]], m[cols[sl]])
    if q is not None:
        vals = vals + q.on_pattern(s)
    return PatternOracle(s, vals)


def factor_logpdf(x, mean, u: SparseUpperTri) -> float:
    """Log-density of ``N(mean, (U U^T)^{-1})`` at ``x``."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if x.shape != (u.n,) or mean.shape != (u.n,):
        raise ValueError(f"dimension mismatch: expected length {u.n}")
    z = u.rmatvec(x - mean)
    return float(-0.5 * u.n * LOG_2PI + np.sum(np.log(u.diagonal())) - 0.5 * z @ z)
