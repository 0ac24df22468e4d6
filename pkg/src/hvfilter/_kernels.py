"""Compiled loops over fixed lower-triangular sparsity patterns.

All kernels take a pattern in CSR form (``indptr``, ``indices``) whose rows
are sorted ascending with the diagonal stored last.  Failures are reported
through integer status codes so callers can raise informative exceptions.
"""
import numpy as np
from numba import njit

OK = -1


@njit(cache=True, nogil=True)
def ichol(indptr, indices, a_vals, shift):
    n = indptr.shape[0] - 1
    out = np.zeros(a_vals.shape[0])
    w = np.zeros(n)
    for i in range(n):
        start = indptr[i]
        diag = indptr[i + 1] - 1
        for p in range(start, diag):
            j = indices[p]
            acc = 0.0
            for q in range(indptr[j], indptr[j + 1] - 1):
                acc += w[indices[q]] * out[q]
            v = (a_vals[p] - acc) / out[indptr[j + 1] - 1]
            out[p] = v
            w[j] = v
        acc = 0.0
        for p in range(start, diag):
            acc += out[p] * out[p]
        d = a_vals[diag] + shift - acc
        for p in range(start, diag):
            w[indices[p]] = 0.0
        if not d > 0.0:
            return out, i
        out[diag] = np.sqrt(d)
    return out, OK


@njit(cache=True, nogil=True)
def lower_inverse(indptr, indices, vals, colptr, colrows, colpos):
    """Inverse of a lower-triangular matrix, computed only on its own pattern."""
    n = indptr.shape[0] - 1
    out = np.zeros(vals.shape[0])
    w = np.zeros(n)
    for k in range(n):
        dk = vals[indptr[k + 1] - 1]
        if dk == 0.0:
            return out, k
        w[k] = 1.0 / dk
        out[colpos[colptr[k]]] = w[k]
        for c in range(colptr[k] + 1, colptr[k + 1]):
            i = colrows[c]
            acc = 0.0
            for q in range(indptr[i], indptr[i + 1] - 1):
                j = indices[q]
                if j >= k:
                    acc += vals[q] * w[j]
            v = -acc / vals[indptr[i + 1] - 1]
            w[i] = v
            out[colpos[c]] = v
        for c in range(colptr[k], colptr[k + 1]):
            w[colrows[c]] = 0.0
    return out, OK


@njit(cache=True, nogil=True)
def gram_transpose(indptr, indices, vals, extra_diag):
    """Lower part of ``W.T @ W + diag(extra_diag)`` restricted to the pattern of W."""
    n = indptr.shape[0] - 1
    out = np.zeros(vals.shape[0])
    for k in range(n):
        s = indptr[k]
        e = indptr[k + 1]
        for pa in range(s, e):
            a = indices[pa]
            wa = vals[pa]
            if wa == 0.0:
                continue
            qa = indptr[a]
            qend = indptr[a + 1]
            for pb in range(s, pa + 1):
                b = indices[pb]
                while qa < qend and indices[qa] < b:
                    qa += 1
                if qa < qend and indices[qa] == b:
                    out[qa] += wa * vals[pb]
    for i in range(n):
        out[indptr[i + 1] - 1] += extra_diag[i]
    return out


@njit(cache=True, nogil=True)
def reverse_cholesky(indptr, indices, lam):
    """Factor ``lam = V.T @ V`` with V lower-triangular on the same pattern.

    Returns the values of V, a status and, on a pattern violation, the
    offending row.  Status codes: -1 success, ``i >= 0`` failed pivot at row
    ``i``, -2 fill outside the pattern.
    """
    n = indptr.shape[0] - 1
    a = lam.copy()
    out = np.zeros(lam.shape[0])
    for i in range(n - 1, -1, -1):
        s = indptr[i]
        diag = indptr[i + 1] - 1
        d = a[diag]
        if not d > 0.0:
            return out, i, i
        vii = np.sqrt(d)
        out[diag] = vii
        for p in range(s, diag):
            out[p] = a[p] / vii
        for pa in range(s, diag):
            r = indices[pa]
            va = out[pa]
            qa = indptr[r]
            qend = indptr[r + 1]
            for pb in range(s, pa + 1):
                b = indices[pb]
                while qa < qend and indices[qa] < b:
                    qa += 1
                if qa < qend and indices[qa] == b:
                    a[qa] -= va * out[pb]
                elif va * out[pb] != 0.0:
                    return out, -2, i
    return out, OK, OK


@njit(cache=True, nogil=True)
def solve_lower(indptr, indices, vals, b):
    n = indptr.shape[0] - 1
    x = b.copy()
    for i in range(n):
        acc = x[i]
        for p in range(indptr[i], indptr[i + 1] - 1):
            acc -= vals[p] * x[indices[p]]
        x[i] = acc / vals[indptr[i + 1] - 1]
    return x


@njit(cache=True, nogil=True)
def solve_lower_transpose(indptr, indices, vals, b):
    n = indptr.shape[0] - 1
    x = b.copy()
    for i in range(n - 1, -1, -1):
        xi = x[i] / vals[indptr[i + 1] - 1]
        x[i] = xi
        for p in range(indptr[i], indptr[i + 1] - 1):
            x[indices[p]] -= vals[p] * xi
    return x


@njit(cache=True, nogil=True)
def matvec_lower(indptr, indices, vals, x):
    n = indptr.shape[0] - 1
    y = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            acc += vals[p] * x[indices[p]]
        y[i] = acc
    return y


@njit(cache=True, nogil=True)
def matvec_lower_transpose(indptr, indices, vals, x):
    n = indptr.shape[0] - 1
    y = np.zeros(n)
    for i in range(n):
        xi = x[i]
        for p in range(indptr[i], indptr[i + 1]):
            y[indices[p]] += vals[p] * xi
    return y


@njit(cache=True, nogil=True)
def pattern_row_dots(m_indptr, m_indices, m_data, indptr, indices):
    """``(M @ M.T)[i, j]`` for every (i, j) in the pattern, M given in CSR."""
    n = indptr.shape[0] - 1
    ncols = 0
    if m_indices.shape[0] > 0:
        ncols = m_indices.max() + 1
    w = np.zeros(max(ncols, 1))
    out = np.zeros(indices.shape[0])
    for i in range(n):
        for q in range(m_indptr[i], m_indptr[i + 1]):
            w[m_indices[q]] = m_data[q]
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            acc = 0.0
            for q in range(m_indptr[j], m_indptr[j + 1]):
                acc += m_data[q] * w[m_indices[q]]
            out[p] = acc
        for q in range(m_indptr[i], m_indptr[i + 1]):
            w[m_indices[q]] = 0.0
    return out
