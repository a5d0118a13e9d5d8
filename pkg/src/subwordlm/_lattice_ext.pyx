# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled lattice kernels; same contracts as ``_lattice_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, exp, log1p

cnp.import_array()

cdef double NEG_INF = -INFINITY


cdef inline double _logaddexp(double a, double b) noexcept nogil:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


cdef inline int _max_len(const int[:] lengths) noexcept nogil:
    cdef Py_ssize_t u
    cdef int m = 0
    for u in range(lengths.shape[0]):
        if lengths[u] > m:
            m = lengths[u]
    return m


def expected_counts(const int[:] starts, const int[:] ends, const int[:] pieces,
                    const long long[:] ptr, const int[:] lengths,
                    const double[:] weights, const double[:] logp,
                    double[:] counts):
    cdef Py_ssize_t n_units = lengths.shape[0]
    cdef Py_ssize_t n_pieces = logp.shape[0]
    cdef int m = _max_len(lengths)
    cdef double[:] alpha = np.empty(m + 1, dtype=np.float64)
    cdef double[:] beta = np.empty(m + 1, dtype=np.float64)
    cdef double[:] acc = np.zeros(n_pieces, dtype=np.float64)
    cdef Py_ssize_t u, e, k, lo, hi
    cdef int n
    cdef double s, a, b, z, w
    cdef double total = 0.0
    with nogil:
        for u in range(n_units):
            n = lengths[u]
            lo = ptr[u]
            hi = ptr[u + 1]
            for k in range(n + 1):
                alpha[k] = NEG_INF
                beta[k] = NEG_INF
            alpha[0] = 0.0
            beta[n] = 0.0
            for e in range(lo, hi):
                s = logp[pieces[e]]
                if s == NEG_INF or alpha[starts[e]] == NEG_INF:
                    continue
                alpha[ends[e]] = _logaddexp(alpha[ends[e]], alpha[starts[e]] + s)
            z = alpha[n]
            if z == NEG_INF:
                total = NEG_INF
                break
            e = hi - 1
            while e >= lo:
                s = logp[pieces[e]]
                if s != NEG_INF and beta[ends[e]] != NEG_INF:
                    beta[starts[e]] = _logaddexp(beta[starts[e]], s + beta[ends[e]])
                e -= 1
            w = weights[u]
            for e in range(lo, hi):
                s = logp[pieces[e]]
                if s == NEG_INF:
                    continue
                a = alpha[starts[e]]
                b = beta[ends[e]]
                if a == NEG_INF or b == NEG_INF:
                    continue
                acc[pieces[e]] += w * exp(a + s + b - z)
            total += w * z
    if total == NEG_INF:
        return NEG_INF
    for k in range(n_pieces):
        counts[k] += acc[k]
    return total


cdef double _best_path(Py_ssize_t lo, Py_ssize_t hi, int n, const int[:] starts,
                       const int[:] ends, const int[:] pieces, const double[:] logp,
                       int disabled, double[:] best, long long[:] back) noexcept nogil:
    cdef Py_ssize_t e, k
    cdef int p
    cdef double s, a, cand
    for k in range(n + 1):
        best[k] = NEG_INF
        back[k] = -1
    best[0] = 0.0
    for e in range(lo, hi):
        p = pieces[e]
        s = logp[p]
        if p == disabled or s == NEG_INF:
            continue
        a = best[starts[e]]
        if a == NEG_INF:
            continue
        cand = a + s
        if cand > best[ends[e]]:
            best[ends[e]] = cand
            back[ends[e]] = e
    return best[n]


def viterbi_counts(const int[:] starts, const int[:] ends, const int[:] pieces,
                   const long long[:] ptr, const int[:] lengths,
                   const double[:] weights, const double[:] logp,
                   double[:] counts):
    cdef Py_ssize_t n_units = lengths.shape[0]
    cdef Py_ssize_t n_pieces = logp.shape[0]
    cdef int m = _max_len(lengths)
    cdef double[:] best = np.empty(m + 1, dtype=np.float64)
    cdef long long[:] back = np.empty(m + 1, dtype=np.int64)
    cdef double[:] acc = np.zeros(n_pieces, dtype=np.float64)
    cdef Py_ssize_t u, e, k
    cdef int n, pos
    cdef double score, w
    cdef double total = 0.0
    with nogil:
        for u in range(n_units):
            n = lengths[u]
            score = _best_path(ptr[u], ptr[u + 1], n, starts, ends, pieces, logp, -1, best, back)
            if score == NEG_INF:
                total = NEG_INF
                break
            w = weights[u]
            total += w * score
            pos = n
            while pos > 0:
                e = back[pos]
                acc[pieces[e]] += w
                pos = starts[e]
    if total == NEG_INF:
        return NEG_INF
    for k in range(n_pieces):
        counts[k] += acc[k]
    return total


def viterbi_paths(const int[:] starts, const int[:] ends, const int[:] pieces,
                  const long long[:] ptr, const int[:] lengths,
                  const double[:] logp, const int[:] disabled):
    cdef Py_ssize_t n_units = lengths.shape[0]
    cdef int m = _max_len(lengths)
    cdef double[:] best = np.empty(m + 1, dtype=np.float64)
    cdef long long[:] back = np.empty(m + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] out_arr = np.empty(int(np.asarray(lengths).sum()), dtype=np.int32)
    cdef int[:] out = out_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ptr_arr = np.zeros(n_units + 1, dtype=np.int64)
    cdef long long[:] out_ptr = ptr_arr
    cdef cnp.ndarray[cnp.float64_t, ndim=1] score_arr = np.empty(n_units, dtype=np.float64)
    cdef double[:] scores = score_arr
    cdef Py_ssize_t u, e, k, cursor = 0, plen
    cdef int n, pos
    cdef double score
    with nogil:
        for u in range(n_units):
            n = lengths[u]
            score = _best_path(ptr[u], ptr[u + 1], n, starts, ends, pieces, logp,
                               disabled[u], best, back)
            scores[u] = score
            if score != NEG_INF:
                # walk back to count, then fill in forward order
                plen = 0
                pos = n
                while pos > 0:
                    plen += 1
                    pos = starts[back[pos]]
                pos = n
                k = cursor + plen - 1
                while pos > 0:
                    e = back[pos]
                    out[k] = pieces[e]
                    k -= 1
                    pos = starts[e]
                cursor += plen
            out_ptr[u + 1] = cursor
    return out_arr[:cursor].copy(), ptr_arr, score_arr
