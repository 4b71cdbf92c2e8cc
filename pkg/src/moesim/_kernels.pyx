# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled routing kernels; same contracts as ``moesim._kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _topk_row(const double[:] row, Py_ssize_t k, cnp.int64_t[:] out,
                    unsigned char[:] taken) noexcept nogil:
    # k passes of an argmax scan; strict '>' keeps the lower index on ties
    cdef Py_ssize_t n = row.shape[0]
    cdef Py_ssize_t i, j, best
    cdef double bv
    for j in range(n):
        taken[j] = 0
    for i in range(k):
        best = -1
        bv = 0.0
        for j in range(n):
            if taken[j]:
                continue
            if best < 0 or row[j] > bv:
                best = j
                bv = row[j]
        taken[best] = 1
        out[i] = best


def topk_indices(values, k):
    cdef const double[:] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t kk = min(<Py_ssize_t>k, v.shape[0])
    if kk <= 0:
        return np.empty(0, dtype=np.int64)
    out = np.empty(kk, dtype=np.int64)
    taken = np.empty(v.shape[0], dtype=np.uint8)
    _topk_row(v, kk, out, taken)
    return out


def topk_rows(matrix, k):
    cdef const double[:, :] m = np.ascontiguousarray(matrix, dtype=np.float64)
    cdef Py_ssize_t rows = m.shape[0]
    cdef Py_ssize_t kk = min(<Py_ssize_t>k, m.shape[1])
    if kk <= 0:
        return np.empty((rows, 0), dtype=np.int64)
    out = np.empty((rows, kk), dtype=np.int64)
    cdef cnp.int64_t[:, :] o = out
    cdef unsigned char[:] taken = np.empty(m.shape[1], dtype=np.uint8)
    cdef Py_ssize_t r
    with nogil:
        for r in range(rows):
            _topk_row(m[r], kk, o[r], taken)
    return out


def route_counts(matrix, k, rows=None):
    cdef const double[:, :] m = np.ascontiguousarray(matrix, dtype=np.float64)
    cdef Py_ssize_t n_cols = m.shape[1]
    cdef Py_ssize_t kk = min(<Py_ssize_t>k, n_cols)
    counts = np.zeros(n_cols, dtype=np.int64)
    if kk <= 0:
        return counts
    cdef cnp.int64_t[:] c = counts
    cdef const cnp.int64_t[:] sel
    if rows is None:
        sel = np.arange(m.shape[0], dtype=np.int64)
    else:
        sel = np.ascontiguousarray(rows, dtype=np.int64)
    cdef cnp.int64_t[:] slot = np.empty(kk, dtype=np.int64)
    cdef unsigned char[:] taken = np.empty(n_cols, dtype=np.uint8)
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(sel.shape[0]):
            _topk_row(m[sel[i]], kk, slot, taken)
            for j in range(kk):
                c[slot[j]] += 1
    return counts


def topk_overlap(a, b, k):
    cdef const double[:, :] ma = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, :] mb = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t rows = ma.shape[0]
    cdef Py_ssize_t n_cols = ma.shape[1]
    cdef Py_ssize_t kk = min(<Py_ssize_t>k, n_cols)
    out = np.zeros(rows, dtype=np.int64)
    if kk <= 0:
        return out
    cdef cnp.int64_t[:] o = out
    cdef cnp.int64_t[:] sa = np.empty(kk, dtype=np.int64)
    cdef cnp.int64_t[:] sb = np.empty(kk, dtype=np.int64)
    cdef unsigned char[:] taken = np.empty(n_cols, dtype=np.uint8)
    cdef unsigned char[:] mark = np.empty(n_cols, dtype=np.uint8)
    cdef Py_ssize_t r, j, hits
    with nogil:
        for r in range(rows):
            _topk_row(ma[r], kk, sa, taken)
            _topk_row(mb[r], kk, sb, taken)
            for j in range(n_cols):
                mark[j] = 0
            for j in range(kk):
                mark[sa[j]] = 1
            hits = 0
            for j in range(kk):
                hits += mark[sb[j]]
            o[r] = hits
    return out
