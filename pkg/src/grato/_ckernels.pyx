# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled edge kernels. Same contracts as ``grato._kernels_py``.

Every reduction runs sequentially in edge order so results are bitwise
reproducible for a given input.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

ctypedef cnp.int64_t idx_t


def spmm(idx_t[::1] rows, idx_t[::1] cols, double[::1] weights,
         double[:, ::1] x, Py_ssize_t n_out):
    cdef Py_ssize_t n_edges = rows.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    out_arr = np.zeros((n_out, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t e, k
    cdef idx_t r, c
    cdef double w
    with nogil:
        for e in range(n_edges):
            r = rows[e]
            c = cols[e]
            w = weights[e]
            if w == 0.0:
                continue
            for k in range(d):
                out[r, k] += w * x[c, k]
    return out_arr


def segment_sum(double[::1] values, idx_t[::1] segments, Py_ssize_t n_segments):
    out_arr = np.zeros(n_segments, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t e
    with nogil:
        for e in range(segments.shape[0]):
            out[segments[e]] += values[e]
    return out_arr


def segment_softmax(double[::1] scores, idx_t[::1] segments, Py_ssize_t n_segments):
    cdef Py_ssize_t n = scores.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.float64)
    seg_max_arr = np.full(n_segments, -INFINITY)
    denom_arr = np.zeros(n_segments, dtype=np.float64)
    shifted_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] seg_max = seg_max_arr
    cdef double[::1] denom = denom_arr
    cdef double[::1] shifted = shifted_arr
    cdef Py_ssize_t e
    cdef idx_t s
    with nogil:
        for e in range(n):
            s = segments[e]
            if scores[e] > seg_max[s]:
                seg_max[s] = scores[e]
        for e in range(n):
            shifted[e] = scores[e] - seg_max[segments[e]]
    # numpy's vectorised exp beats a scalar libm loop
    out_arr = np.exp(shifted_arr)
    cdef double[::1] out = out_arr
    with nogil:
        for e in range(n):
            denom[segments[e]] += out[e]
        for e in range(n):
            out[e] /= denom[segments[e]]
    return out_arr


def edge_dot(idx_t[::1] rows, idx_t[::1] cols, double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n_edges = rows.shape[0]
    cdef Py_ssize_t d = a.shape[1]
    out_arr = np.zeros(n_edges, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t e, k
    cdef double acc
    with nogil:
        for e in range(n_edges):
            acc = 0.0
            for k in range(d):
                acc += a[rows[e], k] * b[cols[e], k]
            out[e] = acc
    return out_arr
