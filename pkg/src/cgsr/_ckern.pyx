# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment/scatter kernels. Contracts documented in cgsr.kernels."""

from libc.math cimport INFINITY

import numpy as np

cimport numpy as cnp

cnp.import_array()


def seg_sum(double[::1] x, long[::1] ids, Py_ssize_t n):
    cdef cnp.ndarray[double, ndim=1] out = np.zeros(n)
    cdef double[::1] o = out
    cdef Py_ssize_t e
    for e in range(x.shape[0]):
        o[ids[e]] += x[e]
    return out


def seg_max(double[::1] x, long[::1] ids, Py_ssize_t n):
    cdef cnp.ndarray[double, ndim=1] out = np.full(n, -INFINITY)
    cdef double[::1] o = out
    cdef Py_ssize_t e
    for e in range(x.shape[0]):
        if x[e] > o[ids[e]]:
            o[ids[e]] = x[e]
    return out


def seg_softmax(double[::1] scores, long[::1] ids, Py_ssize_t n):
    cdef Py_ssize_t m = scores.shape[0]
    cdef cnp.ndarray[double, ndim=1] shifted = np.empty(m)
    cdef double[::1] sh = shifted
    cdef cnp.ndarray[double, ndim=1] mx_arr = seg_max(scores, ids, n)
    cdef double[::1] mx = mx_arr
    cdef cnp.ndarray[double, ndim=1] denom_arr = np.zeros(n)
    cdef double[::1] denom = denom_arr
    cdef Py_ssize_t e
    for e in range(m):
        sh[e] = scores[e] - mx[ids[e]]
    # numpy's exp keeps both backends bit-identical
    cdef cnp.ndarray[double, ndim=1] out = np.exp(shifted)
    cdef double[::1] o = out
    for e in range(m):
        denom[ids[e]] += o[e]
    for e in range(m):
        o[e] = o[e] / denom[ids[e]]
    return out


def seg_softmax_backward(double[::1] alpha, double[::1] grad, long[::1] ids,
                         Py_ssize_t n):
    cdef Py_ssize_t m = alpha.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(m)
    cdef double[::1] o = out
    cdef cnp.ndarray[double, ndim=1] dots_arr = np.zeros(n)
    cdef double[::1] dots = dots_arr
    cdef Py_ssize_t e
    for e in range(m):
        dots[ids[e]] += alpha[e] * grad[e]
    for e in range(m):
        o[e] = alpha[e] * (grad[e] - dots[ids[e]])
    return out


def seg_weighted_rowsum(double[:, ::1] values, double[::1] w, long[::1] ids,
                        Py_ssize_t n):
    cdef Py_ssize_t m = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((n, d))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t e, c
    cdef long s
    cdef double we
    for e in range(m):
        s = ids[e]
        we = w[e]
        for c in range(d):
            o[s, c] += values[e, c] * we
    return out


def seg_weighted_rowsum_backward(double[:, ::1] values, double[::1] w,
                                 long[::1] ids, double[:, ::1] gout):
    cdef Py_ssize_t m = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    cdef cnp.ndarray[double, ndim=2] gvalues = np.empty((m, d))
    cdef cnp.ndarray[double, ndim=1] gw = np.zeros(m)
    cdef double[:, ::1] gv = gvalues
    cdef double[::1] gwv = gw
    cdef Py_ssize_t e, c
    cdef long s
    cdef double we, acc
    for e in range(m):
        s = ids[e]
        we = w[e]
        acc = 0.0
        for c in range(d):
            gv[e, c] = gout[s, c] * we
            acc += gout[s, c] * values[e, c]
        gwv[e] = acc
    return gvalues, gw


def scatter_rows(double[:, ::1] out, long[::1] idx, double[:, ::1] rows):
    cdef Py_ssize_t m = rows.shape[0]
    cdef Py_ssize_t d = rows.shape[1]
    cdef Py_ssize_t e, c
    cdef long t
    for e in range(m):
        t = idx[e]
        for c in range(d):
            out[t, c] += rows[e, c]
