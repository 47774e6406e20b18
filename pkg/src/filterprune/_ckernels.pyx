# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: filter scoring and valid stride-1 convolution.

Every reduction runs in a fixed sequential order so results are
bit-reproducible and match the cumulative-sum formulation used by the
pure-Python fallback in :mod:`filterprune._pykernels`.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()


def l1_scores(const double[:, ::1] filters):
    cdef Py_ssize_t n = filters.shape[0], d = filters.shape[1]
    cdef Py_ssize_t j, i
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for j in range(n):
        acc = 0.0
        for i in range(d):
            acc += fabs(filters[j, i])
        o[j] = acc
    return out


def pairwise_distances(const double[:, ::1] filters):
    cdef Py_ssize_t n = filters.shape[0], d = filters.shape[1]
    cdef Py_ssize_t a, b, i
    cdef double acc, diff
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] dist = out
    for a in range(n):
        for b in range(a + 1, n):
            acc = 0.0
            for i in range(d):
                diff = filters[b, i] - filters[a, i]
                acc += diff * diff
            dist[a, b] = sqrt(acc)
            dist[b, a] = dist[a, b]
    return out


def fpgm_scores(const double[:, ::1] filters):
    cdef Py_ssize_t n = filters.shape[0]
    cdef Py_ssize_t j, k
    cdef double acc
    cdef double[:, ::1] dist = pairwise_distances(filters)
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for j in range(n):
        acc = 0.0
        for k in range(n):
            acc += dist[j, k]
        o[j] = acc
    return out


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] bias):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Ho = H - K + 1, Wo = W - K + 1
    cdef Py_ssize_t b, o, c, p, q, i, j
    cdef double wv
    cdef double *yrow
    cdef const double *xrow
    if w.shape[1] != C or w.shape[3] != K or bias.shape[0] != O or Ho < 1 or Wo < 1:
        raise ValueError("conv2d_forward: incompatible shapes")
    out = np.empty((B, O, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    with nogil:
        for b in range(B):
            for o in range(O):
                for i in range(Ho):
                    for j in range(Wo):
                        y[b, o, i, j] = bias[o]
                for c in range(C):
                    for p in range(K):
                        for q in range(K):
                            wv = w[o, c, p, q]
                            for i in range(Ho):
                                yrow = &y[b, o, i, 0]
                                xrow = &x[b, c, i + p, q]
                                for j in range(Wo):
                                    yrow[j] += wv * xrow[j]
    return out


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] dy, bint need_dx=True):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Ho = dy.shape[2], Wo = dy.shape[3]
    cdef Py_ssize_t b, o, c, p, q, i, j
    cdef double acc, wv
    cdef const double *grow
    cdef const double *xrow
    cdef double *dxrow
    if dy.shape[0] != B or dy.shape[1] != O or Ho != H - K + 1 or Wo != W - K + 1:
        raise ValueError("conv2d_backward: incompatible shapes")
    dw_arr = np.zeros((O, C, K, K), dtype=np.float64)
    db_arr = np.zeros(O, dtype=np.float64)
    dx_arr = np.zeros((B, C, H, W), dtype=np.float64) if need_dx else None
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, :, :, ::1] dx
    if need_dx:
        dx = dx_arr
    with nogil:
        for o in range(O):
            acc = 0.0
            for b in range(B):
                for i in range(Ho):
                    for j in range(Wo):
                        acc += dy[b, o, i, j]
            db[o] = acc
            for c in range(C):
                for p in range(K):
                    for q in range(K):
                        acc = 0.0
                        for b in range(B):
                            for i in range(Ho):
                                grow = &dy[b, o, i, 0]
                                xrow = &x[b, c, i + p, q]
                                for j in range(Wo):
                                    acc += grow[j] * xrow[j]
                        dw[o, c, p, q] = acc
        if need_dx:
            for b in range(B):
                for o in range(O):
                    for c in range(C):
                        for p in range(K):
                            for q in range(K):
                                wv = w[o, c, p, q]
                                for i in range(Ho):
                                    grow = &dy[b, o, i, 0]
                                    dxrow = &dx[b, c, i + p, q]
                                    for j in range(Wo):
                                        dxrow[j] += grow[j] * wv
    return dx_arr, dw_arr, db_arr
