# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled softmax-regression kernels; see ``_kernels_py`` for the contract."""

import numpy as np
from libc.stdint cimport int64_t


def softmax_grads(const double[:, ::1] X, const double[:, ::1] P,
                  const int64_t[::1] y, bint bias):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], c = P.shape[1]
    cdef Py_ssize_t D = d + 1 if bias else d
    out = np.empty((n, c * D), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, a, j, off
    cdef double r
    for i in range(n):
        for a in range(c):
            r = P[i, a]
            if y[i] == a:
                r -= 1.0
            off = a * D
            for j in range(d):
                o[i, off + j] = r * X[i, j]
            if bias:
                o[i, off + d] = r
    return out


def softmax_hvp(const double[:, ::1] X, const double[:, ::1] P,
                const double[::1] w, const double[:, ::1] V, bint bias):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], c = P.shape[1]
    cdef Py_ssize_t D = V.shape[1]
    out = np.zeros((c, D), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] a = np.empty(c, dtype=np.float64)
    cdef Py_ssize_t i, k, j
    cdef double s, m, r, wi
    for i in range(n):
        wi = w[i]
        if wi == 0.0:
            continue
        m = 0.0
        for k in range(c):
            s = V[k, d] if bias else 0.0
            for j in range(d):
                s += V[k, j] * X[i, j]
            a[k] = s
            m += P[i, k] * s
        for k in range(c):
            r = wi * P[i, k] * (a[k] - m)
            for j in range(d):
                o[k, j] += r * X[i, j]
            if bias:
                o[k, d] += r
    return out


def softmax_hessian(const double[:, ::1] X, const double[:, ::1] P,
                    const double[::1] w, bint bias):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], c = P.shape[1]
    cdef Py_ssize_t D = d + 1 if bias else d
    cdef Py_ssize_t PP = c * D
    out = np.zeros((PP, PP), dtype=np.float64)
    cdef double[:, ::1] H = out
    u_arr = np.empty(D, dtype=np.float64)
    cdef double[::1] u = u_arr
    cdef Py_ssize_t i, a, b, j, k, ra, rb
    cdef double sab, sj
    for i in range(n):
        if w[i] == 0.0:
            continue
        for j in range(d):
            u[j] = X[i, j]
        if bias:
            u[d] = 1.0
        for a in range(c):
            for b in range(a, c):
                sab = w[i] * P[i, a] * ((1.0 if a == b else 0.0) - P[i, b])
                if sab == 0.0:
                    continue
                ra = a * D
                rb = b * D
                for j in range(D):
                    sj = sab * u[j]
                    for k in range(D):
                        H[ra + j, rb + k] += sj * u[k]
    # mirror the strictly-upper class blocks
    for a in range(c):
        for b in range(a + 1, c):
            ra = a * D
            rb = b * D
            for j in range(D):
                for k in range(D):
                    H[rb + k, ra + j] = H[ra + j, rb + k]
    return out
