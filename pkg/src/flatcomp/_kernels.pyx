# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Semantics are defined by ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdint cimport int8_t, int32_t, int64_t, uint8_t

cnp.import_array()

BACKEND = "compiled"


def adam_update(double[::1] w, double[::1] g, double[::1] m, double[::1] v,
                keep, double lr, double beta1, double beta2, double eps,
                double bc1, double bc2, double weight_decay):
    cdef Py_ssize_t i, n = w.shape[0]
    cdef double gi
    cdef double c1 = 1.0 - beta1
    cdef double c2 = 1.0 - beta2
    cdef uint8_t[::1] k
    if g.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("adam_update: buffer lengths differ")
    if keep is None:
        with nogil:
            for i in range(n):
                gi = g[i]
                if weight_decay != 0.0:
                    gi = gi + weight_decay * w[i]
                m[i] = beta1 * m[i] + c1 * gi
                v[i] = beta2 * v[i] + c2 * (gi * gi)
                w[i] = w[i] - lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)
    else:
        k = keep
        if k.shape[0] != n:
            raise ValueError("adam_update: keep mask length differs")
        with nogil:
            for i in range(n):
                if k[i] == 0:
                    continue
                gi = g[i]
                if weight_decay != 0.0:
                    gi = gi + weight_decay * w[i]
                m[i] = beta1 * m[i] + c1 * gi
                v[i] = beta2 * v[i] + c2 * (gi * gi)
                w[i] = w[i] - lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)


def qgemm(const int8_t[:, ::1] a, int a_zero_point, const int8_t[:, ::1] b):
    cdef Py_ssize_t M = a.shape[0], K = a.shape[1], N = b.shape[1]
    cdef Py_ssize_t i, j, kk
    cdef int32_t av
    if b.shape[0] != K:
        raise ValueError(f"qgemm: inner dimensions differ ({K} vs {b.shape[0]})")
    if K * 255 * 128 >= 2147483647:
        raise OverflowError(f"qgemm: K={K} can saturate a 32-bit accumulator")
    out = np.zeros((M, N), dtype=np.int32)
    cdef int32_t[:, ::1] o = out
    with nogil:
        for i in range(M):
            for kk in range(K):
                av = <int32_t>a[i, kk] - a_zero_point
                if av == 0:
                    continue
                for j in range(N):
                    o[i, j] += av * <int32_t>b[kk, j]
    return out
