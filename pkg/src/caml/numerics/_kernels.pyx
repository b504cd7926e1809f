# cython: language_level=3
"""Compiled dense matmul kernels.

Every output entry is accumulated over the inner index in ascending order,
starting from 0.0, with one rounding for the product and one for the sum.
``_pykernels`` performs the same operations in the same order, so both
backends return bit-identical arrays.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    """Return ``a @ b``."""
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, p, j
    cdef double aip
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    for i in range(m):
        for p in range(kk):
            aip = a[i, p]
            for j in range(n):
                c[i, j] = c[i, j] + aip * b[p, j]
    return out


def matmul_tn(const double[:, ::1] a, const double[:, ::1] b):
    """Return ``a.T @ b`` without materialising the transpose."""
    cdef Py_ssize_t kk = a.shape[0], m = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, p, j
    cdef double api
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    for p in range(kk):
        for i in range(m):
            api = a[p, i]
            for j in range(n):
                c[i, j] = c[i, j] + api * b[p, j]
    return out


def matmul_nt(const double[:, ::1] a, const double[:, ::1] b):
    """Return ``a @ b.T`` without materialising the transpose."""
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[0]
    cdef Py_ssize_t i, p, j
    cdef double acc
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(kk):
                acc = acc + a[i, p] * b[j, p]
            c[i, j] = acc
    return out
