# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: CSR matrix-vector product and tridiagonal solve.

Semantics must match coeffid._kernels_py exactly; the backend module picks
one of the two at import time.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def csr_matvec(cnp.int64_t[::1] indptr, cnp.int64_t[::1] indices,
               double[::1] data, double[::1] x, double[::1] out):
    """out[i] = sum_j A[i,j] x[j] for a CSR matrix; rows summed left to right."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t i, k
    cdef double acc
    for i in range(n):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        out[i] = acc


def tridiag_solve(double[::1] sub, double[::1] diag, double[::1] sup,
                  double[::1] b):
    """Thomas elimination for a tridiagonal system; returns the solution.

    sub[i] multiplies x[i-1] in row i (sub[0] unused); sup[i] multiplies
    x[i+1] in row i (sup[n-1] unused).
    """
    cdef Py_ssize_t n = diag.shape[0]
    cdef cnp.ndarray[double, ndim=1] cp = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] dp = np.empty(n)
    cdef double[::1] c = cp
    cdef double[::1] d = dp
    cdef Py_ssize_t i
    cdef double m
    c[0] = sup[0] / diag[0]
    d[0] = b[0] / diag[0]
    for i in range(1, n):
        m = diag[i] - sub[i] * c[i - 1]
        c[i] = sup[i] / m
        d[i] = (b[i] - sub[i] * d[i - 1]) / m
    for i in range(n - 2, -1, -1):
        d[i] = d[i] - c[i] * d[i + 1]
    return dp
