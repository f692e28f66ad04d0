"""Pure-numpy fallbacks for the compiled kernels in _kernels.pyx."""

import numpy as np


def csr_matvec(indptr, indices, data, x, out):
    """out[i] = sum_j A[i,j] x[j]; every row must be nonempty (reduceat)."""
    np.add.reduceat(data * x[indices], indptr[:-1], out=out)


def tridiag_solve(sub, diag, sup, b):
    """Thomas elimination for a tridiagonal system; returns the solution."""
    n = diag.shape[0]
    c = np.empty(n)
    d = np.empty(n)
    c[0] = sup[0] / diag[0]
    d[0] = b[0] / diag[0]
    for i in range(1, n):
        m = diag[i] - sub[i] * c[i - 1]
        c[i] = sup[i] / m
        d[i] = (b[i] - sub[i] * d[i - 1]) / m
    for i in range(n - 2, -1, -1):
        d[i] -= c[i] * d[i + 1]
    return d
