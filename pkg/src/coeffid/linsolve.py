"""Symmetric sparse matrices and SPD solves (Jacobi-PCG, tridiagonal path).

All discrete systems produced by the FEM layer are symmetric positive
definite once Dirichlet rows are eliminated, so a single solver covers the
whole package. The solver is deterministic: identical inputs produce
bitwise-identical iterates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import csr_matvec, tridiag_solve


class SolverFailure(RuntimeError):
    """Raised when an inner linear solve does not reach its tolerance."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    final_relative_residual: float
    converged: bool


class SparseSymMatrix:
    """Symmetric sparse matrix in compressed-row form.

    Both triangles are stored; the diagonal is present on every row and no
    duplicate entries exist. Instances are immutable after construction.
    """

    __slots__ = ("n", "indptr", "indices", "data", "_diag", "_tri")

    def __init__(self, n, indptr, indices, data):
        self.n = int(n)
        self.indptr = indptr
        self.indices = indices
        self.data = data
        self._diag = None
        self._tri = None

    def matvec(self, x, out=None):
        if x.shape[0] != self.n:
            raise ValueError(f"dimension mismatch: matrix {self.n}, vector {x.shape[0]}")
        if out is None:
            out = np.empty(self.n)
        csr_matvec(self.indptr, self.indices, np.ascontiguousarray(self.data),
                   np.ascontiguousarray(x), out)
        return out

    def diagonal(self):
        if self._diag is None:
            rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
            on_diag = self.indices == rows
            d = np.zeros(self.n)
            d[rows[on_diag]] = self.data[on_diag]
            self._diag = d
        return self._diag

    def tridiagonal_bands(self):
        """(sub, diag, sup) if the pattern is tridiagonal, else None."""
        if self._tri is None:
            self._tri = _extract_tridiagonal(self)
        return self._tri if self._tri is not False else None

    def scaled(self, c):
        return SparseSymMatrix(self.n, self.indptr, self.indices, c * self.data)

    def __add__(self, other):
        if not (np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)):
            raise ValueError("sparsity patterns differ")
        return SparseSymMatrix(self.n, self.indptr, self.indices, self.data + other.data)

    def toarray(self):
        a = np.zeros((self.n, self.n))
        for i in range(self.n):
            row = slice(self.indptr[i], self.indptr[i + 1])
            a[i, self.indices[row]] = self.data[row]
        return a


def _extract_tridiagonal(a):
    n = a.n
    rows = np.repeat(np.arange(n), np.diff(a.indptr))
    off = a.indices - rows
    if np.abs(off).max(initial=0) > 1:
        return False
    sub = np.zeros(n)
    diag = np.zeros(n)
    sup = np.zeros(n)
    sub[rows[off == -1]] = a.data[off == -1]
    diag[rows[off == 0]] = a.data[off == 0]
    sup[rows[off == 1]] = a.data[off == 1]
    return sub, diag, sup


def solve_spd(a, b, tol=1e-10, max_iter=None, x0=None):
    """Solve a x = b for SPD a; returns (x, SolveReport).

    Tridiagonal systems take a direct-elimination fast path with the same
    residual contract; everything else runs Jacobi-preconditioned CG. The
    relative residual is measured in the Euclidean norm.
    """
    if b.shape[0] != a.n:
        raise ValueError(f"dimension mismatch: matrix {a.n}, rhs {b.shape[0]}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter is None:
        max_iter = 20 * a.n
    nb = np.sqrt(b @ b)
    if nb == 0.0:
        return np.zeros(a.n), SolveReport(0, 0.0, True)

    bands = a.tridiagonal_bands()
    if bands is not None:
        x = tridiag_solve(*bands, np.ascontiguousarray(b))
        res = np.sqrt(np.sum((b - a.matvec(x)) ** 2)) / nb
        if res <= tol:
            return x, SolveReport(1, float(res), True)
        # fall through to PCG from the direct solution (pathological scaling)
        return _pcg(a, b, tol, max_iter, x)

    return _pcg(a, b, tol, max_iter, x0)


def solve_spd_strict(a, b, tol=1e-10, max_iter=None, x0=None):
    """As solve_spd, but raises SolverFailure instead of returning converged=False."""
    x, report = solve_spd(a, b, tol=tol, max_iter=max_iter, x0=x0)
    if not report.converged:
        raise SolverFailure(
            f"linear solve failed: residual {report.final_relative_residual:.3e} "
            f"after {report.iterations} iterations (tol {tol:.1e})", report)
    return x, report


def _pcg(a, b, tol, max_iter, x0):
    nb = np.sqrt(b @ b)
    dinv = 1.0 / a.diagonal()
    if x0 is None:
        x = np.zeros(a.n)
        r = b.copy()
    else:
        x = x0.astype(float, copy=True)
        r = b - a.matvec(x)
    z = dinv * r
    p = z.copy()
    rz = r @ z
    res = np.sqrt(r @ r) / nb
    it = 0
    while res > tol and it < max_iter:
        ap = a.matvec(p)
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        res = np.sqrt(r @ r) / nb
        it += 1
    return x, SolveReport(it, float(res), bool(res <= tol))
