"""Sparse storage and Jacobi-preconditioned Krylov solvers.

Matrices are ``scipy.sparse.csr_matrix`` objects in canonical form (sorted,
duplicate-free column indices).  The iterations themselves are small numba
kernels working on the raw CSR arrays so the time stepper can call them
without building Python objects every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

DEFAULT_TOL = 1e-10


class SolverError(RuntimeError):
    """Krylov iteration did not reach the requested residual."""

    def __init__(self, message, residual=np.nan, iterations=0):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class PositivityError(RuntimeError):
    """A solution that must be nonnegative has a negative component."""

    def __init__(self, message, node=-1, value=np.nan, step=-1):
        super().__init__(message)
        self.node = node
        self.value = value
        self.step = step


def as_csr(A) -> sp.csr_matrix:
    """Canonical CSR copy of ``A`` (sorted indices, no duplicates, float64)."""
    A = sp.csr_matrix(A, dtype=np.float64, copy=True)
    A.sum_duplicates()
    A.sort_indices()
    return A


def is_symmetric(A: sp.spmatrix, rtol: float = 1e-13) -> bool:
    A = sp.csr_matrix(A)
    scale = abs(A).max() if A.nnz else 0.0
    if scale == 0.0:
        return True
    return abs(A - A.T).max() <= rtol * scale


def has_increasing_columns(A: sp.csr_matrix) -> bool:
    for r in range(A.shape[0]):
        cols = A.indices[A.indptr[r] : A.indptr[r + 1]]
        if np.any(np.diff(cols) <= 0):
            return False
    return True


def dump_triplets(A: sp.spmatrix, path) -> None:
    """Write ``row col value`` lines (0-based) for every stored entry."""
    C = sp.coo_matrix(A)
    order = np.lexsort((C.col, C.row))
    with open(path, "w") as fh:
        for r, c, v in zip(C.row[order], C.col[order], C.data[order]):
            fh.write(f"{r} {c} {v:.17g}\n")


def load_triplets(path, shape=None) -> sp.csr_matrix:
    data = np.loadtxt(path, ndmin=2)
    rows, cols, vals = data[:, 0].astype(int), data[:, 1].astype(int), data[:, 2]
    if shape is None:
        shape = (rows.max() + 1, cols.max() + 1)
    return as_csr(sp.coo_matrix((vals, (rows, cols)), shape=shape))


@dataclass
class BlockSystem:
    """2x2 block system ``[[uu, uv], [vu, vv]] (x_u, x_v) = (rhs_u, rhs_v)``."""

    uu: sp.csr_matrix
    uv: sp.csr_matrix
    vu: sp.csr_matrix
    vv: sp.csr_matrix
    rhs_u: np.ndarray
    rhs_v: np.ndarray

    def __post_init__(self):
        n, m = self.uu.shape[0], self.vv.shape[0]
        shapes = {"uu": (n, n), "uv": (n, m), "vu": (m, n), "vv": (m, m)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"block {name} has shape {getattr(self, name).shape}, expected {shape}")
        if len(self.rhs_u) != n or len(self.rhs_v) != m:
            raise ValueError("right-hand side does not conform to the blocks")

    def assembled(self) -> sp.csr_matrix:
        return as_csr(sp.bmat([[self.uu, self.uv], [self.vu, self.vv]]))

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.rhs_u, self.rhs_v])


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def csr_matvec(indptr, indices, data, x, out):
    n = len(indptr) - 1
    for i in range(n):
        s = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            s += data[k] * x[indices[k]]
        out[i] = s


@numba.njit(cache=True)
def csr_diagonal(indptr, indices, data, out):
    n = len(indptr) - 1
    for i in range(n):
        out[i] = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            if indices[k] == i:
                out[i] = data[k]


@numba.njit(cache=True)
def _dot(a, b):
    s = 0.0
    for i in range(len(a)):
        s += a[i] * b[i]
    return s


@numba.njit(cache=True)
def cg_csr(indptr, indices, data, b, x, tol, max_iter):
    """Jacobi-preconditioned CG; ``x`` holds the initial guess and is overwritten.

    Returns ``(iterations, relative residual)``; a negative iteration count
    means the tolerance was not met.
    """
    n = len(b)
    diag = np.empty(n)
    csr_diagonal(indptr, indices, data, diag)
    bnorm = np.sqrt(_dot(b, b))
    if bnorm == 0.0:
        x[:] = 0.0
        return 0, 0.0
    r = np.empty(n)
    csr_matvec(indptr, indices, data, x, r)
    for i in range(n):
        r[i] = b[i] - r[i]
    rnorm = np.sqrt(_dot(r, r))
    if rnorm <= tol * bnorm:
        return 0, rnorm / bnorm
    z = r / diag
    p = z.copy()
    q = np.empty(n)
    rz = _dot(r, z)
    for it in range(1, max_iter + 1):
        csr_matvec(indptr, indices, data, p, q)
        alpha = rz / _dot(p, q)
        for i in range(n):
            x[i] += alpha * p[i]
            r[i] -= alpha * q[i]
        rnorm = np.sqrt(_dot(r, r))
        if rnorm <= tol * bnorm:
            return it, rnorm / bnorm
        for i in range(n):
            z[i] = r[i] / diag[i]
        rz_new = _dot(r, z)
        beta = rz_new / rz
        rz = rz_new
        for i in range(n):
            p[i] = z[i] + beta * p[i]
    return -max_iter, rnorm / bnorm


@numba.njit(cache=True)
def bicgstab_csr(indptr, indices, data, b, x, tol, max_iter):
    """Jacobi-preconditioned BiCGStab (right preconditioning); same conventions as ``cg_csr``."""
    n = len(b)
    dinv = np.empty(n)
    csr_diagonal(indptr, indices, data, dinv)
    for i in range(n):
        dinv[i] = 1.0 / dinv[i]
    bnorm = np.sqrt(_dot(b, b))
    if bnorm == 0.0:
        x[:] = 0.0
        return 0, 0.0
    r = np.empty(n)
    csr_matvec(indptr, indices, data, x, r)
    for i in range(n):
        r[i] = b[i] - r[i]
    rnorm = np.sqrt(_dot(r, r))
    if rnorm <= tol * bnorm:
        return 0, rnorm / bnorm
    r0 = r.copy()
    p = np.zeros(n)
    v = np.zeros(n)
    phat = np.empty(n)
    shat = np.empty(n)
    t = np.empty(n)
    rho = alpha = omega = 1.0
    for it in range(1, max_iter + 1):
        rho_new = _dot(r0, r)
        if rho_new == 0.0:
            # breakdown: restart from the current iterate
            csr_matvec(indptr, indices, data, x, r)
            for i in range(n):
                r[i] = b[i] - r[i]
            r0[:] = r
            p[:] = 0.0
            v[:] = 0.0
            rho = alpha = omega = 1.0
            rho_new = _dot(r0, r)
            if rho_new == 0.0:
                return -it, np.sqrt(_dot(r, r)) / bnorm
        beta = (rho_new / rho) * (alpha / omega)
        rho = rho_new
        for i in range(n):
            p[i] = r[i] + beta * (p[i] - omega * v[i])
            phat[i] = dinv[i] * p[i]
        csr_matvec(indptr, indices, data, phat, v)
        alpha = rho / _dot(r0, v)
        for i in range(n):
            r[i] -= alpha * v[i]  # r now holds s
        snorm = np.sqrt(_dot(r, r))
        if snorm <= tol * bnorm:
            for i in range(n):
                x[i] += alpha * phat[i]
            return it, snorm / bnorm
        for i in range(n):
            shat[i] = dinv[i] * r[i]
        csr_matvec(indptr, indices, data, shat, t)
        tt = _dot(t, t)
        omega = _dot(t, r) / tt if tt > 0.0 else 0.0
        for i in range(n):
            x[i] += alpha * phat[i] + omega * shat[i]
            r[i] -= omega * t[i]
        rnorm = np.sqrt(_dot(r, r))
        if rnorm <= tol * bnorm:
            return it, rnorm / bnorm
        if omega == 0.0:
            return -it, rnorm / bnorm
    return -max_iter, rnorm / bnorm


# ---------------------------------------------------------------------------
# public solvers


def _default_max_iter(n):
    return max(10 * n, 20)


def solve_spd(A, b, tol=DEFAULT_TOL, max_iter=None, x0=None) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A`` by preconditioned CG."""
    A = as_csr(A)
    b = np.ascontiguousarray(b, dtype=np.float64)
    n = A.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    max_iter = _default_max_iter(n) if max_iter is None else int(max_iter)
    its, res = cg_csr(A.indptr, A.indices, A.data, b, x, tol, max_iter)
    if its < 0:
        raise SolverError("CG did not converge", res, -its)
    return x


def solve_coupled(S: BlockSystem, tol=DEFAULT_TOL, max_iter=None, x0=None):
    """Solve the block system by Jacobi-preconditioned BiCGStab.

    With M-matrix diagonal blocks, nonpositive coupling blocks and a
    nonnegative right-hand side the exact solution is nonnegative; a
    component below ``-1e-12 * max|x|`` raises :class:`PositivityError`.
    """
    A = S.assembled()
    b = S.rhs()
    n = A.shape[0]
    x = np.zeros(n) if x0 is None else np.concatenate(x0).astype(np.float64)
    max_iter = _default_max_iter(n) if max_iter is None else int(max_iter)
    its, res = bicgstab_csr(A.indptr, A.indices, A.data, b, x, tol, max_iter)
    if its < 0:
        raise SolverError("BiCGStab did not converge", res, -its)
    if np.all(b >= 0.0):
        check_nonnegative(x)
    nu = S.uu.shape[0]
    return x[:nu], x[nu:]


def check_nonnegative(x, rel=1e-12):
    scale = np.abs(x).max() if len(x) else 0.0
    k = int(np.argmin(x)) if len(x) else -1
    if len(x) and x[k] < -rel * scale:
        raise PositivityError(f"negative component {x[k]:.3e} at unknown {k}", node=k, value=float(x[k]))
