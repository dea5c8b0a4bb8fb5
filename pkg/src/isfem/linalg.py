"""CSR matrices and Jacobi-preconditioned conjugate gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse


class SolverError(RuntimeError):
    """CG did not reach the requested tolerance."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class SparseMatrixCSR:
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    n: int

    @classmethod
    def from_coo(cls, rows, cols, vals, n: int) -> "SparseMatrixCSR":
        """Build from triplets; duplicates are summed in input order."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        if rows.size and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= n):
            raise IndexError("triplet index out of range")
        order = np.lexsort((cols, rows))
        r, c, v = rows[order], cols[order], vals[order]
        if r.size:
            first = np.ones(r.size, dtype=bool)
            first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
            starts = np.flatnonzero(first)
            v = np.add.reduceat(v, starts)
            r, c = r[starts], c[starts]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=n), out=indptr[1:])
        return cls(indptr=indptr, indices=c, data=v, n=n)

    @classmethod
    def from_dense(cls, M) -> "SparseMatrixCSR":
        M = np.asarray(M, dtype=float)
        r, c = np.nonzero(M)
        return cls.from_coo(r, c, M[r, c], M.shape[0])

    @classmethod
    def identity(cls, n: int) -> "SparseMatrixCSR":
        i = np.arange(n)
        return cls.from_coo(i, i, np.ones(n), n)

    @property
    def row_of_entry(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.n)
        on = self.row_of_entry == self.indices
        d[self.indices[on]] = self.data[on]
        return d

    def to_dense(self) -> np.ndarray:
        M = np.zeros((self.n, self.n))
        M[self.row_of_entry, self.indices] = self.data
        return M

    @cached_property
    def _kernel(self) -> scipy.sparse.csr_matrix:
        # same arrays, compiled row-by-row product (serial, deterministic)
        return scipy.sparse.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def __matmul__(self, x):
        return spmv(self, x)


def spmv(A: SparseMatrixCSR, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (A.n,):
        raise ValueError(f"dimension mismatch: matrix is {A.n}x{A.n}, vector has shape {x.shape}")
    return A._kernel @ x


@dataclass
class SolverOptions:
    rel_tolerance: float = 1e-10
    max_iterations: int | None = None  # default 10 n
    deflate_constants: bool = False
    precondition: bool = True

    def __post_init__(self):
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be positive")


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float
    history: list = field(default_factory=list)  # ||r_k||_2
    precond_history: list = field(default_factory=list)  # sqrt(r_k . z_k)
    energy_history: list = field(default_factory=list)  # x.Ax/2 - b.x, via r = b - Ax


def _dot(a, b):
    return float(np.dot(a, b))


def cg_solve(A: SparseMatrixCSR, b, opts: SolverOptions | None = None, x0=None) -> CGResult:
    """Solve ``A x = b`` for SPD ``A``.

    With ``deflate_constants`` the problem is solved in the complement of
    the constant vector: ``b`` and every preconditioned residual are made
    mean-free, so the returned ``x`` has zero mean.
    """
    opts = opts or SolverOptions()
    b = np.asarray(b, dtype=float)
    n = A.n
    maxit = opts.max_iterations if opts.max_iterations is not None else 10 * n

    def project(v):
        return v - v.mean() if opts.deflate_constants else v

    if opts.precondition:
        d = A.diagonal()
        if np.any(d <= 0):
            raise SolverError("Jacobi preconditioner needs a positive diagonal", [])
        inv_d = 1.0 / d
    else:
        inv_d = np.ones(n)

    b = project(b)
    x = np.zeros(n) if x0 is None else project(np.array(x0, dtype=float))
    r = project(b - spmv(A, x))
    bnorm = np.linalg.norm(b)
    target = opts.rel_tolerance * bnorm
    result = CGResult(x=x, iterations=0, residual=float(np.linalg.norm(r)))
    result.history.append(result.residual)
    if bnorm == 0.0:
        result.x = np.zeros(n)
        result.residual = 0.0
        return result

    z = project(inv_d * r)
    p = z.copy()
    rz = _dot(r, z)
    result.precond_history.append(np.sqrt(max(rz, 0.0)))
    result.energy_history.append(-0.5 * _dot(x, b + r))
    k = 0
    while result.residual > target:
        if k >= maxit:
            raise SolverError(
                f"CG did not converge in {maxit} iterations (residual {result.residual:.3e}, target {target:.3e})",
                result.history,
            )
        Ap = spmv(A, p)
        pAp = _dot(p, Ap)
        if pAp <= 0:
            raise SolverError("matrix is not positive definite on the search space", result.history)
        alpha = rz / pAp
        x = x + alpha * p
        r = project(r - alpha * Ap)
        z = project(inv_d * r)
        rz_new = _dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        k += 1
        result.residual = float(np.linalg.norm(r))
        result.history.append(result.residual)
        result.precond_history.append(np.sqrt(max(rz, 0.0)))
        result.energy_history.append(-0.5 * _dot(x, b + r))
    result.x = x
    result.iterations = k
    return result
