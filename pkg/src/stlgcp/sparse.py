"""Sparse Cholesky factorisation and selected inversion.

CHOLMOD (shipped with cvxopt) does the numerical work. Everything that
leaves this module is a numpy array or a scipy sparse matrix.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from cvxopt import cholmod, matrix, spmatrix

__all__ = ["SparseCholesky", "NotPositiveDefiniteError", "selected_inverse"]


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


def _to_cvxopt(A):
    A = sp.tril(sp.csc_matrix(A)).tocoo()
    return spmatrix(
        matrix(A.data.astype(np.float64)),
        matrix(A.row.astype(np.int32)),
        matrix(A.col.astype(np.int32)),
        A.shape,
    )


class SparseCholesky:
    """Fill-reducing Cholesky factor ``A[p][:, p] = L L^T`` of a sparse SPD matrix.

    Parameters
    ----------
    A : sparse matrix
        Symmetric positive definite. Only the lower triangle is read.
    """

    def __init__(self, A):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.n = A.shape[0]
        self._A = _to_cvxopt(A)
        cholmod.options["supernodal"] = 2
        try:
            self._F = cholmod.symbolic(self._A)
            cholmod.numeric(self._A, self._F)
        except ArithmeticError as exc:
            raise NotPositiveDefiniteError(str(exc)) from None
        self._diag = np.asarray(cholmod.diag(self._F)).ravel()
        if not np.all(self._diag > 0):
            raise NotPositiveDefiniteError("non-positive pivot in Cholesky factor")
        b = matrix(np.arange(self.n, dtype=np.float64))
        cholmod.solve(self._F, b, sys=7)
        self.perm = np.asarray(b).ravel().astype(np.int64)
        self._L = None

    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(self._diag)))

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        squeeze = b.ndim == 1
        B = matrix(np.array(b.reshape(self.n, -1), order="F"))
        cholmod.solve(self._F, B, sys=0)
        x = np.asarray(B)
        return x.ravel() if squeeze else x

    def solve_Lt(self, z):
        """Return ``x`` with ``x[p] = L^{-T} z``; x ~ N(0, A^{-1}) when z ~ N(0, I)."""
        z = np.asarray(z, dtype=np.float64)
        squeeze = z.ndim == 1
        Z = matrix(np.array(z.reshape(self.n, -1), order="F"))
        cholmod.solve(self._F, Z, sys=5)
        y = np.asarray(Z)
        x = np.empty_like(y)
        x[self.perm] = y
        return x.ravel() if squeeze else x

    @property
    def L(self) -> sp.csc_matrix:
        """Lower factor in permuted order (CSC, sorted indices)."""
        if self._L is None:
            F = cholmod.symbolic(self._A)
            cholmod.numeric(self._A, F)
            Lc = cholmod.getfactor(F)
            colptr, rowind, vals = Lc.CCS
            L = sp.csc_matrix(
                (np.asarray(vals).ravel(), np.asarray(rowind).ravel(), np.asarray(colptr).ravel()),
                shape=(self.n, self.n),
            )
            L.sort_indices()
            self._L = L
        return self._L


def selected_inverse(chol: SparseCholesky) -> sp.csc_matrix:
    """Entries of ``A^{-1}`` on the sparsity pattern of the Cholesky factor.

    Takahashi recursion, processed column by column from the last pivot. The
    result is returned symmetric and in the original (unpermuted) ordering;
    its diagonal is the vector of marginal variances.
    """
    L = chol.L
    n = L.shape[0]
    indptr, indices = L.indptr, L.indices
    Ldata = L.data
    keys = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr)) * n + indices
    S = np.zeros_like(Ldata)

    for j in range(n - 1, -1, -1):
        start, stop = indptr[j], indptr[j + 1]
        ljj = Ldata[start]
        rows = indices[start + 1:stop]
        if rows.size == 0:
            S[start] = 1.0 / ljj**2
            continue
        lv = Ldata[start + 1:stop]
        r_a = rows[:, None]
        r_b = rows[None, :]
        lo = np.minimum(r_a, r_b)
        hi = np.maximum(r_a, r_b)
        pos = np.searchsorted(keys, (lo * n + hi).ravel()).reshape(lo.shape)
        sigma_block = S[pos]
        col = -(sigma_block @ lv) / ljj
        S[start + 1:stop] = col
        S[start] = 1.0 / ljj**2 - (lv @ col) / ljj

    Sigma = sp.csc_matrix((S, indices, indptr), shape=(n, n))
    Sigma = Sigma + sp.tril(Sigma, k=-1).T
    p = chol.perm
    inv = np.empty_like(p)
    inv[p] = np.arange(n)
    return sp.csc_matrix(Sigma[inv][:, inv])
