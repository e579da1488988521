"""Sparse Cholesky factorisation for symmetric positive definite matrices.

Up-looking row-by-row algorithm with a one-off symbolic analysis
(elimination tree and column counts), so repeated factorisations of
matrices that share a sparsity pattern only pay for the numeric phase.
The caller supplies a fill-reducing ordering; the factor is of
``A[order][:, order]``.
"""

from __future__ import annotations

import numba as nb
import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import splu


class NotPositiveDefinite(ArithmeticError):
    pass


@nb.njit(cache=True)
def _etree(n, ap, ai):
    parent = np.full(n, -1, np.int64)
    ancestor = np.full(n, -1, np.int64)
    for k in range(n):
        for p in range(ap[k], ap[k + 1]):
            i = ai[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@nb.njit(cache=True)
def _ereach(ap, ai, k, parent, stack, mark):
    n = parent.size
    top = n
    mark[k] = k
    for p in range(ap[k], ap[k + 1]):
        i = ai[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            stack[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            stack[top] = stack[length]
    return top


@nb.njit(cache=True)
def _column_counts(n, ap, ai, parent):
    counts = np.zeros(n, np.int64)
    stack = np.empty(n, np.int64)
    mark = np.full(n, -1, np.int64)
    for k in range(n):
        top = _ereach(ap, ai, k, parent, stack, mark)
        for t in range(top, n):
            counts[stack[t]] += 1
        counts[k] += 1
    return counts


@nb.njit(cache=True)
def _numeric(n, ap, ai, ax, parent, lp):
    li = np.empty(lp[n], np.int64)
    lx = np.empty(lp[n])
    c = lp[:-1].copy()
    x = np.zeros(n)
    stack = np.empty(n, np.int64)
    mark = np.full(n, -1, np.int64)
    for k in range(n):
        top = _ereach(ap, ai, k, parent, stack, mark)
        x[k] = 0.0
        for p in range(ap[k], ap[k + 1]):
            if ai[p] <= k:
                x[ai[p]] = ax[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = stack[t]
            lki = x[i] / lx[lp[i]]
            x[i] = 0.0
            for p in range(lp[i] + 1, c[i]):
                x[li[p]] -= lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            li[p] = k
            lx[p] = lki
        if d <= 0.0:
            return li, lx, False
        p = c[k]
        c[k] += 1
        li[p] = k
        lx[p] = np.sqrt(d)
    return li, lx, True


@nb.njit(cache=True)
def _solve_inplace(lp, li, lx, b):
    n = lp.size - 1
    for col in range(b.shape[1]):
        for j in range(n):
            b[j, col] /= lx[lp[j]]
            v = b[j, col]
            for p in range(lp[j] + 1, lp[j + 1]):
                b[li[p], col] -= lx[p] * v
        for j in range(n - 1, -1, -1):
            v = b[j, col]
            for p in range(lp[j] + 1, lp[j + 1]):
                v -= lx[p] * b[li[p], col]
            b[j, col] = v / lx[lp[j]]


@nb.njit(cache=True)
def _lt_solve_inplace(lp, li, lx, b):
    n = lp.size - 1
    for j in range(n - 1, -1, -1):
        v = b[j]
        for p in range(lp[j] + 1, lp[j + 1]):
            v -= lx[p] * b[li[p]]
        b[j] = v / lx[lp[j]]


@nb.njit(cache=True)
def _find(li, start, stop, row):
    lo, hi = start, stop
    while lo < hi:
        mid = (lo + hi) // 2
        if li[mid] < row:
            lo = mid + 1
        else:
            hi = mid
    return lo


@nb.njit(cache=True)
def _selected_inverse(lp, li, lx):
    """Entries of (L L')^-1 on the pattern of L (Takahashi recurrences)."""
    n = lp.size - 1
    zx = np.zeros(lx.size)
    for j in range(n - 1, -1, -1):
        a0, a1 = lp[j] + 1, lp[j + 1]
        d = lx[lp[j]]
        for a in range(a0, a1):
            i = li[a]
            s = 0.0
            for b in range(a0, a1):
                k = li[b]
                if k >= i:
                    s += lx[b] * zx[_find(li, lp[i], lp[i + 1], k)]
                else:
                    s += lx[b] * zx[_find(li, lp[k], lp[k + 1], i)]
            zx[a] = -s / d
        s = 0.0
        for a in range(a0, a1):
            s += lx[a] * zx[a]
        zx[lp[j]] = 1.0 / (d * d) - s / d
    return zx


def fill_reducing_order(a: sp.spmatrix) -> np.ndarray:
    """Minimum-degree ordering on A + A' (via SuperLU's column ordering)."""
    a = sp.csc_matrix(a)
    try:
        lu = splu(a, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        return np.argsort(lu.perm_c)
    except RuntimeError:
        return reverse_cuthill_mckee(sp.csr_matrix(a), symmetric_mode=True).astype(np.int64)


class SymbolicCholesky:
    """Symbolic analysis for a fixed sparsity pattern and ordering.

    ``pattern`` must contain the full diagonal.  Matrices handed to
    :meth:`factor` are given as data arrays aligned with
    :attr:`indices`/:attr:`indptr` (the permuted pattern in sorted CSC form).
    """

    def __init__(self, pattern: sp.spmatrix, order: np.ndarray | None = None):
        pattern = sp.csc_matrix(pattern)
        self.n = pattern.shape[0]
        self.order = fill_reducing_order(pattern) if order is None else np.asarray(order, dtype=np.int64)
        permuted = sp.csc_matrix(abs(pattern[self.order][:, self.order]) + sp.identity(self.n, format="csc"))
        permuted.sort_indices()
        self.indptr = permuted.indptr.astype(np.int64)
        self.indices = permuted.indices.astype(np.int64)
        self.parent = _etree(self.n, self.indptr, self.indices)
        counts = _column_counts(self.n, self.indptr, self.indices, self.parent)
        self.lp = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @property
    def nnz(self) -> int:
        return int(self.lp[-1])

    def align(self, m: sp.spmatrix) -> np.ndarray:
        """Data of ``m`` (original ordering) laid out on the permuted pattern."""
        inv = np.empty(self.n, dtype=np.int64)
        inv[self.order] = np.arange(self.n)
        mc = sp.coo_matrix(m)
        rows, cols = inv[mc.row], inv[mc.col]
        cols_of = np.repeat(np.arange(self.n), np.diff(self.indptr))
        keys = cols_of * self.n + self.indices
        want = cols.astype(np.int64) * self.n + rows
        pos = np.searchsorted(keys, want)
        if np.any(pos >= len(keys)) or np.any(keys[np.minimum(pos, len(keys) - 1)] != want):
            raise ValueError("matrix has entries outside the analysed pattern")
        out = np.zeros(len(self.indices))
        np.add.at(out, pos, mc.data)
        return out

    def factor(self, data: np.ndarray) -> "CholeskyFactor":
        li, lx, ok = _numeric(self.n, self.indptr, self.indices, np.asarray(data, dtype=float), self.parent, self.lp)
        if not ok:
            raise NotPositiveDefinite("matrix is not positive definite")
        return CholeskyFactor(self, li, lx)

    def factor_matrix(self, m: sp.spmatrix) -> "CholeskyFactor":
        return self.factor(self.align(m))


class CholeskyFactor:
    """``L L' = A[order][:, order]``."""

    def __init__(self, symbolic: SymbolicCholesky, li: np.ndarray, lx: np.ndarray):
        self.symbolic = symbolic
        self.li = li
        self.lx = lx

    @property
    def logdet(self) -> float:
        diag = self.lx[self.symbolic.lp[:-1]]
        return float(2.0 * np.sum(np.log(diag)))

    def solve(self, b) -> np.ndarray:
        """Solve ``A x = b`` for a vector or a matrix of right-hand sides."""
        b = np.asarray(b, dtype=float)
        vec = b.ndim == 1
        order = self.symbolic.order
        work = np.array(b.reshape(len(b), -1)[order], dtype=float, order="C")
        _solve_inplace(self.symbolic.lp, self.li, self.lx, work)
        out = np.empty_like(work)
        out[order] = work
        return out[:, 0] if vec else out

    def inverse_diagonal(self) -> np.ndarray:
        """Diagonal of ``A^-1`` (original ordering) without forming the inverse."""
        zx = _selected_inverse(self.symbolic.lp, self.li, self.lx)
        out = np.empty(self.symbolic.n)
        out[self.symbolic.order] = zx[self.symbolic.lp[:-1]]
        return out

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw from ``N(0, A^-1)``."""
        k = 1 if size is None else size
        out = np.empty((self.symbolic.n, k))
        order = self.symbolic.order
        for j in range(k):
            z = rng.standard_normal(self.symbolic.n)
            _lt_solve_inplace(self.symbolic.lp, self.li, self.lx, z)
            out[order, j] = z
        return out[:, 0] if size is None else out
