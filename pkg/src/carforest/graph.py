"""Nearest-neighbour adjacency and Leroux CAR precision matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class NeighbourhoodMatrix:
    """Symmetric binary neighbourhood matrix stored as a CSR matrix.

    ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``.
    """

    n: int
    d_param: int
    w: sp.csr_matrix

    @property
    def edges(self) -> np.ndarray:
        upper = sp.triu(self.w, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return np.column_stack([upper.row[order], upper.col[order]]).astype(np.int64)

    @property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.w.sum(axis=1)).ravel()

    def to_edge_list(self) -> str:
        """Render as ``i j`` lines (0-based, i < j, sorted)."""
        return "".join(f"{i} {j}\n" for i, j in self.edges)

    @classmethod
    def from_edges(cls, n: int, edges, d_param: int = 0) -> "NeighbourhoodMatrix":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        return cls(n=n, d_param=d_param, w=_symmetric_from_directed(n, edges[:, 0], edges[:, 1]))

    def subgraph(self, index) -> "NeighbourhoodMatrix":
        index = np.asarray(index)
        return NeighbourhoodMatrix(n=len(index), d_param=self.d_param, w=self.w[index][:, index].tocsr())


def _symmetric_from_directed(n: int, rows, cols) -> sp.csr_matrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    data = np.ones(2 * rows.size)
    w = sp.coo_matrix(
        (data, (np.concatenate([rows, cols]), np.concatenate([cols, rows]))), shape=(n, n)
    ).tocsr()
    # duplicates were summed; collapse back to 0/1
    w.data[:] = 1.0
    w.sort_indices()
    return w


def nearest_indices(points: np.ndarray, queries: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    """Indices of the ``k`` nearest ``points`` to each query (Euclidean).

    Ties at equal distance go to the lower point index.  With
    ``exclude_self`` the queries are the points themselves and each point is
    dropped from its own neighbour list.
    """
    points = np.asarray(points, dtype=float)
    queries = np.asarray(queries, dtype=float)
    n = len(points)
    extra = 1 if exclude_self else 0
    want = k + extra
    if want > n:
        raise ValueError(f"asked for {k} neighbours among {n - extra} candidates")
    tree = cKDTree(points)
    out = np.empty((len(queries), k), dtype=np.int64)
    pending = np.arange(len(queries))
    # over-fetch so equal-distance ties at the boundary can be resolved by index
    fetch = min(n, want + 8)
    while pending.size:
        dist, idx = tree.query(queries[pending], k=fetch)
        dist = dist.reshape(len(pending), fetch)
        idx = idx.reshape(len(pending), fetch)
        done = np.ones(len(pending), dtype=bool) if fetch == n else dist[:, -1] > dist[:, want - 1]
        for row in np.flatnonzero(done):
            d_row, i_row = dist[row], idx[row]
            if exclude_self:
                mask = i_row != pending[row]
                d_row, i_row = d_row[mask], i_row[mask]
            order = np.lexsort((i_row, d_row))
            out[pending[row]] = i_row[order[:k]]
        pending = pending[~done]
        fetch = min(n, 2 * fetch)
    return out


def knn_adjacency(centroids, d: int) -> NeighbourhoodMatrix:
    """Build the symmetrised D-nearest-neighbour matrix.

    Each unit points at its ``d`` nearest centroids; any one-way edge is then
    mirrored so the result is symmetric with a zero diagonal.
    """
    centroids = np.asarray(centroids, dtype=float)
    n = len(centroids)
    if d < 1:
        raise ValueError("d must be at least 1")
    if d >= n:
        raise ValueError(f"d={d} must be smaller than the number of units ({n})")
    nbrs = nearest_indices(centroids, centroids, d, exclude_self=True)
    rows = np.repeat(np.arange(n), d)
    w = _symmetric_from_directed(n, rows, nbrs.ravel())
    return NeighbourhoodMatrix(n=n, d_param=d, w=w)


@dataclass(frozen=True)
class LerouxPrecision:
    q: sp.csc_matrix
    rho: float


def leroux_precision(w: NeighbourhoodMatrix, rho: float) -> LerouxPrecision:
    """Q = rho * (diag(W 1) - W) + (1 - rho) * I, for 0 <= rho < 1."""
    if not (0.0 <= rho < 1.0):
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    return LerouxPrecision(q=leroux_matrix(w.w, rho), rho=float(rho))


def leroux_matrix(w: sp.spmatrix, rho: float) -> sp.csc_matrix:
    n = w.shape[0]
    deg = np.asarray(w.sum(axis=1)).ravel()
    q = sp.diags(rho * deg + (1.0 - rho)) - rho * w
    return sp.csc_matrix(q)


def laplacian(w: sp.spmatrix) -> sp.csc_matrix:
    deg = np.asarray(w.sum(axis=1)).ravel()
    return sp.csc_matrix(sp.diags(deg) - w)


def morans_i(values, w: NeighbourhoodMatrix) -> float:
    z = np.asarray(values, dtype=float)
    z = z - z.mean()
    return float(len(z) / w.w.sum() * (z @ (w.w @ z)) / (z @ z))
