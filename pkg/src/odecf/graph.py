"""Symmetric-normalized bipartite adjacency in CSR form and the sparse-dense product.

Embedding matrices are plain float64 ndarrays of shape (n_nodes, dims): user
rows occupy [0, n_users), item rows [n_users, n_nodes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import SplitDataset, train_pairs


class GraphError(ValueError):
    """Raised for ill-posed graph construction or mismatched products."""


@dataclass(eq=False)
class SparseAdjacency:
    """Row-compressed symmetric adjacency over user+item nodes.

    Column indices are ascending within each row, which fixes the summation
    order of the multiply kernel. Entry (u, n_users+i) holds
    1/sqrt(deg(u)*deg(i)) over train-set degrees; the matrix is structurally
    symmetric and strictly bipartite. Instances are immutable after
    construction and safe to share across threads.
    """

    n_nodes: int
    n_users: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    def to_scipy(self) -> sp.csr_matrix:
        cached = getattr(self, "_csr_cache", None)
        if cached is None:
            cached = sp.csr_matrix(
                (self.values, self.col_indices, self.row_offsets),
                shape=(self.n_nodes, self.n_nodes),
            )
            self._csr_cache = cached
        return cached

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()


def build_adjacency(ds: SplitDataset, allow_isolated_items: bool = False) -> SparseAdjacency:
    """Build the normalized adjacency from the train partition only.

    Validation/test edges never enter the graph. A user or item without any
    train interaction leaves its normalization undefined and raises, unless
    ``allow_isolated_items`` is set, in which case such items simply get an
    empty row (they receive and contribute nothing during propagation).
    """
    n, m = ds.n_users, ds.n_items
    users, items = train_pairs(ds)
    if users.size == 0:
        raise GraphError("train partition is empty")

    user_deg = np.array([len(t) for t in ds.train], dtype=np.int64)
    item_deg = np.bincount(items, minlength=m).astype(np.int64)
    if (user_deg == 0).any():
        bad = int(np.argmax(user_deg == 0))
        raise GraphError(f"user {bad} has no training interactions; normalization undefined")
    if (item_deg == 0).any() and not allow_isolated_items:
        bad = int(np.argmax(item_deg == 0))
        raise GraphError(f"item {bad} has no training interactions; normalization undefined")

    weights = 1.0 / np.sqrt(user_deg[users].astype(np.float64) * item_deg[items].astype(np.float64))

    # user block rows [0, n): item columns ascending within each user
    order_u = np.lexsort((items, users))
    # item block rows [n, n+m): user columns ascending within each item
    order_i = np.lexsort((users, items))

    col_indices = np.concatenate([n + items[order_u], users[order_i]])
    values = np.concatenate([weights[order_u], weights[order_i]])
    row_offsets = np.zeros(n + m + 1, dtype=np.int64)
    np.cumsum(user_deg, out=row_offsets[1 : n + 1])
    row_offsets[n + 1 :] = users.size + np.cumsum(item_deg)

    return SparseAdjacency(
        n_nodes=n + m,
        n_users=n,
        row_offsets=row_offsets,
        col_indices=col_indices,
        values=values,
    )


def spmm(adj: SparseAdjacency, emb: np.ndarray) -> np.ndarray:
    """Exact sparse-times-dense product A @ E.

    Each output row accumulates its nonzeros in ascending column order, so
    results are bit-reproducible run to run.
    """
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != adj.n_nodes:
        raise GraphError(
            f"embedding shape {emb.shape} does not match adjacency over {adj.n_nodes} nodes"
        )
    return adj.to_scipy() @ emb


def dump_coordinates(adj: SparseAdjacency, path) -> None:
    """Debug dump in 'row col value' coordinate text format."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in range(adj.n_nodes):
            lo, hi = adj.row_offsets[row], adj.row_offsets[row + 1]
            for k in range(lo, hi):
                fh.write(f"{row} {int(adj.col_indices[k])} {float(adj.values[k])!r}\n")
