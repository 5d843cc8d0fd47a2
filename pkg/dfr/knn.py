# Deterministic nearest neighbour queries.
#
# Every neighbour lookup in the package goes through here so ties are
# always resolved towards the smaller index, whatever the tree does.

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .dfrtypes import Array, IndexArray

# rows of queries handled per cdist block
BLOCK_ROWS = 1024

# brute force below this many query x point pairs
BRUTE_FORCE_PAIRS = 4_000_000

# extra tree neighbours fetched so equal distances can be reordered.  Rows
# whose tie group fills every fetched slot are queried again with more.
TIE_SLACK = 4


def _as_2d(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


def nearest(queries: Array, points: Array, *, tree: cKDTree | None = None) -> tuple[IndexArray, Array]:
    """For each query row find the closest row of `points`

    :returns: (indices, squared distances).  Ties go to the smaller index.
    """
    idx, d2 = k_nearest(queries, points, 1, tree=tree)
    return idx[:, 0], d2[:, 0]


def k_nearest(queries: Array, points: Array, k: int, *, tree: cKDTree | None = None) -> tuple[IndexArray, Array]:
    """The `k` closest rows of `points` for each query row, ordered by
    (distance, index)

    Low dimensional data with many pairs uses a KD-tree, everything else
    exact blocked distance matrices.

    :returns: (indices  Q x k, squared distances Q x k)
    """
    queries = _as_2d(queries)
    points = _as_2d(points)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={ k } must be between 1 and the point count { n }")

    if queries.shape[1] <= 3 and queries.shape[0] * n > BRUTE_FORCE_PAIRS:
        return _tree_k_nearest(queries, points, k, tree)

    out_idx = np.empty((queries.shape[0], k), dtype=np.intp)
    out_d2 = np.empty((queries.shape[0], k))
    for start in range(0, queries.shape[0], BLOCK_ROWS):
        block = cdist(queries[start:start + BLOCK_ROWS], points, "sqeuclidean")
        if k == 1:
            # argmin returns the first minimum
            idx = np.argmin(block, axis=1)[:, None]
        else:
            # stable sort keeps index order among equal distances
            idx = np.argsort(block, axis=1, kind="stable")[:, :k]
        out_idx[start:start + BLOCK_ROWS] = idx
        out_d2[start:start + BLOCK_ROWS] = np.take_along_axis(block, idx, axis=1)
    return out_idx, out_d2


def _tree_query(queries: Array, points: Array, tree: cKDTree, fetch: int) -> tuple[IndexArray, Array]:
    "`fetch` tree neighbours per row ordered by (exact squared distance, index)"
    _, idx = tree.query(queries, k=fetch)
    if fetch == 1:
        idx = idx[:, None]
    # recompute exactly so ties compare equal bit for bit
    diff = points[idx] - queries[:, None, :]
    d2 = np.einsum("qkd,qkd->qk", diff, diff)
    order = np.lexsort((idx, d2), axis=1)
    return np.take_along_axis(idx, order, axis=1), np.take_along_axis(d2, order, axis=1)


def _tree_k_nearest(queries: Array, points: Array, k: int, tree: cKDTree | None) -> tuple[IndexArray, Array]:
    if tree is None:
        tree = cKDTree(points)
    n = points.shape[0]
    fetch = min(n, k + TIE_SLACK)
    idx, d2 = _tree_query(queries, points, tree, fetch)
    out_idx, out_d2 = idx[:, :k].copy(), d2[:, :k].copy()
    # the tree returns an arbitrary subset of a tie group, so a group that
    # reaches the last fetched slot may be hiding smaller indices
    rows = np.arange(len(queries))
    while fetch < n:
        rows = rows[d2[:, -1] <= d2[:, k - 1]]
        if not len(rows):
            break
        fetch = min(n, 2 * fetch)
        idx, d2 = _tree_query(queries[rows], points, tree, fetch)
        out_idx[rows], out_d2[rows] = idx[:, :k], d2[:, :k]
    return out_idx.astype(np.intp), out_d2
