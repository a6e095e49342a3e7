"""Point-cloud containers and spatial queries.

All queries are exact: farthest point sampling is greedy max-min with
lowest-index tie-breaks, and k-nearest-neighbor search returns rows sorted
by squared Euclidean distance with ties again broken by lowest source
index. Large problems route through a KD-tree, small ones through chunked
brute force; both produce identical indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .tensor import RngState

# Above this many query x source pairs the KD-tree path takes over.
_BRUTE_PAIR_LIMIT = 1 << 24
_CHUNK = 512


@dataclass
class PointCloud:
    """Positions in meters plus optional per-point features and labels."""

    positions: np.ndarray
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be N x 3, got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features)
            if self.features.shape[0] != self.n:
                raise ValueError("features must have one row per point")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ValueError("labels must be one id per point")

    @property
    def n(self):
        return self.positions.shape[0]

    def select(self, indices) -> "PointCloud":
        indices = np.asarray(indices)
        return PointCloud(
            positions=self.positions[indices],
            features=None if self.features is None else self.features[indices],
            labels=None if self.labels is None else self.labels[indices],
        )


@dataclass
class NeighborIndex:
    """N x K table: row i lists the K nearest source points of query i."""

    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ValueError("neighbor indices must be an N x K table")

    @property
    def k(self):
        return self.indices.shape[1]

    def __len__(self):
        return self.indices.shape[0]


def fps(points, count, start=0):
    """Greedy max-min subset selection; deterministic given the start index.

    Accepts a PointCloud or an N x 3 array and returns ``count`` indices.
    Each pick maximizes the distance to the already-selected set, ties going
    to the lowest index.
    """
    pos = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    n = pos.shape[0]
    if not 1 <= count <= n:
        raise ValueError(f"sample count {count} must be in [1, {n}]")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range [0, {n})")

    selected = np.empty(count, dtype=np.int64)
    selected[0] = start
    # min squared distance of every point to the selected set so far
    best = ((pos - pos[start]) ** 2).sum(axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(best))  # argmax returns the first max: lowest-index tie-break
        selected[i] = nxt
        d = ((pos - pos[nxt]) ** 2).sum(axis=1)
        np.minimum(best, d, out=best)
    return selected


def _knn_brute(queries, source, k):
    m = queries.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    for lo in range(0, m, _CHUNK):
        hi = min(lo + _CHUNK, m)
        q = queries[lo:hi]
        d = ((q[:, None, :] - source[None, :, :]) ** 2).sum(axis=2)
        if k < source.shape[0]:
            cand = np.argpartition(d, k - 1, axis=1)[:, :k]
            dc = np.take_along_axis(d, cand, axis=1)
            # argpartition splits ties at the k-boundary arbitrarily; pull in
            # every source at exactly the k-th distance and re-select.
            kth = dc.max(axis=1)
            for r in np.nonzero((d <= kth[:, None]).sum(axis=1) > k)[0]:
                tied = np.nonzero(d[r] <= kth[r])[0]
                order = np.lexsort((tied, d[r, tied]))
                cand[r] = tied[order[:k]]
                dc[r] = d[r, cand[r]]
        else:
            cand = np.broadcast_to(np.arange(k, dtype=np.int64), (hi - lo, k)).copy()
            dc = d
        order = np.lexsort((cand, dc))
        out[lo:hi] = np.take_along_axis(cand, order, axis=1)
    return out


def _knn_kdtree(queries, source, k):
    tree = cKDTree(source)
    dist, idx = tree.query(queries, k=k)
    if k == 1:
        dist, idx = dist[:, None], idx[:, None]
    # Re-derive squared distances so ordering and tie handling match the
    # brute-force path bit for bit, then fix rows whose k-th distance ties
    # with an excluded source point.
    d2 = ((queries[:, None, :] - source[idx]) ** 2).sum(axis=2)
    kth = d2.max(axis=1)
    if k < source.shape[0]:
        counts = tree.query_ball_point(queries, r=np.sqrt(kth) * (1.0 + 1e-12), return_length=True)
        for r in np.nonzero(counts > k)[0]:
            cand = np.asarray(tree.query_ball_point(queries[r], r=np.sqrt(kth[r]) * (1.0 + 1e-12)), dtype=np.int64)
            dd = ((source[cand] - queries[r]) ** 2).sum(axis=1)
            keep = dd <= kth[r]
            cand, dd = cand[keep], dd[keep]
            order = np.lexsort((cand, dd))[:k]
            idx[r], d2[r] = cand[order], dd[order]
    order = np.lexsort((idx, d2))
    return np.take_along_axis(idx.astype(np.int64), order, axis=1)


def knn(queries, source, k, method="auto") -> NeighborIndex:
    """Exact k-nearest neighbors of each query among source points.

    Rows come back sorted by ascending squared Euclidean distance with ties
    broken by lowest source index. ``method`` picks the search strategy;
    "auto" uses brute force for small problems and a KD-tree otherwise.
    """
    queries = np.asarray(queries, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != 3 or source.ndim != 2 or source.shape[1] != 3:
        raise ValueError("queries and source must be N x 3 arrays")
    n = source.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    if method == "auto":
        method = "brute" if queries.shape[0] * n <= _BRUTE_PAIR_LIMIT else "kdtree"
    if method == "brute":
        idx = _knn_brute(queries, source, k)
    elif method == "kdtree":
        idx = _knn_kdtree(queries, source, k)
    else:
        raise ValueError(f"unknown knn method '{method}'")
    return NeighborIndex(idx)


def self_knn(cloud: PointCloud, k, method="auto") -> NeighborIndex:
    """Neighborhoods of a cloud over itself; row i always contains i."""
    return knn(cloud.positions, cloud.positions, k, method=method)


def random_downsample(points: PointCloud, ratio, rng: RngState):
    """Keep ceil(N * ratio) distinct uniformly chosen points.

    Returns (subsampled cloud, kept indices); deterministic given rng state.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"keep ratio must be in (0, 1], got {ratio}")
    n = points.n
    keep = int(np.ceil(n * ratio))
    if keep >= n:
        kept = np.arange(n, dtype=np.int64)
    else:
        kept = np.sort(rng.choice(n, size=keep, replace=False)).astype(np.int64)
    return points.select(kept), kept


def nn_upsample_map(coarse, fine):
    """Map each fine point to the index of its nearest coarse point."""
    coarse = np.asarray(coarse, dtype=np.float64)
    fine = np.asarray(fine, dtype=np.float64)
    if coarse.shape[0] < 1:
        raise ValueError("need at least one coarse point")
    return knn(fine, coarse, 1).indices[:, 0]
