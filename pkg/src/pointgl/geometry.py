"""Farthest point sampling, k-nearest-neighbour search and row gathers.

Squared distances are always computed as ``dx*dx + dy*dy + dz*dz`` in that
order so that independent implementations agree to the last bit, and every
distance tie is broken by the smaller index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class DegenerateCloudError(ValueError):
    pass


@dataclass
class PointCloud:
    coords: np.ndarray
    feats: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be N x 3, got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords contain non-finite values")
        if self.feats is not None:
            self.feats = np.asarray(self.feats)
            if self.feats.ndim == 1:
                self.feats = self.feats[:, None]
            if self.feats.shape[0] != self.coords.shape[0]:
                raise ValueError(
                    f"feats have {self.feats.shape[0]} rows for {self.coords.shape[0]} points"
                )

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def __len__(self) -> int:
        return self.n


@dataclass
class Grouping:
    """Sampled centers and their neighbour rows, both indexing the support cloud."""

    sample_idx: np.ndarray
    neighbor_idx: np.ndarray


def sq_dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared distances from every row of ``points`` (..., 3) to ``q`` (3,) or broadcastable."""
    dx = points[..., 0] - q[..., 0]
    dy = points[..., 1] - q[..., 1]
    dz = points[..., 2] - q[..., 2]
    return dx * dx + dy * dy + dz * dz


def lexicographic_first(coords: np.ndarray) -> int:
    """Index of the smallest (x, y, z) triple; ties go to the smaller index."""
    return int(np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))[0])


def farthest_point_sample(coords: np.ndarray, m: int, seed_rule: str = "lexicographic") -> np.ndarray:
    """Greedy max-min subset of ``m`` indices."""
    coords = np.asarray(coords)
    n = coords.shape[0]
    if m < 1 or m > n:
        raise ValueError(f"cannot sample {m} of {n} points")
    if seed_rule == "lexicographic":
        first = lexicographic_first(coords)
    elif seed_rule == "index0":
        first = 0
    else:
        raise ValueError(f"unknown seed rule {seed_rule!r}")
    xs, ys, zs = coords[:, 0].copy(), coords[:, 1].copy(), coords[:, 2].copy()
    out = np.empty(m, dtype=np.int64)
    out[0] = first
    mind = np.full(n, np.inf, dtype=coords.dtype)
    cur = first
    for i in range(1, m):
        dx = xs - xs[cur]
        dy = ys - ys[cur]
        dz = zs - zs[cur]
        np.minimum(mind, dx * dx + dy * dy + dz * dz, out=mind)
        cur = int(np.argmax(mind))
        out[i] = cur
    return out


def _knn_rows_exact(d: np.ndarray, k: int) -> np.ndarray:
    """Per-row k smallest of ``d`` ordered by (distance, index)."""
    n = d.shape[1]
    if k == n:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(d, part, axis=1).max(axis=1)
    # rows where the boundary distance is shared by more than the chosen ones
    # need the full stable sort so ties resolve by index
    n_le = (d <= kth[:, None]).sum(axis=1)
    out = np.empty((d.shape[0], k), dtype=np.int64)
    ok = n_le == k
    if ok.any():
        p = part[ok]
        pd = np.take_along_axis(d[ok], p, axis=1)
        order = np.lexsort((p, pd), axis=1)
        out[ok] = np.take_along_axis(p, order, axis=1)
    if (~ok).any():
        out[~ok] = np.argsort(d[~ok], axis=1, kind="stable")[:, :k]
    return out


def knn(query: np.ndarray, support: np.ndarray, k: int, method: str = "brute",
        chunk: int = 256) -> np.ndarray:
    """Indices of the ``k`` nearest support points per query, sorted by (distance, index)."""
    query = np.asarray(query)
    support = np.asarray(support)
    n = support.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"cannot take {k} neighbours from {n} support points")
    if method == "kdtree":
        return _knn_kdtree(query, support, k)
    if method != "brute":
        raise ValueError(f"unknown knn method {method!r}")
    out = np.empty((query.shape[0], k), dtype=np.int64)
    for s in range(0, query.shape[0], chunk):
        q = query[s:s + chunk]
        d = sq_dist(support[None, :, :], q[:, None, :])
        out[s:s + chunk] = _knn_rows_exact(d, k)
    return out


def _knn_kdtree(query: np.ndarray, support: np.ndarray, k: int) -> np.ndarray:
    # the tree proposes candidates; exact distances and index tie-breaks decide
    n = support.shape[0]
    tree = cKDTree(support)
    extra = min(n, k + 8)
    _, cand = tree.query(query, k=extra)
    cand = np.asarray(cand).reshape(query.shape[0], extra)
    out = np.empty((query.shape[0], k), dtype=np.int64)
    for i, q in enumerate(query):
        c = cand[i]
        d = sq_dist(support[c], q)
        order = np.lexsort((c, d))
        if extra < n:
            kth = d[order[k - 1]]
            # a point outside the candidate set could tie or beat the boundary
            if not kth < d[order[-1]]:
                out[i] = knn(q[None], support, k)[0]
                continue
        out[i] = c[order[:k]]
    return out


def gather(feats: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Row copy by index: (N, D) with idx (M,) or (M, K) -> (M, D) or (M, K, D)."""
    feats = np.asarray(feats)
    idx = np.asarray(idx)
    n = feats.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for {n} rows")
    return feats[idx]


def normalize_unit_sphere(cloud: PointCloud | np.ndarray) -> PointCloud:
    """Translate to zero centroid and scale so the farthest point has norm 1."""
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(np.asarray(cloud))
    c = cloud.coords
    if c.shape[0] == 0:
        raise DegenerateCloudError("empty cloud")
    centered = c - c.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1)).max()
    if not radius > 0:
        raise DegenerateCloudError("all points are identical")
    return PointCloud(centered / radius, None if cloud.feats is None else cloud.feats.copy())


def group(coords: np.ndarray, m: int, k: int, seed_rule: str = "lexicographic",
          method: str = "brute") -> Grouping:
    """FPS to ``m`` centers, then kNN of each center against all ``coords``."""
    sample_idx = farthest_point_sample(coords, m, seed_rule)
    neighbor_idx = knn(coords[sample_idx], coords, k, method=method)
    return Grouping(sample_idx, neighbor_idx)
