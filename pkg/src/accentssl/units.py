"""Acoustic unit discovery: a deterministic k-means codebook and frame-level
target assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class ClusterCodebook:
    centroids: np.ndarray  # (C, d_feat) float64
    feature_source: str  # e.g. "frontend" or "layer:2"
    fit_seed: int

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise DataError("codebook centroids must be a non-empty (C, d) matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise DataError("codebook centroids must be finite")

    @property
    def n_clusters(self) -> int:
        return int(self.centroids.shape[0])


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, C) squared Euclidean distances
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff)


def _kmeanspp_init(points: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((C, points.shape[1]))
    centroids[0] = points[int(rng.integers(0, n))]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, C):
        total = float(d2.sum())
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
        centroids[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def fit_kmeans(
    features: np.ndarray, C: int, max_iters: int = 50, seed: int = 0
) -> ClusterCodebook:
    """Lloyd's algorithm with k-means++ init, run to assignment fixpoint.

    Empty clusters are re-seeded to the globally worst-fit point. Fully
    deterministic given the seed.
    """
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2:
        points = points.reshape(len(points), -1)
    n = points.shape[0]
    if n < C:
        raise DataError(f"need at least C={C} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, C, rng)
    prev_assign = None
    for _ in range(max_iters):
        d2 = _sq_dists(points, centroids)
        assign_idx = np.argmin(d2, axis=1)
        # re-seed empty clusters to the point farthest from its centroid
        for c in range(C):
            if not np.any(assign_idx == c):
                worst = int(np.argmax(d2[np.arange(n), assign_idx]))
                centroids[c] = points[worst]
                assign_idx[worst] = c
                d2 = _sq_dists(points, centroids)
                assign_idx = np.argmin(d2, axis=1)
        if prev_assign is not None and np.array_equal(assign_idx, prev_assign):
            break
        prev_assign = assign_idx
        for c in range(C):
            members = points[assign_idx == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return ClusterCodebook(centroids=centroids, feature_source="raw", fit_seed=seed)


def inertia(cb: ClusterCodebook, features: np.ndarray) -> float:
    points = np.asarray(features, dtype=np.float64)
    d2 = _sq_dists(points, cb.centroids)
    return float(np.min(d2, axis=1).sum())


def assign(cb: ClusterCodebook, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid targets; ties go to the lowest cluster index."""
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != cb.centroids.shape[1]:
        raise DataError(
            f"feature dim {points.shape} does not match centroids {cb.centroids.shape}"
        )
    return np.argmin(_sq_dists(points, cb.centroids), axis=1).astype(np.int64)
