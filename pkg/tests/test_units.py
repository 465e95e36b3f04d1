"""Acoustic unit discovery: deterministic k-means and target assignment."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from accentssl.errors import DataError
from accentssl.units import ClusterCodebook, assign, fit_kmeans, inertia


def reference_lloyd(points, C, max_iters, seed):
    """Independent brute-force Lloyd oracle: k-means++ init drawn from the
    same seed sequence, then plain mean/assign iterations (no empty-cluster
    rescue; restarts below avoid degenerate inits)."""
    rng = np.random.default_rng(seed)
    n = len(points)
    centroids = np.empty((C, points.shape[1]))
    centroids[0] = points[int(rng.integers(0, n))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, C):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            r = rng.random() * total
            idx = min(int(np.searchsorted(np.cumsum(d2), r)), n - 1)
        centroids[i] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    for _ in range(max_iters):
        dists = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        new = centroids.copy()
        for c in range(C):
            if np.any(labels == c):
                new[c] = points[labels == c].mean(axis=0)
        if np.allclose(new, centroids):
            break
        centroids = new
    dists = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return dists.min(axis=1).sum()


class TestFitKmeans:
    def test_single_cluster_is_mean(self, rng):
        pts = rng.normal(size=(30, 3))
        cb = fit_kmeans(pts, C=1, seed=0)
        assert np.allclose(cb.centroids[0], pts.mean(axis=0))

    def test_perfect_fit(self, rng):
        pts = rng.normal(size=(4, 2)) * 10
        cb = fit_kmeans(pts, C=4, seed=0)
        assert inertia(cb, pts) == pytest.approx(0.0, abs=1e-18)
        # centroids are the points themselves, in some order
        for p in pts:
            assert min(np.sum((cb.centroids - p) ** 2, axis=1)) < 1e-18

    def test_matches_reference_lloyd_restarts(self, rng):
        # best-of-50-restarts of our fit vs best-of-50 of the oracle: both
        # local optimizers should reach the same best inertia on 20 points
        pts = rng.normal(size=(20, 2))
        ours = min(
            inertia(fit_kmeans(pts, C=3, max_iters=50, seed=s), pts)
            for s in range(50)
        )
        best_ref = min(reference_lloyd(pts, 3, 50, s) for s in range(50))
        assert abs(ours - best_ref) <= 1e-9

    def test_deterministic(self, rng):
        pts = rng.normal(size=(50, 4))
        a = fit_kmeans(pts, C=5, seed=7)
        b = fit_kmeans(pts, C=5, seed=7)
        assert np.array_equal(a.centroids, b.centroids)

    def test_too_few_points(self, rng):
        with pytest.raises(DataError):
            fit_kmeans(rng.normal(size=(2, 3)), C=5)

    def test_no_empty_clusters(self, rng):
        # heavy duplication invites empty clusters; the rescue must fill them
        pts = np.concatenate([np.zeros((40, 2)), rng.normal(size=(5, 2))])
        cb = fit_kmeans(pts, C=4, seed=1)
        labels = assign(cb, pts)
        assert set(labels.tolist()) == set(range(4))

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=15, deadline=None)
    def test_inertia_no_worse_than_one_more_lloyd_step(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(25, 2))
        cb = fit_kmeans(pts, C=3, max_iters=100, seed=0)
        before = inertia(cb, pts)
        # one extra Lloyd step from the fixpoint must not improve
        labels = assign(cb, pts)
        new = cb.centroids.copy()
        for c in range(3):
            if np.any(labels == c):
                new[c] = pts[labels == c].mean(axis=0)
        after = inertia(ClusterCodebook(new, "raw", 0), pts)
        assert after >= before - 1e-9


class TestAssign:
    def test_exact_centroid(self):
        cb = ClusterCodebook(np.array([[0.0, 0], [1, 1], [5, 5], [9, 9]]), "raw", 0)
        assert assign(cb, np.array([[5.0, 5.0]]))[0] == 2

    def test_tie_breaks_to_lowest_index(self):
        cb = ClusterCodebook(np.array([[-1.0], [3.0], [1.0], [-3.0]]), "raw", 0)
        # 0.0 is equidistant from -1 and 1 (indices 0 and 2)
        assert assign(cb, np.array([[0.0]]))[0] == 0

    def test_matches_brute_force(self, rng):
        cb = ClusterCodebook(rng.normal(size=(8, 3)), "raw", 0)
        pts = rng.normal(size=(100, 3))
        got = assign(cb, pts)
        for i, p in enumerate(pts):
            d = [np.sum((c - p) ** 2) for c in cb.centroids]
            assert got[i] == int(np.argmin(d))

    def test_dim_mismatch(self, rng):
        cb = ClusterCodebook(rng.normal(size=(4, 3)), "raw", 0)
        with pytest.raises(DataError):
            assign(cb, rng.normal(size=(5, 2)))

    @given(arrays(np.float64, (12, 2), elements=st.floats(-5, 5)))
    @settings(max_examples=25, deadline=None)
    def test_assignment_is_row_independent(self, pts):
        cb = ClusterCodebook(np.array([[0.0, 0], [2, 2], [-2, 1]]), "raw", 0)
        whole = assign(cb, pts)
        rows = np.array([assign(cb, pts[i:i + 1])[0] for i in range(len(pts))])
        assert np.array_equal(whole, rows)


class TestCodebook:
    def test_nonfinite_rejected(self):
        with pytest.raises(DataError):
            ClusterCodebook(np.array([[np.nan, 0.0]]), "raw", 0)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            ClusterCodebook(np.zeros((0, 3)), "raw", 0)
