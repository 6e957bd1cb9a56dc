import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seq_quantizer import quantizer as q
from seq_quantizer.errors import PreconditionError, ShapeError
from seq_quantizer.nn import FeatureSet


def exhaustive_optimal_inertia(x, k):
    """Minimum SSE over every labeling of the points into k groups (empty groups allowed)."""
    n = len(x)
    labelings = np.array(list(itertools.product(range(k), repeat=n)), dtype=np.int64)
    sq = (x * x).sum(axis=1)
    total = np.zeros(len(labelings))
    for j in range(k):
        mask = (labelings == j).astype(np.float64)
        cnt = mask.sum(axis=1)
        s = mask @ x
        ss = mask @ sq
        with np.errstate(invalid="ignore", divide="ignore"):
            part = ss - np.where(cnt > 0, (s * s).sum(axis=1) / cnt, 0.0)
        total += part
    return total.min()


def brute_force_nearest(x, centroids):
    """Direct-difference scan; first minimum wins."""
    out = []
    for row in x:
        best, best_d = 0, np.inf
        for j, c in enumerate(centroids):
            d = float(np.sum((row - c) ** 2))
            if d < best_d:
                best, best_d = j, d
        out.append(best)
    return np.array(out)


def blobs(n_classes=10, per=30, d=2, spread=0.05, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.stack([np.cos(np.arange(n_classes) * 2 * np.pi / n_classes), np.sin(np.arange(n_classes) * 2 * np.pi / n_classes)], 1) * 10
    if d > 2:
        centers = np.hstack([centers, np.zeros((n_classes, d - 2))])
    y = np.repeat(np.arange(n_classes), per)
    x = centers[y] + rng.normal(scale=spread, size=(len(y), d))
    return FeatureSet(x, y)


class TestKmeansFit:
    def test_four_points(self):
        x = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
        res = q.kmeans_fit(FeatureSet(x), q.KmeansConfig(K=2, seed=0))
        got = sorted(map(tuple, res.centroids))
        assert got == [(0.0, 0.5), (10.0, 0.5)]
        assert res.inertia == pytest.approx(1.0)
        assert exhaustive_optimal_inertia(x, 2) == pytest.approx(1.0)

    def test_k_equals_n(self):
        x = np.random.default_rng(0).normal(size=(7, 3))
        res = q.kmeans_fit(FeatureSet(x), q.KmeansConfig(K=7))
        assert res.inertia == 0.0
        assert sorted(res.assignments) == list(range(7))

    def test_k_one_is_mean(self):
        x = np.random.default_rng(1).normal(size=(50, 4))
        res = q.kmeans_fit(FeatureSet(x), q.KmeansConfig(K=1))
        np.testing.assert_allclose(res.centroids[0], x.mean(axis=0), atol=1e-12)

    def test_k_greater_than_n(self):
        with pytest.raises(PreconditionError):
            q.kmeans_fit(FeatureSet(np.zeros((3, 2))), q.KmeansConfig(K=4))

    def test_identical_points_warn(self):
        with pytest.warns(RuntimeWarning, match="empty cluster"):
            res = q.kmeans_fit(FeatureSet(np.ones((5, 2))), q.KmeansConfig(K=3, init="forgy"))
        assert res.inertia == 0.0

    @pytest.mark.parametrize("init", ["kmeanspp", "forgy"])
    def test_deterministic_given_seed(self, init):
        x = np.random.default_rng(2).normal(size=(200, 5))
        a = q.kmeans_fit(FeatureSet(x), q.KmeansConfig(K=6, init=init, seed=4))
        b = q.kmeans_fit(FeatureSet(x), q.KmeansConfig(K=6, init=init, seed=4))
        assert a.centroids.tobytes() == b.centroids.tobytes()

    def test_empty_cluster_repair_moves_to_farthest_point(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]])
        centroids = np.array([[0.0, 0.0], [50.0, 0.0], [60.0, 0.0]])
        assignments = np.array([0, 0, 0])
        new, counts = q._update(x, assignments, centroids)
        new, repaired = q._repair_empty(x, assignments, new, counts)
        assert repaired
        # mean is (11/3, 0): farthest point is (10, 0), then (0, 0)
        np.testing.assert_array_equal(new[1], [10.0, 0.0])
        np.testing.assert_array_equal(new[2], [0.0, 0.0])

    def test_restarts_keep_best(self):
        x = np.random.default_rng(3).normal(size=(60, 2))
        single = [q.kmeans_fit(FeatureSet(x), q.KmeansConfig(K=5, init="forgy", seed=s)).inertia for s in range(5)]
        multi = q.kmeans_fit(FeatureSet(x), q.KmeansConfig(K=5, init="forgy", seed=0, restarts=5)).inertia
        assert multi <= single[0] + 1e-12


class TestLloydProperties:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("init", ["kmeanspp", "forgy"])
    def test_inertia_non_increasing(self, seed, init):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(300, 4)) + rng.integers(0, 3, size=(300, 1)) * 2.0
        res = q.kmeans_fit(FeatureSet(x), q.KmeansConfig(K=8, init=init, seed=seed))
        for a, b in zip(res.trace, res.trace[1:]):
            assert b <= a * (1 + 1e-9) + 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_fixed_point(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(250, 3))
        res = q.kmeans_fit(FeatureSet(x), q.KmeansConfig(K=7, seed=seed))
        assert res.converged
        for j in range(7):
            members = x[res.assignments == j]
            assert len(members) > 0
            np.testing.assert_allclose(res.centroids[j], members.mean(axis=0), atol=1e-6)
        np.testing.assert_array_equal(res.assignments, brute_force_nearest(x, res.centroids))

    def test_permutation_invariant_inertia(self):
        rng = np.random.default_rng(7)
        x = np.vstack([rng.normal(loc=c, scale=0.1, size=(40, 2)) for c in ((0, 0), (5, 0), (0, 5))])
        perm = rng.permutation(len(x))
        a = q.kmeans_fit(FeatureSet(x), q.KmeansConfig(K=3, seed=0, restarts=5))
        b = q.kmeans_fit(FeatureSet(x[perm]), q.KmeansConfig(K=3, seed=0, restarts=5))
        assert a.inertia == pytest.approx(b.inertia, rel=1e-9)
        assert sorted(np.bincount(a.assignments)) == sorted(np.bincount(b.assignments))

    @pytest.mark.parametrize("seed", range(8))
    def test_bounded_lloyd_matches_naive_lloyd(self, seed):
        rng = np.random.default_rng(300 + seed)
        x = np.concatenate([rng.normal(loc=rng.normal(scale=4, size=5), size=(80, 5)) for _ in range(6)])
        init = q._init_kmeanspp(x, 9, np.random.default_rng(seed))
        c, a = init.copy(), None
        for _ in range(500):
            new_a = brute_force_nearest(x, c)
            if a is not None and np.array_equal(new_a, a):
                break
            a = new_a
            c = np.stack([x[a == j].mean(axis=0) for j in range(9)])
        res = q._lloyd(x, init, max_iter=500, tol=0.0)
        assert res.converged
        np.testing.assert_array_equal(res.assignments, a)
        np.testing.assert_allclose(res.centroids, c, atol=1e-10)
        assert res.trace[-1] == pytest.approx(res.inertia, rel=1e-9)

    def test_small_instance_global_optimality(self):
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(4, 13))
            d = int(rng.integers(1, 3))
            k = int(rng.integers(2, 4))
            x = rng.normal(size=(n, d))
            best = exhaustive_optimal_inertia(x, k)
            got = q.kmeans_fit(FeatureSet(x), q.KmeansConfig(K=k, seed=seed, restarts=10)).inertia
            hits += got <= best * (1 + 1e-9) + 1e-12
        assert hits >= 95


class TestAssign:
    def test_tie_goes_to_smallest_index(self):
        centroids = np.array([[9.0, 9.0], [8.0, 8.0], [-1.0, 0.0], [7.0, 7.0], [6.0, 6.0], [1.0, 0.0]])
        assert q.assign(np.array([[0.0, 0.0]]), centroids)[0] == 2

    def test_point_on_centroid(self):
        c = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(q.assign(c, c), np.arange(5))

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(1)
        x, c = rng.normal(size=(50, 4)), rng.normal(size=(6, 4))
        np.testing.assert_array_equal(q.assign(x, c), brute_force_nearest(x, c))

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            q.assign(np.zeros((2, 3)), np.zeros((2, 4)))


class TestLabeling:
    def test_majority(self):
        labels, hist = q.label_clusters([0, 0, 0], [1, 1, 7], 1)
        assert labels[0] == 1
        assert hist[0, 1] == 2 and hist[0, 7] == 1

    def test_tie_smallest_class(self):
        labels, _ = q.label_clusters([0, 0], [9, 3], 1)
        assert labels[0] == 3

    def test_empty_cluster_takes_nearest_label(self):
        centroids = np.array([[0.0], [10.0], [9.0]])
        labels, hist = q.label_clusters([0, 1], [4, 6], 3, centroids=centroids)
        assert labels[2] == 6
        assert hist[2].sum() == 0

    def test_separated_blobs_perfect(self):
        fs = blobs()
        cb, _ = q.fit_codebook(fs, q.KmeansConfig(K=10, seed=0, restarts=5))
        assert len(set(cb.cluster_labels.tolist())) == 10
        assert q.clustering_accuracy(cb, fs) == 1.0

    def test_codebook_label_is_histogram_argmax(self):
        rng = np.random.default_rng(0)
        fs = FeatureSet(rng.normal(size=(300, 3)), rng.integers(0, 10, size=300))
        cb, _ = q.fit_codebook(fs, q.KmeansConfig(K=12))
        np.testing.assert_array_equal(cb.cluster_labels, cb.histograms.argmax(axis=1))
        assert not cb.empty.any()


class TestClassify:
    def test_on_centroid(self):
        c = np.arange(10, dtype=float)[:, None] * np.ones((1, 2))
        cb = q.Codebook(c, np.arange(10)[::-1], np.zeros((10, 10)))
        assert q.classify(c[7], cb) == cb.cluster_labels[7]

    def test_1d(self):
        cb = q.Codebook(np.array([[0.0], [10.0]]), np.array([0, 1]), np.zeros((2, 10)))
        assert q.classify(np.array([2.0]), cb) == 0

    def test_k_equals_n_is_1nn(self):
        rng = np.random.default_rng(0)
        train = FeatureSet(rng.normal(size=(200, 5)), rng.integers(0, 10, size=200))
        cb, _ = q.fit_codebook(train, q.KmeansConfig(K=200))
        queries = rng.normal(size=(200, 5))
        nn_idx = brute_force_nearest(queries, train.matrix)
        np.testing.assert_array_equal(q.classify(queries, cb), train.labels[nn_idx])

    def test_dim_mismatch(self):
        cb = q.Codebook(np.zeros((2, 3)), np.array([0, 1]), np.zeros((2, 10)))
        with pytest.raises(ShapeError):
            q.classify(np.zeros(4), cb)


class TestClusteringAccuracy:
    def test_pure(self):
        fs = FeatureSet(np.array([[0.0], [0.1], [5.0]]), np.array([2, 2, 4]))
        cb = q.Codebook(np.array([[0.05], [5.0]]), np.array([2, 4]), np.zeros((2, 10)))
        assert q.clustering_accuracy(cb, fs) == 1.0

    def test_two_thirds(self):
        fs = FeatureSet(np.zeros((3, 2)), np.array([1, 1, 2]))
        cb, _ = q.fit_codebook(fs, q.KmeansConfig(K=1))
        assert q.clustering_accuracy(cb, fs) == pytest.approx(2 / 3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8))
    def test_bounded(self, seed, k):
        rng = np.random.default_rng(seed)
        fs = FeatureSet(rng.normal(size=(40, 2)), rng.integers(0, 10, size=40))
        cb, _ = q.fit_codebook(fs, q.KmeansConfig(K=k, seed=seed))
        assert 0.0 <= q.clustering_accuracy(cb, fs) <= 1.0


def exhaustive_select(fs, P_E, epsilon, grid, cfg, eval_fs=None):
    qualifying = []
    for k in grid:
        cb, _ = q.fit_codebook(fs, q.KmeansConfig(K=k, init=cfg.init, seed=cfg.seed, restarts=cfg.restarts))
        p = q.clustering_accuracy(cb, eval_fs if eval_fs is not None else fs)
        if p > P_E - epsilon:
            qualifying.append(k)
    return min(qualifying) if qualifying else None


class TestSelectK:
    def test_vacuous_epsilon_picks_first(self):
        fs = blobs(per=5)
        k, report = q.select_k(fs, 0.98, 0.9999, [3, 10])
        assert k == 3
        assert len(report.records) == 1

    def test_ten_blobs(self):
        fs = blobs(per=20, d=3)
        cfg = q.KmeansConfig(seed=0, restarts=5)
        k, report = q.select_k(fs, 1.0, 0.005, [2, 5, 10, 20], cfg)
        assert k == 10
        assert [r.K for r in report.records] == [2, 5, 10]
        assert all(r.P_Q_train < 0.995 for r in report.records[:2])

    def test_not_found(self):
        rng = np.random.default_rng(0)
        fs = FeatureSet(rng.normal(size=(100, 2)), rng.integers(0, 10, size=100))
        k, report = q.select_k(fs, 1.0, 0.0, [1, 2, 3])
        assert k is None
        assert len(report.records) == 3

    def test_grid_validation(self):
        fs = blobs(per=3)
        with pytest.raises(ValueError):
            q.select_k(fs, 0.9, 0.01, [5, 5])
        with pytest.raises(ValueError):
            q.select_k(fs, 0.9, 1.0, [5])

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_exhaustive_scan(self, seed):
        rng = np.random.default_rng(seed)
        fs = blobs(n_classes=int(rng.integers(3, 8)), per=15, spread=float(rng.uniform(0.5, 4.0)), seed=seed)
        grid = sorted(rng.choice(np.arange(1, 30), size=5, replace=False).tolist())
        cfg = q.KmeansConfig(seed=seed)
        eps = float(rng.uniform(0, 0.3))
        k, _ = q.select_k(fs, 1.0, eps, grid, cfg)
        assert k == exhaustive_select(fs, 1.0, eps, grid, cfg)


class TestSweep:
    def test_records(self):
        fs = blobs(per=10)
        report = q.sweep(fs, [5, 10], q.KmeansConfig(seed=1, restarts=3), test_fs=fs, P_E=1.0)
        assert [r.K for r in report.records] == [5, 10]
        assert report.records[1].acc_test == 1.0
        assert report.records[0].inertia > report.records[1].inertia
