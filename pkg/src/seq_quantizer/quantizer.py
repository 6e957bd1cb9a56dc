"""k-means codebook over embedded features, histogram labeling and the K-selection rule."""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError, ShapeError
from .nn import NUM_CLASSES, FeatureSet

log = logging.getLogger(__name__)


@dataclass
class KmeansConfig:
    K: int = 10
    init: str = "kmeanspp"
    max_iter: int = 300
    tol: float = 1e-6
    seed: int = 0
    restarts: int = 1
    refine: bool = True  # Hartigan single-point moves after Lloyd converges
    refine_rounds: int = 5  # cap on Hartigan/Lloyd alternations

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.init not in ("kmeanspp", "forgy"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.restarts < 1 or self.max_iter < 1:
            raise ValueError("restarts and max_iter must be positive")


@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    trace: list = field(default_factory=list)  # inertia after every assignment step
    n_iter: int = 0
    converged: bool = False


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, d)
    cluster_labels: np.ndarray  # (K,)
    histograms: np.ndarray  # (K, num_classes) counts

    @property
    def K(self) -> int:
        return len(self.centroids)

    @property
    def empty(self) -> np.ndarray:
        return self.histograms.sum(axis=1) == 0


@dataclass
class KRecord:
    K: int
    P_Q_train: float
    acc_test: float | None
    inertia: float
    seed: int


@dataclass
class QuantizerReport:
    P_Q: float | None = None
    P_E: float | None = None
    inertia: float | None = None
    records: list = field(default_factory=list)


def _matrix(fs) -> np.ndarray:
    return fs.matrix if isinstance(fs, FeatureSet) else np.asarray(fs, dtype=np.float64)


def squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ centroids.T) + (centroids * centroids).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def assign(fs, centroids, chunk: int = 8192) -> np.ndarray:
    """Index of the nearest centroid (squared Euclidean); ties go to the smallest index."""
    x = np.atleast_2d(_matrix(fs))
    centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    if x.shape[1] != centroids.shape[1]:
        raise ShapeError(f"features have dim {x.shape[1]}, centroids {centroids.shape[1]}")
    # |x|^2 is constant per row, so the argmin only needs |c|^2 - 2 x.c
    c_sq = (centroids * centroids).sum(axis=1)
    out = np.empty(len(x), dtype=np.int64)
    for i in range(0, len(x), chunk):
        out[i:i + chunk] = (c_sq[None, :] - 2.0 * (x[i:i + chunk] @ centroids.T)).argmin(axis=1)
    return out


def inertia_of(x, centroids, assignments) -> float:
    diff = x - centroids[assignments]
    return float(np.einsum("ij,ij->", diff, diff))


def _init_kmeanspp(x, k, rng):
    n = len(x)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = squared_distances(x, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = min(int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right")), n - 1)
        centroids[j] = x[idx]
        closest = np.minimum(closest, squared_distances(x, centroids[j:j + 1])[:, 0])
    return centroids


def _init_forgy(x, k, rng):
    return x[rng.choice(len(x), size=k, replace=False)].copy()


def _segment_sums(x, idx, k):
    """Per-cluster row sums; one bincount per column keeps the summation order fixed."""
    return np.stack([np.bincount(idx, weights=x[:, j], minlength=k) for j in range(x.shape[1])], axis=1)


def _update(x, assignments, centroids):
    k = len(centroids)
    counts = np.bincount(assignments, minlength=k)
    sums = _segment_sums(x, assignments, k)
    new = centroids.copy()
    nonempty = counts > 0
    new[nonempty] = sums[nonempty] / counts[nonempty, None]
    return new, counts


def _repair_empty(x, assignments, centroids, counts):
    """Move each empty centroid onto the point currently farthest from its own centroid."""
    empty = np.flatnonzero(counts == 0)
    if len(empty) == 0:
        return centroids, False
    dist = ((x - centroids[assignments]) ** 2).sum(axis=1)
    order = np.argsort(-dist, kind="stable")
    repaired = False
    for j, idx in zip(empty, order):
        if dist[idx] <= 0:
            break
        centroids[j] = x[idx]
        repaired = True
    if not repaired:
        warnings.warn(f"{len(empty)} empty cluster(s) cannot be repaired: data has fewer distinct points than K", RuntimeWarning, stacklevel=3)
    return centroids, repaired


def _hartigan_pass(x, centroids, assignments):
    """Sequentially move single points whenever that lowers the SSE.

    Moving x from cluster a (size n_a) to b (size n_b) changes the SSE by
    n_b/(n_b+1)*|x-c_b|^2 - n_a/(n_a-1)*|x-c_a|^2. Centroids are updated
    incrementally. Returns the number of moves.
    """
    k = len(centroids)
    counts = np.bincount(assignments, minlength=k).astype(np.float64)
    d = squared_distances(x, centroids)
    own = d[np.arange(len(x)), assignments]
    with np.errstate(divide="ignore"):
        removal = np.where(counts[assignments] > 1, counts[assignments] / (counts[assignments] - 1), 0.0) * own
    insertion = d * (counts / (counts + 1))[None, :]
    insertion[np.arange(len(x)), assignments] = np.inf
    candidates = np.flatnonzero(insertion.min(axis=1) < removal)
    moves = 0
    for i in candidates:
        a = assignments[i]
        if counts[a] <= 1:
            continue
        xi = x[i]
        dist = ((centroids - xi) ** 2).sum(axis=1)
        gain = counts[a] / (counts[a] - 1) * dist[a]
        cost = counts / (counts + 1) * dist
        cost[a] = np.inf
        b = int(cost.argmin())
        if cost[b] >= gain * (1 - 1e-12):
            continue
        centroids[a] = (centroids[a] * counts[a] - xi) / (counts[a] - 1)
        centroids[b] = (centroids[b] * counts[b] + xi) / (counts[b] + 1)
        counts[a] -= 1
        counts[b] += 1
        assignments[i] = b
        moves += 1
    return moves


def _nearest_two(x, x_sq, centroids, chunk: int = 8192):
    """Nearest centroid (ties to the smallest index) plus nearest and second-nearest distances."""
    n, k = len(x), len(centroids)
    c_sq = (centroids * centroids).sum(axis=1)
    nearest = np.empty(n, dtype=np.int64)
    d1 = np.empty(n)
    d2 = np.full(n, np.inf)
    for i in range(0, n, chunk):
        d = np.maximum(x_sq[i:i + chunk, None] - 2.0 * (x[i:i + chunk] @ centroids.T) + c_sq[None, :], 0.0)
        j = d.argmin(axis=1)
        rows = np.arange(len(j))
        nearest[i:i + chunk] = j
        d1[i:i + chunk] = d[rows, j]
        if k > 1:
            d[rows, j] = np.inf
            d2[i:i + chunk] = d.min(axis=1)
    return nearest, np.sqrt(d1), np.sqrt(d2)


class _BoundedLloyd:
    """Lloyd iteration with Hamerly's distance bounds.

    ``upper[i]`` bounds the distance from point i to its own centroid and
    ``lower[i]`` the distance to every other centroid. A point whose upper bound
    stays below max(lower, half the gap from its centroid to the closest other
    one) cannot change cluster, so only the remaining points are re-scanned.
    The partition sequence is the one plain Lloyd produces. Cluster sums are
    maintained incrementally, which also gives the inertia in O(K d).
    """

    def __init__(self, x, centroids):
        self.x = x
        self.k = len(centroids)
        self.x_sq = (x * x).sum(axis=1)
        self.total_sq = float(self.x_sq.sum())
        # bound slack covering rounding in the expanded distance formula
        self.margin = 1e-7 * (1.0 + float(np.sqrt(self.x_sq.max())))
        self.centroids = centroids.copy()
        self.full_assign()

    def full_assign(self):
        self.assignments, self.upper, self.lower = _nearest_two(self.x, self.x_sq, self.centroids)
        self.counts = np.bincount(self.assignments, minlength=self.k)
        self.sums = _segment_sums(self.x, self.assignments, self.k)

    def inertia(self) -> float:
        c = self.centroids
        value = self.total_sq - 2.0 * np.einsum("kd,kd->", c, self.sums) + float(self.counts @ (c * c).sum(axis=1))
        return max(value, 0.0)

    def move_centroids(self):
        """Replace centroids by member means; returns (per-centroid shift, repaired)."""
        new = self.centroids.copy()
        nonempty = self.counts > 0
        new[nonempty] = self.sums[nonempty] / self.counts[nonempty, None]
        new, repaired = _repair_empty(self.x, self.assignments, new, self.counts)
        shift = np.sqrt(((new - self.centroids) ** 2).sum(axis=1))
        self.centroids = new
        return shift, repaired

    def reassign(self, shift) -> int:
        """Nearest-centroid step after the centroids moved by ``shift``; returns the number of moves."""
        x, a, k = self.x, self.assignments, self.k
        if k == 1:
            return 0
        self.upper += shift[a]
        top = np.argsort(shift, kind="stable")[-2:]
        self.lower -= np.where(a == top[1], shift[top[0]], shift[top[1]])
        gaps = np.sqrt(squared_distances(self.centroids, self.centroids))
        np.fill_diagonal(gaps, np.inf)
        bound = np.maximum(self.lower, 0.5 * gaps.min(axis=1)[a])
        cand = np.flatnonzero(self.upper + self.margin >= bound)
        if len(cand):
            diff = x[cand] - self.centroids[a[cand]]
            self.upper[cand] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            cand = cand[self.upper[cand] + self.margin >= bound[cand]]
        if len(cand) == 0:
            return 0
        nearest, d1, d2 = _nearest_two(x[cand], self.x_sq[cand], self.centroids)
        self.upper[cand], self.lower[cand] = d1, d2
        changed = nearest != a[cand]
        moved = cand[changed]
        if len(moved) == 0:
            return 0
        old, new = a[moved], nearest[changed]
        a[moved] = new
        if len(moved) > len(x) // 10:
            self.counts = np.bincount(a, minlength=k)
            self.sums = _segment_sums(x, a, k)
        else:
            rows = x[moved]
            self.counts += np.bincount(new, minlength=k) - np.bincount(old, minlength=k)
            self.sums += _segment_sums(rows, new, k) - _segment_sums(rows, old, k)
        return len(moved)


def _lloyd(x, centroids, max_iter, tol):
    state = _BoundedLloyd(x, centroids)
    trace = [state.inertia()]
    converged = False
    n_iter = 1
    while True:
        shift, repaired = state.move_centroids()
        if n_iter >= max_iter:
            state.full_assign()
            break
        n_iter += 1
        if repaired:
            state.full_assign()
            trace.append(state.inertia())
            continue
        moves = state.reassign(shift)
        trace.append(state.inertia())
        if moves == 0 or shift.max() < tol:
            converged = True
            break
    return KmeansResult(state.centroids, state.assignments, inertia_of(x, state.centroids, state.assignments), trace, n_iter, converged)


def _refine(x, result, cfg):
    """Alternate Hartigan passes and Lloyd until neither changes the partition (at most refine_rounds times)."""
    trace, n_iter = list(result.trace), result.n_iter
    for _ in range(cfg.refine_rounds):
        assignments = result.assignments.copy()
        centroids = result.centroids.copy()
        if _hartigan_pass(x, centroids, assignments) == 0:
            break
        # exact means for the moved partition, then Lloyd from there
        centroids, _ = _update(x, assignments, centroids)
        trace.append(inertia_of(x, centroids, assignments))
        result = _lloyd(x, centroids, cfg.max_iter, cfg.tol)
        trace += result.trace
        n_iter += result.n_iter
    result.trace, result.n_iter = trace, n_iter
    return result


def kmeans_fit(fs, cfg: KmeansConfig) -> KmeansResult:
    """Lloyd's algorithm; the best-inertia restart is returned."""
    x = _matrix(fs)
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    if cfg.K > len(x):
        raise PreconditionError(f"K={cfg.K} exceeds the number of points N={len(x)}")
    rng = np.random.default_rng(cfg.seed)
    init = _init_kmeanspp if cfg.init == "kmeanspp" else _init_forgy
    best = None
    for _ in range(cfg.restarts):
        result = _lloyd(x, init(x, cfg.K, rng), cfg.max_iter, cfg.tol)
        if cfg.refine:
            result = _refine(x, result, cfg)
        if best is None or result.inertia < best.inertia:
            best = result
    if not best.converged:
        log.warning("k-means K=%d stopped at max_iter=%d before converging", cfg.K, cfg.max_iter)
    return best


def label_clusters(assignments, labels, K: int, num_classes: int = NUM_CLASSES, centroids=None):
    """Majority label per cluster (ties to the smallest class) plus the class histograms.

    An empty cluster takes the majority label of the nearest non-empty cluster
    (by centroid distance when ``centroids`` is given, otherwise by index).
    Empty clusters stay recognisable through their all-zero histogram row.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(assignments) != len(labels):
        raise ShapeError(f"{len(assignments)} assignments for {len(labels)} labels")
    hist = np.zeros((K, num_classes), dtype=np.int64)
    np.add.at(hist, (assignments, labels), 1)
    cluster_labels = hist.argmax(axis=1)
    empty = hist.sum(axis=1) == 0
    if empty.any():
        donors = np.flatnonzero(~empty)
        if len(donors) == 0:
            raise PreconditionError("every cluster is empty")
        for j in np.flatnonzero(empty):
            if centroids is not None:
                c = np.asarray(centroids)
                nearest = donors[((c[donors] - c[j]) ** 2).sum(axis=1).argmin()]
            else:
                nearest = donors[np.abs(donors - j).argmin()]
            cluster_labels[j] = cluster_labels[nearest]
        log.warning("%d empty cluster(s) labelled from their nearest neighbour", int(empty.sum()))
    return cluster_labels, hist


def fit_codebook(fs: FeatureSet, cfg: KmeansConfig, num_classes: int = NUM_CLASSES):
    """k-means plus histogram labeling. Returns ``(codebook, kmeans_result)``."""
    if fs.labels is None:
        raise PreconditionError("labels are required to label clusters")
    result = kmeans_fit(fs, cfg)
    cluster_labels, hist = label_clusters(result.assignments, fs.labels, cfg.K, num_classes, result.centroids)
    return Codebook(result.centroids, cluster_labels, hist), result


def classify(x, cb: Codebook):
    """Label of the nearest centroid; accepts one feature row or a matrix of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return int(cb.cluster_labels[assign(x[None, :], cb.centroids)[0]])
    return cb.cluster_labels[assign(x, cb.centroids)]


def clustering_accuracy(cb: Codebook, fs: FeatureSet) -> float:
    """Fraction of samples whose nearest cluster carries their true label."""
    if fs.labels is None:
        raise PreconditionError("labels are required")
    return float(np.mean(classify(fs.matrix, cb) == fs.labels))


def select_k(fs: FeatureSet, P_E: float, epsilon: float, k_grid, cfg: KmeansConfig | None = None, eval_fs: FeatureSet | None = None):
    """Smallest K in ``k_grid`` whose quantizer accuracy exceeds ``P_E - epsilon``.

    Each K gets a fresh fit on ``fs`` with the same seed. Accuracy is measured
    on ``eval_fs`` when given (e.g. a test split matching how P_E was
    measured), else on ``fs``. Returns ``(K or None, QuantizerReport)``.
    """
    k_grid = [int(k) for k in k_grid]
    if not k_grid or any(b <= a for a, b in zip(k_grid, k_grid[1:])):
        raise ValueError("k_grid must be non-empty and strictly ascending")
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must lie in [0, 1)")
    cfg = cfg or KmeansConfig()
    report = QuantizerReport(P_E=P_E)
    target = eval_fs if eval_fs is not None else fs
    for k in k_grid:
        cb, result = fit_codebook(fs, _with_k(cfg, k))
        p_q = clustering_accuracy(cb, target)
        report.records.append(KRecord(k, clustering_accuracy(cb, fs), p_q if eval_fs is not None else None, result.inertia, cfg.seed))
        if p_q > P_E:
            log.warning("P_Q=%.4f exceeds P_E=%.4f at K=%d", p_q, P_E, k)
        if p_q > P_E - epsilon:
            report.P_Q, report.inertia = p_q, result.inertia
            return k, report
    return None, report


def _with_k(cfg: KmeansConfig, k: int) -> KmeansConfig:
    return dataclasses.replace(cfg, K=k)


def sweep(fs: FeatureSet, k_grid, cfg: KmeansConfig, test_fs: FeatureSet | None = None, P_E: float | None = None) -> QuantizerReport:
    """Fit one codebook per K and record train P_Q, test accuracy and inertia."""
    report = QuantizerReport(P_E=P_E)
    for k in k_grid:
        cb, result = fit_codebook(fs, _with_k(cfg, int(k)))
        acc = clustering_accuracy(cb, test_fs) if test_fs is not None else None
        if acc is not None and P_E is not None and acc > P_E:
            log.warning("quantizer test accuracy %.4f exceeds encoder accuracy %.4f at K=%d", acc, P_E, k)
        report.records.append(KRecord(int(k), clustering_accuracy(cb, fs), acc, result.inertia, cfg.seed))
    return report
