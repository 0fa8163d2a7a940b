"""Gaussian mixture clustering of trace features.

Diagonal-covariance GMMs are fitted by EM from k-means++ seeds. The cluster
count is chosen by a two-stage search: for every k the seed with the best
log-likelihood wins, then the k whose winner has the highest mean silhouette
coefficient is returned.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from ._seeding import derive_seed

log = logging.getLogger(__name__)

SEARCH_RANGES = {
    "tracebench": (3, 7),
    "abr": (6, 15),
    "cc": (4, 9),
    "lb": (3, 8),
}


class GmmFitError(RuntimeError):
    pass


def _as_array(matrix) -> np.ndarray:
    X = getattr(matrix, "values", matrix)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("expected a 2-D feature matrix")
    return X


def kmeanspp_init(matrix, k: int, seed: int) -> np.ndarray:
    """k-means++ seeding: first centroid uniform, the rest drawn with D^2 weighting.

    When every remaining point coincides with a chosen centroid the next
    centroid is drawn uniformly from the rows not chosen yet.
    """
    X = _as_array(matrix)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of rows ({n})")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return X[chosen].copy()


@dataclass
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray  # (k, d) diagonal variances
    reg_covar: float = 1e-6

    @property
    def k(self) -> int:
        return int(self.weights.size)

    def log_joint(self, X: np.ndarray) -> np.ndarray:
        """``log(weight_k) + log N(x | mean_k, diag(cov_k))`` for every row and component."""
        var = self.covariances
        d = X.shape[1]
        const = -0.5 * (d * np.log(2 * np.pi) + np.sum(np.log(var), axis=1))
        sq = np.empty((X.shape[0], self.k))
        for j in range(self.k):
            sq[:, j] = np.sum((X - self.means[j]) ** 2 / var[j], axis=1)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw + const - 0.5 * sq

    def responsibilities(self, X) -> np.ndarray:
        lj = self.log_joint(np.asarray(X, dtype=float))
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.log_joint(np.asarray(X, dtype=float)), axis=1)

    def score(self, X) -> float:
        return float(logsumexp(self.log_joint(np.asarray(X, dtype=float)), axis=1).sum())

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "reg_covar": self.reg_covar,
        }

    @classmethod
    def from_json(cls, obj) -> "GmmParams":
        return cls(np.array(obj["weights"]), np.array(obj["means"]), np.array(obj["covariances"]),
                   float(obj["reg_covar"]))


@dataclass
class GmmFit:
    params: GmmParams
    labels: np.ndarray
    log_likelihood: float
    history: list
    n_iter: int
    converged: bool
    reseeded: bool = False


def _m_step(X, resp, reg_covar):
    n = X.shape[0]
    nk = resp.sum(axis=0)
    weights = nk / n
    weights = weights / weights.sum()
    means = (resp.T @ X) / nk[:, None]
    var = np.empty_like(means)
    for j in range(means.shape[0]):
        var[j] = resp[:, j] @ (X - means[j]) ** 2 / nk[j]
    return GmmParams(weights, means, var + reg_covar, reg_covar)


def fit_gmm(matrix, k: int, seed: int, max_iters: int = 200, tol: float = 1e-4,
            reg_covar: float = 1e-6) -> GmmFit:
    """Fit a diagonal-covariance GMM by EM.

    Starts from a hard nearest-centroid assignment to k-means++ centroids and
    iterates until the log-likelihood gain drops below ``tol`` or
    ``max_iters`` is reached. A component that loses all responsibility is
    re-seeded once on the worst-explained row; a second collapse raises
    :class:`GmmFitError`.
    """
    X = _as_array(matrix)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    centroids = kmeanspp_init(X, k, seed)
    nearest = np.argmin(cdist(X, centroids, "sqeuclidean"), axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), nearest] = 1.0

    history: list[float] = []
    reseeded = False
    converged = False
    params = None
    log_norm = None
    it = 0
    for it in range(max_iters + 1):
        if params is not None:
            lj = params.log_joint(X)
            log_norm = logsumexp(lj, axis=1)
            ll = float(log_norm.sum())
            if not np.isfinite(ll):
                raise GmmFitError(f"non-finite log-likelihood (k={k}, seed={seed})")
            history.append(ll)
            if len(history) > 1 and history[-1] - history[-2] < tol:
                converged = True
                break
            if it == max_iters:
                break
            resp = np.exp(lj - log_norm[:, None])
        nk = resp.sum(axis=0)
        empty = np.flatnonzero(nk <= 1e-10 * n)
        if empty.size:
            if reseeded:
                raise GmmFitError(f"component collapsed twice (k={k}, seed={seed})")
            reseeded = True
            if log_norm is None:
                order = np.argsort(np.min(cdist(X, centroids, "sqeuclidean"), axis=1))[::-1]
            else:
                order = np.argsort(log_norm)
            for j, row in zip(empty, order):
                resp[row] = 0.0
                resp[row, j] = 1.0
            log.debug("re-seeded empty components %s (k=%d, seed=%d)", empty.tolist(), k, seed)
            nk = resp.sum(axis=0)
            if np.any(nk <= 1e-10 * n):
                raise GmmFitError(f"could not re-seed empty component (k={k}, seed={seed})")
        params = _m_step(X, resp, reg_covar)
    labels = np.argmax(params.log_joint(X), axis=1)
    return GmmFit(params, labels, history[-1], history, it, converged, reseeded)


def silhouette_score(matrix, labels, sample_size: int | None = 5000, seed: int = 0) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Points in singleton clusters score 0. Inputs above ``sample_size`` rows
    are scored on a seeded subsample.
    """
    X = _as_array(matrix)
    labels = np.asarray(labels)
    if labels.shape[0] != X.shape[0]:
        raise ValueError("labels and matrix differ in length")
    if sample_size is not None and X.shape[0] > sample_size:
        idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], sample_size, replace=False))
        X, labels = X[idx], labels[idx]
    uniq, inv = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise ValueError("silhouette undefined for a single cluster")
    n = X.shape[0]
    counts = np.bincount(inv)
    sums = np.zeros((n, uniq.size))
    for start in range(0, n, 2048):
        D = cdist(X[start:start + 2048], X)
        for c in range(uniq.size):
            sums[start:start + 2048, c] = D[:, inv == c].sum(axis=1)
    own = counts[inv]
    a = sums[np.arange(n), inv] / np.maximum(own - 1, 1)
    mean_other = sums / counts
    mean_other[np.arange(n), inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def purity(labels, truth) -> float:
    """Fraction of rows whose cluster's majority ground-truth label matches their own."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    hits = 0
    for c in np.unique(labels):
        _, counts = np.unique(truth[labels == c], return_counts=True)
        hits += counts.max()
    return hits / labels.size


@dataclass
class ClusterModel:
    params: GmmParams
    labels: np.ndarray
    log_likelihood: float
    silhouette: float
    search_log: list = field(default_factory=list)
    trace_ids: list | None = None
    feature_labels: list | None = None

    @property
    def k(self) -> int:
        return self.params.k

    def labels_by_trace(self) -> dict:
        ids = self.trace_ids or [str(i) for i in range(len(self.labels))]
        return {tid: int(c) for tid, c in zip(ids, self.labels)}

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "k": self.k,
            "params": self.params.to_json(),
            "labels": self.labels_by_trace(),
            "log_likelihood": self.log_likelihood,
            "silhouette": self.silhouette,
            "search_log": self.search_log,
            "features": self.feature_labels,
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, obj) -> "ClusterModel":
        ids = list(obj["labels"])
        return cls(GmmParams.from_json(obj["params"]), np.array([obj["labels"][i] for i in ids]),
                   obj["log_likelihood"], obj["silhouette"], obj.get("search_log", []), ids,
                   obj.get("features"))


def _fit_or_none(X, k, seed, max_iters, tol, reg_covar):
    try:
        return fit_gmm(X, k, seed, max_iters, tol, reg_covar)
    except GmmFitError as exc:
        log.warning("GMM fit failed: %s", exc)
        return None


def search_clustering(matrix, k_range=SEARCH_RANGES["tracebench"], seeds_per_k: int = 10, seed: int = 0, *,
                      max_iters: int = 200, tol: float = 1e-4, reg_covar: float = 1e-6,
                      jobs: int = 1) -> ClusterModel:
    """Two-stage search over initializations and cluster counts.

    Stage one keeps, per k, the seed with the highest log-likelihood; stage
    two returns the per-k winner with the highest silhouette. Fits may run on
    ``jobs`` threads; results are reduced in (k, seed) order.
    """
    X = _as_array(matrix)
    k_min, k_max = int(k_range[0]), int(k_range[1])
    if k_min < 1 or k_min > k_max:
        raise ValueError(f"invalid k_range {k_range}")
    if k_max > X.shape[0]:
        raise ValueError("k_range exceeds rows")
    tasks = [(k, derive_seed(seed, "gmm", k, i)) for k in range(k_min, k_max + 1) for i in range(seeds_per_k)]

    def run(task):
        return _fit_or_none(X, task[0], task[1], max_iters, tol, reg_covar)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            fits = list(pool.map(run, tasks))
    else:
        fits = [run(t) for t in tasks]

    search_log = []
    best = None
    for k in range(k_min, k_max + 1):
        cands = [(s, f) for (kk, s), f in zip(tasks, fits) if kk == k and f is not None]
        if not cands:
            log.warning("every GMM fit failed for k=%d; skipping", k)
            continue
        s_best, f_best = max(cands, key=lambda sf: sf[1].log_likelihood)
        n_used = np.unique(f_best.labels).size
        if k == 1 or n_used < 2:
            sil = -1.0
        else:
            sil = silhouette_score(X, f_best.labels, seed=derive_seed(seed, "silhouette", k))
        search_log.append({"k": k, "best_seed": int(s_best), "log_likelihood": f_best.log_likelihood,
                           "silhouette": sil, "clusters_used": int(n_used)})
        if best is None or sil > best[2]:
            best = (k, f_best, sil)
    if best is None:
        raise GmmFitError(f"all GMM fits failed for k in [{k_min}, {k_max}]")
    k, fit, sil = best
    return ClusterModel(fit.params, fit.labels, fit.log_likelihood, sil, search_log,
                        list(getattr(matrix, "trace_ids", [])) or None,
                        list(getattr(matrix, "labels", [])) or None)
