"""Critical feature identification by recursive elimination.

Each round clusters the traces on the surviving features, scores every
feature by the information gain a shallow single-feature decision tree
achieves on the cluster labels, and drops the lowest scorers. The cluster
count grows from round to round.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .clustering import GmmFitError, fit_gmm

log = logging.getLogger(__name__)


def entropy(labels) -> float:
    """Shannon entropy in bits."""
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def _entropy_rows(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=-1, keepdims=True)
    p = np.divide(counts, totals, out=np.zeros_like(counts, dtype=float), where=totals > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p), 0.0)
    return -terms.sum(axis=-1)


def _leaf_entropy(x: np.ndarray, y: np.ndarray, n_classes: int, depth: int) -> float:
    """Sum over the leaves of ``n_leaf * H(leaf)`` for a greedy entropy tree on sorted ``x``."""
    n = y.size
    counts = np.bincount(y, minlength=n_classes).astype(float)
    h = _entropy_rows(counts)
    if depth == 0 or h == 0.0 or x[0] == x[-1]:
        return n * h
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    left = np.cumsum(onehot, axis=0)[:-1]
    right = counts - left
    n_left = np.arange(1, n, dtype=float)
    cost = n_left * _entropy_rows(left) + (n - n_left) * _entropy_rows(right)
    valid = x[1:] > x[:-1]
    cost = np.where(valid, cost, np.inf)
    cut = int(np.argmin(cost))
    if not cost[cut] < n * h - 1e-12:
        return n * h
    return (_leaf_entropy(x[: cut + 1], y[: cut + 1], n_classes, depth - 1)
            + _leaf_entropy(x[cut + 1:], y[cut + 1:], n_classes, depth - 1))


def information_gain(labels, feature_column, tree_max_depth: int = 3) -> float:
    """``H(c) - H(c | feature)`` in bits, where the conditional entropy is the
    leaf-weighted label entropy of a depth-bounded tree on the one feature.

    Returns 0 when the labels hold a single class.
    """
    labels = np.asarray(labels)
    x = np.asarray(feature_column, dtype=float)
    if labels.shape != x.shape or labels.size < 2:
        raise ValueError("labels and feature column need the same length >= 2")
    _, y = np.unique(labels, return_inverse=True)
    n_classes = int(y.max()) + 1
    if n_classes < 2:
        log.debug("information gain on a single label is degenerate; returning 0")
        return 0.0
    order = np.argsort(x, kind="stable")
    h = entropy(y)
    cond = _leaf_entropy(x[order], y[order], n_classes, tree_max_depth) / y.size
    return float(min(max(h - cond, 0.0), h))


@dataclass(frozen=True)
class SelectionConfig:
    initial_cluster_count: int = 4
    cluster_growth: int = 2
    elimination_fraction: float = 0.25
    min_features: int = 4
    ig_threshold: float = 0.5
    tree_max_depth: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.min_features < 2:
            raise ValueError("min_features must be at least 2")
        if not 0 < self.elimination_fraction < 1:
            raise ValueError("elimination_fraction must lie in (0, 1)")
        if self.ig_threshold < 0:
            raise ValueError("ig_threshold must be non-negative")

    def max_rounds(self, n_features: int) -> int:
        if n_features <= self.min_features:
            return 1
        drops = math.log(n_features / self.min_features) / math.log(1.0 / (1.0 - self.elimination_fraction))
        return math.ceil(drops) + 1


@dataclass
class SelectionRound:
    features: list
    information_gain: list
    cluster_count: int
    label_entropy: float


@dataclass
class SelectionReport:
    rounds: list = field(default_factory=list)
    final_features: list = field(default_factory=list)
    initial_count: int = 0

    @property
    def eliminated_fraction(self) -> float:
        return 1.0 - len(self.final_features) / self.initial_count if self.initial_count else 0.0

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "initial_count": self.initial_count,
            "final_features": self.final_features,
            "rounds": [
                {"features": r.features, "information_gain": r.information_gain,
                 "cluster_count": r.cluster_count, "label_entropy": r.label_entropy}
                for r in self.rounds
            ],
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")


def select_critical_features(matrix, cfg: SelectionConfig = SelectionConfig()) -> SelectionReport:
    """Run the cluster / classify / eliminate loop on a standardized matrix.

    Stops once every surviving feature reaches ``ig_threshold * H(c)`` or the
    ``min_features`` floor is hit.
    """
    X = np.asarray(matrix.values, dtype=float)
    labels_all = list(matrix.labels)
    n_rows, n_cols = X.shape
    if n_cols < cfg.min_features:
        raise ValueError(f"matrix has {n_cols} columns, fewer than min_features={cfg.min_features}")
    surviving = list(range(n_cols))
    k = cfg.initial_cluster_count
    report = SelectionReport(initial_count=n_cols)
    for round_no in range(cfg.max_rounds(n_cols)):
        k_used = min(k, n_rows)
        try:
            fit = fit_gmm(X[:, surviving], k_used, cfg.seed)
        except GmmFitError as exc:
            raise GmmFitError(f"feature selection round {round_no} (k={k_used}): {exc}") from exc
        c = fit.labels
        h = entropy(c)
        ig = [information_gain(c, X[:, j], cfg.tree_max_depth) for j in surviving]
        report.rounds.append(SelectionRound([labels_all[j] for j in surviving], ig, k_used, h))
        if len(surviving) <= cfg.min_features or all(g >= cfg.ig_threshold * h for g in ig):
            break
        n_drop = max(1, math.ceil(cfg.elimination_fraction * len(surviving)))
        n_drop = min(n_drop, len(surviving) - cfg.min_features)
        # stable sort: among equal gains the earlier catalog entry goes first
        order = np.argsort(np.asarray(ig), kind="stable")
        drop = set(order[:n_drop].tolist())
        surviving = [j for pos, j in enumerate(surviving) if pos not in drop]
        k += cfg.cluster_growth
    report.final_features = [labels_all[j] for j in surviving]
    return report
