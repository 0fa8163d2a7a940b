"""Glue for the three offline stages: features, critical features, clusters."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from ._seeding import derive_seed
from .clustering import SEARCH_RANGES, ClusterModel, search_clustering
from .features import FeatureMatrix, extract_matrix
from .prioritization import CategoricalDistribution
from .selection import SelectionConfig, SelectionReport, select_critical_features
from .traces import TraceDataset

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Categorization:
    matrix: FeatureMatrix  # all informative features
    report: SelectionReport
    model: ClusterModel
    dist: CategoricalDistribution
    features: dict  # trace id -> standardized critical-feature vector

    def cluster_classes(self, dataset: TraceDataset) -> dict:
        """Cluster -> ground-truth class counts of its members (empty if unlabeled)."""
        out = {}
        for c in self.dist.categories:
            counts = Counter(dataset[t].ground_truth_class for t in self.dist.members[c])
            out[int(c)] = {str(k): v for k, v in sorted(counts.items(), key=lambda kv: str(kv[0]))
                           if k is not None}
        return out


def categorize(dataset: TraceDataset, seed: int = 0, *, k_range=None, seeds_per_k: int = 10,
               selection: SelectionConfig | None = None, jobs: int = 1) -> Categorization:
    """Extract features, keep the critical ones, and cluster the traces on them."""
    try:
        matrix = extract_matrix(dataset)
    except Exception as exc:
        raise StageError("extract-features", exc) from exc
    try:
        sel = selection or SelectionConfig(seed=derive_seed(seed, "select"))
        if matrix.shape[1] > sel.min_features:
            report = select_critical_features(matrix, sel)
        else:
            report = SelectionReport(final_features=list(matrix.labels), initial_count=matrix.shape[1])
        critical = matrix.select(report.final_features)
    except Exception as exc:
        raise StageError("select-features", exc) from exc
    try:
        k_range = k_range or SEARCH_RANGES["tracebench"]
        k_range = (min(k_range[0], len(dataset)), min(k_range[1], len(dataset)))
        model = search_clustering(critical.values, k_range, seeds_per_k, derive_seed(seed, "cluster"), jobs=jobs)
        model.trace_ids = list(critical.trace_ids)
        model.feature_labels = list(critical.labels)
    except Exception as exc:
        raise StageError("cluster", exc) from exc
    dist = CategoricalDistribution.from_labels(model.trace_ids, model.labels)
    feats = {tid: np.asarray(row, dtype=np.float32) for tid, row in zip(critical.trace_ids, critical.values)}
    log.info("dataset %s: %d critical features, k=%d", dataset.name, len(report.final_features), model.k)
    return Categorization(matrix, report, model, dist, feats)
