"""Per-trace statistical features and the dataset-level feature matrix.

The catalog has seventeen entries: central-tendency statistics (mean,
quantiles, truncated means, spectral centroid) and spread statistics
(ratios beyond k standard deviations, variation coefficient, second
differences, truncated absolute change, autocorrelations).

Undefined statistics are imputed with 0 so clustering never sees NaN.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .traces import Trace, TraceDataset, TraceError, TraceKind

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    params: tuple = ()

    def __post_init__(self):
        if self.name not in _FUNCS:
            raise ValueError(f"unknown feature {self.name!r}")
        object.__setattr__(self, "params", tuple(tuple(p) for p in self.params))

    @property
    def kwargs(self) -> dict:
        return dict(self.params)

    @property
    def label(self) -> str:
        if not self.params:
            return self.name
        return self.name + "".join(f"__{k}_{v}" for k, v in self.params)

    @classmethod
    def parse(cls, label: str) -> "FeatureSpec":
        name, *rest = label.split("__")
        params = []
        for part in rest:
            key, _, val = part.rpartition("_")
            params.append((key, int(val) if val.isdigit() else float(val)))
        return cls(name, tuple(params))


# --- feature definitions (x is a 1-D float array with len >= 2) ---


def _mean(x):
    return x.mean()


def _quantile(x, q):
    return np.quantile(x, q)


def _truncated_mean(x, q):
    lo, hi = np.quantile(x, [q, 1.0 - q])
    kept = x[(x >= lo) & (x <= hi)]
    return kept.mean() if kept.size else 0.0


def _spectral_centroid(x):
    mag = np.abs(np.fft.rfft(x))
    total = mag.sum()
    if total <= 0:
        return 0.0
    return np.dot(np.arange(mag.size), mag) / total


def _ratio_beyond_r_sigma(x, r):
    return np.count_nonzero(np.abs(x - x.mean()) > r * x.std()) / x.size


def _variation_coefficient(x):
    m = x.mean()
    return x.std() / m if m != 0 else 0.0


def _mean_second_derivative_central(x):
    if x.size < 3:
        return 0.0
    return np.mean((x[2:] - 2.0 * x[1:-1] + x[:-2]) / 2.0)


def _truncated_mean_abs_change(x, ql, qh):
    change = np.diff(x)
    lo, hi = np.quantile(change, [ql, qh])
    kept = change[(change >= lo) & (change <= hi)]
    return np.abs(kept).mean() if kept.size else 0.0


def _autocorrelation(x, lag):
    lag = int(lag)
    n = x.size
    var = x.var()
    if n <= lag or var == 0:
        return 0.0
    d = x - x.mean()
    return np.dot(d[: n - lag], d[lag:]) / (n * var)


_FUNCS = {
    "mean": _mean,
    "quantile": _quantile,
    "truncated_mean": _truncated_mean,
    "fft_spectral_centroid": _spectral_centroid,
    "ratio_beyond_r_sigma": _ratio_beyond_r_sigma,
    "variation_coefficient": _variation_coefficient,
    "mean_second_derivative_central": _mean_second_derivative_central,
    "truncated_mean_abs_change": _truncated_mean_abs_change,
    "autocorrelation": _autocorrelation,
}

ORDER_FREE = frozenset({"mean", "quantile", "truncated_mean", "ratio_beyond_r_sigma", "variation_coefficient"})

CATALOG: tuple[FeatureSpec, ...] = (
    FeatureSpec("mean"),
    FeatureSpec("quantile", (("q", 0.025),)),
    FeatureSpec("quantile", (("q", 0.05),)),
    FeatureSpec("quantile", (("q", 0.95),)),
    FeatureSpec("truncated_mean", (("q", 0.05),)),
    FeatureSpec("truncated_mean", (("q", 0.125),)),
    FeatureSpec("truncated_mean", (("q", 0.25),)),
    FeatureSpec("fft_spectral_centroid"),
    FeatureSpec("ratio_beyond_r_sigma", (("r", 1.0),)),
    FeatureSpec("ratio_beyond_r_sigma", (("r", 2.5),)),
    FeatureSpec("variation_coefficient"),
    FeatureSpec("mean_second_derivative_central"),
    FeatureSpec("truncated_mean_abs_change", (("ql", 0.05), ("qh", 0.95))),
    FeatureSpec("truncated_mean_abs_change", (("ql", 0.0125), ("qh", 0.9875))),
    FeatureSpec("autocorrelation", (("lag", 3),)),
    FeatureSpec("autocorrelation", (("lag", 4),)),
    FeatureSpec("autocorrelation", (("lag", 8),)),
)


def compute_feature(spec: FeatureSpec, x: np.ndarray) -> float:
    value = float(_FUNCS[spec.name](x, **spec.kwargs))
    return value if np.isfinite(value) else 0.0


def uniform_values(trace: Trace) -> np.ndarray:
    """Values on a uniform time grid.

    Uniformly stepped traces pass through untouched; others are resampled at
    the median step with previous-value interpolation.
    """
    t, v = trace.times, trace.values
    if t.size < 3:
        return np.asarray(v, dtype=float)
    steps = np.diff(t)
    step = float(np.median(steps))
    if np.allclose(steps, step, rtol=1e-9, atol=0.0):
        return np.asarray(v, dtype=float)
    grid = t[0] + step * np.arange(int(np.floor((t[-1] - t[0]) / step)) + 1)
    idx = np.searchsorted(t, grid, side="right") - 1
    return v[np.clip(idx, 0, v.size - 1)]


@dataclass
class FeatureVector:
    trace_id: str
    specs: tuple[FeatureSpec, ...]
    values: np.ndarray

    def as_dict(self) -> dict[str, float]:
        return {s.label: float(v) for s, v in zip(self.specs, self.values)}


def extract_features(trace: Trace, specs: Sequence[FeatureSpec] = CATALOG) -> FeatureVector:
    specs = tuple(specs)
    if not trace.kind.is_series:
        raise TraceError("parameter-tuple traces carry their features as params", trace.id)
    if len(trace) < 2:
        raise TraceError("feature extraction needs at least 2 samples", trace.id)
    x = uniform_values(trace)
    values = np.array([compute_feature(s, x) for s in specs], dtype=float)
    return FeatureVector(trace.id, specs, values)


@dataclass
class FeatureMatrix:
    """Rows are traces, columns are features.

    ``raw`` keeps the unscaled values; ``values`` is the z-scored matrix that
    clustering and selection consume. Constant columns are dropped and listed
    in ``dropped``.
    """

    trace_ids: list[str]
    specs: list
    raw: np.ndarray
    values: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    dropped: list = field(default_factory=list)

    @property
    def labels(self) -> list[str]:
        return [s.label if isinstance(s, FeatureSpec) else str(s) for s in self.specs]

    @property
    def shape(self):
        return self.values.shape

    def columns(self, idx: Sequence[int]) -> "FeatureMatrix":
        idx = list(idx)
        return FeatureMatrix(list(self.trace_ids), [self.specs[i] for i in idx], self.raw[:, idx],
                             self.values[:, idx], self.mean[idx], self.std[idx], list(self.dropped))

    def select(self, specs) -> "FeatureMatrix":
        labels = self.labels
        want = [s.label if isinstance(s, FeatureSpec) else str(s) for s in specs]
        return self.columns([labels.index(w) for w in want])

    def transform(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=float) - self.mean) / self.std


def standardize(trace_ids, specs, raw: np.ndarray, *, drop_constant: bool = True) -> FeatureMatrix:
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise ValueError("feature matrix needs at least one row")
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    scale = np.maximum(np.abs(mean), 1.0)
    informative = std > 1e-12 * scale
    dropped = [specs[i] for i in np.flatnonzero(~informative)]
    if drop_constant:
        if not informative.any():
            raise ValueError("dataset has no informative features")
        keep = np.flatnonzero(informative)
        if dropped:
            log.info("dropping constant feature columns: %s", [getattr(s, "label", s) for s in dropped])
    else:
        keep = np.arange(raw.shape[1])
        dropped = []
    specs = [specs[i] for i in keep]
    raw, mean, std = raw[:, keep], mean[keep], np.where(std[keep] > 0, std[keep], 1.0)
    return FeatureMatrix(list(trace_ids), specs, raw, (raw - mean) / std, mean, std, dropped)


def extract_matrix(dataset: TraceDataset, specs: Sequence[FeatureSpec] = CATALOG) -> FeatureMatrix:
    """Feature matrix for a whole dataset.

    Parameter-tuple datasets use the sorted ``params`` keys as columns.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.kind is TraceKind.PARAM_TUPLE:
        keys = sorted(dataset.traces[0].params)
        for tr in dataset:
            if sorted(tr.params) != keys:
                raise TraceError("parameter keys differ from the first trace", tr.id)
        raw = np.array([[float(tr.params[k]) for k in keys] for tr in dataset])
        return standardize(dataset.ids, keys, raw)
    specs = tuple(specs)
    raw = np.vstack([extract_features(tr, specs).values for tr in dataset])
    return standardize(dataset.ids, list(specs), raw)


def write_feature_csv(matrix: FeatureMatrix, path, *, standardized: bool = False) -> None:
    data = matrix.values if standardized else matrix.raw
    with open(path, "w", newline="") as fh:
        fh.write("# schema_version=1 kind=features\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trace_id", *matrix.labels])
        for tid, row in zip(matrix.trace_ids, data):
            w.writerow([tid, *(repr(float(v)) for v in row)])


def read_feature_csv(path) -> FeatureMatrix:
    """Read a feature CSV written by :func:`write_feature_csv` (raw values) and re-standardize."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise ValueError(f"{path}: empty feature file")
    header, body = rows[0], rows[1:]
    specs = []
    for label in header[1:]:
        try:
            specs.append(FeatureSpec.parse(label))
        except ValueError:
            specs.append(label)
    ids = [r[0] for r in body]
    raw = np.array([[float(v) for v in r[1:]] for r in body], dtype=float).reshape(len(body), len(specs))
    if raw.shape[0] == 0:
        raise ValueError(f"{path}: no feature rows")
    return standardize(ids, specs, raw, drop_constant=raw.shape[0] > 1)
