"""Trace and dataset types, JSON trace files, and return computation.

A trace file holds one JSON object::

    {"id": "...", "kind": "throughput_series",
     "samples": [[t, v], ...], "params": {...}, "ground_truth_class": "..."}

and a manifest is a JSON array of trace-file paths relative to the manifest.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._seeding import make_rng

REWARD_CLIP = 32.0


class TraceError(ValueError):
    """Invalid trace or dataset. ``trace_id``/``path`` name the offender."""

    def __init__(self, message: str, trace_id: str | None = None, path: str | None = None):
        self.trace_id = trace_id
        self.path = path
        self.detail = message
        where = []
        if trace_id is not None:
            where.append(f"trace {trace_id!r}")
        if path is not None:
            where.append(f"file {path}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class TraceKind(str, enum.Enum):
    THROUGHPUT = "throughput_series"
    JOB_SIZE = "job_size_series"
    PARAM_TUPLE = "param_tuple"

    @property
    def is_series(self) -> bool:
        return self is not TraceKind.PARAM_TUPLE


@dataclass(frozen=True, eq=False)
class Trace:
    """One input trace: a (time, value) series or a parameter tuple.

    ``times`` and ``values`` are read-only float arrays. Throughput values
    are in MB/s for TraceBench traces; job-size series carry job sizes.
    """

    id: str
    kind: TraceKind
    times: np.ndarray
    values: np.ndarray
    params: dict | None = None
    ground_truth_class: str | None = None

    def __post_init__(self):
        kind = TraceKind(self.kind)
        object.__setattr__(self, "kind", kind)
        times = np.array(self.times, dtype=float).reshape(-1)
        values = np.array(self.values, dtype=float).reshape(-1)
        if times.shape != values.shape:
            raise TraceError("times and values differ in length", self.id)
        if kind.is_series:
            if times.size == 0:
                raise TraceError("series trace has no samples", self.id)
            if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
                raise TraceError("non-finite sample", self.id)
            if np.any(np.diff(times) <= 0):
                bad = int(np.argmax(np.diff(times) <= 0)) + 1
                raise TraceError(f"timestamps not strictly increasing at sample {bad}", self.id)
            if np.any(values < 0):
                raise TraceError("negative sample value", self.id)
        else:
            if times.size:
                raise TraceError("param_tuple trace must have empty samples", self.id)
            if not self.params:
                raise TraceError("param_tuple trace needs nonempty params", self.id)
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if self.params is not None:
            object.__setattr__(self, "params", dict(self.params))

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self) else 0.0

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "samples": [[float(t), float(v)] for t, v in zip(self.times, self.values)],
            "params": self.params,
            "ground_truth_class": self.ground_truth_class,
        }

    @classmethod
    def from_json(cls, obj: dict, path: str | None = None) -> "Trace":
        if not isinstance(obj, dict):
            raise TraceError("trace record is not a JSON object", path=path)
        try:
            trace_id = str(obj["id"])
            kind = obj["kind"]
            samples = obj.get("samples") or []
        except KeyError as exc:
            raise TraceError(f"missing field {exc.args[0]!r}", path=path) from None
        try:
            kind = TraceKind(kind)
        except ValueError:
            raise TraceError(f"unknown kind {kind!r}", trace_id, path) from None
        try:
            arr = np.asarray(samples, dtype=float).reshape(-1, 2) if len(samples) else np.empty((0, 2))
        except (TypeError, ValueError):
            raise TraceError("malformed samples; expected [[t, v], ...]", trace_id, path) from None
        try:
            return cls(
                id=trace_id,
                kind=kind,
                times=arr[:, 0],
                values=arr[:, 1],
                params=obj.get("params"),
                ground_truth_class=obj.get("ground_truth_class"),
            )
        except TraceError as exc:
            raise TraceError(exc.detail, trace_id, path) from None


def dumps_trace(trace: Trace) -> str:
    """Canonical serialization; stable bytes for equal traces."""
    return json.dumps(trace.to_json(), separators=(",", ":"), sort_keys=True) + "\n"


@dataclass(frozen=True)
class TraceDataset:
    name: str
    traces: tuple[Trace, ...]
    manifest_path: Path | None = None
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        traces = tuple(self.traces)
        object.__setattr__(self, "traces", traces)
        index = {}
        for tr in traces:
            if tr.id in index:
                raise TraceError("duplicate trace id", tr.id)
            index[tr.id] = tr
        kinds = {tr.kind for tr in traces}
        if len(kinds) > 1:
            raise TraceError(f"dataset mixes trace kinds {sorted(k.value for k in kinds)}")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def __getitem__(self, trace_id: str) -> Trace:
        return self._index[trace_id]

    def __contains__(self, trace_id) -> bool:
        return trace_id in self._index

    @property
    def ids(self) -> list[str]:
        return [t.id for t in self.traces]

    @property
    def kind(self) -> TraceKind | None:
        return self.traces[0].kind if self.traces else None

    def subset(self, ids: Iterable[str], name: str | None = None) -> "TraceDataset":
        return TraceDataset(name or self.name, tuple(self._index[i] for i in ids))


def load_dataset(manifest_path) -> TraceDataset:
    """Load every trace listed in a manifest; traces come back sorted by id."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise TraceError("manifest not found", path=str(manifest_path))
    try:
        entries = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise TraceError(f"manifest is not valid JSON ({exc.msg})", path=str(manifest_path)) from None
    if not isinstance(entries, list) or not all(isinstance(e, str) for e in entries):
        raise TraceError("manifest must be a JSON array of relative paths", path=str(manifest_path))
    traces = []
    for rel in entries:
        path = manifest_path.parent / rel
        if not path.is_file():
            raise TraceError("referenced trace file is missing", path=str(path))
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise TraceError(f"malformed JSON ({exc.msg})", path=str(path)) from None
        traces.append(Trace.from_json(obj, path=str(path)))
    traces.sort(key=lambda t: t.id)
    return TraceDataset(manifest_path.stem, tuple(traces), manifest_path)


def save_dataset(dataset: TraceDataset, directory, manifest_name: str = "manifest.json") -> Path:
    """Write one canonical JSON file per trace plus a manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "traces").mkdir(parents=True, exist_ok=True)
    entries = []
    for tr in dataset.traces:
        rel = f"traces/{_safe_name(tr.id)}.json"
        (directory / rel).write_text(dumps_trace(tr))
        entries.append(rel)
    manifest = directory / manifest_name
    manifest.write_text(json.dumps(entries, indent=1) + "\n")
    return manifest


def _safe_name(trace_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in trace_id)


def write_summary_csv(dataset: TraceDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema_version=1 kind=trace_summary\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "kind", "length", "duration", "mean", "std", "min", "max", "ground_truth_class"])
        for tr in dataset:
            if tr.kind.is_series:
                v = tr.values
                stats = [len(tr), tr.duration, v.mean(), v.std(), v.min(), v.max()]
            else:
                stats = [0, 0.0, "", "", "", ""]
            w.writerow([tr.id, tr.kind.value, *[_fmt(s) for s in stats], tr.ground_truth_class or ""])


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def filter_min_length(dataset: TraceDataset, min_duration: float) -> TraceDataset:
    keep = tuple(t for t in dataset if not t.kind.is_series or t.duration >= min_duration)
    return TraceDataset(dataset.name, keep, dataset.manifest_path)


def split_trace(trace: Trace, chunk: int = 500, seed: int = 0, min_len: int = 2) -> list[Trace]:
    """Cut a long series into ``chunk``-sample segments at a seeded random offset.

    Traces no longer than ``chunk`` come back unchanged. Leading and trailing
    fragments shorter than ``min_len`` are dropped.
    """
    n = len(trace)
    if not trace.kind.is_series or n <= chunk:
        return [trace]
    rng = make_rng(seed, "split", *[ord(c) for c in trace.id[:8]])
    offset = int(rng.integers(0, n % chunk + 1)) if n % chunk else 0
    bounds = [0] + list(range(offset, n, chunk)) + [n]
    bounds = sorted(set(bounds))
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b - a < min_len:
            continue
        out.append(Trace(f"{trace.id}#{len(out)}", trace.kind, trace.times[a:b], trace.values[a:b],
                         trace.params, trace.ground_truth_class))
    return out


@dataclass(frozen=True)
class ReturnSpec:
    gamma: float
    normalize: bool = False
    epsilon: float = 1e-2
    clip: float = REWARD_CLIP

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def normalize_reward(r, epsilon: float = 1e-2, clip: float | None = REWARD_CLIP):
    """``sign(r) * (sqrt(|r| + 1) - 1) + epsilon * r``, optionally clipped to ``[-clip, clip]``."""
    r = np.asarray(r, dtype=float)
    out = np.sign(r) * (np.sqrt(np.abs(r) + 1.0) - 1.0) + epsilon * r
    if clip is not None:
        out = np.clip(out, -clip, clip)
    return out if out.ndim else float(out)


def discounted_return(rewards: Sequence[float], spec: ReturnSpec) -> float:
    r = np.asarray(rewards, dtype=float).reshape(-1)
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    if r.size == 0:
        return 0.0
    if spec.normalize:
        r = normalize_reward(r, spec.epsilon, spec.clip)
    if spec.gamma == 1.0:
        return float(r.sum())
    if spec.gamma == 0.0:
        return float(r[0])
    disc = spec.gamma ** np.arange(r.size)
    return float(np.dot(disc, r))
