"""Trace prioritization: static and dynamic category weights, and trace selection.

Categories are cluster labels. A :class:`WeightTable` multiplies the base
category pdf ``f`` by weights ``W`` to give the sampling pdf
``f' = W f / sum(W f)``. Static weights use ``W = 1 / f``; dynamic weights
combine the per-category error of an online return predictor with the
negated mean return, recomputed as episodes finish.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

PREDICTOR_SCHEMA = 1


@dataclass(frozen=True)
class CategoricalDistribution:
    categories: tuple
    pdf: np.ndarray
    members: Mapping

    def __post_init__(self):
        pdf = np.asarray(self.pdf, dtype=float)
        if pdf.shape != (len(self.categories),):
            raise ValueError("pdf must have one entry per category")
        if np.any(pdf < 0) or abs(pdf.sum() - 1.0) > 1e-12:
            raise ValueError("pdf must be non-negative and sum to 1")
        pdf.setflags(write=False)
        object.__setattr__(self, "pdf", pdf)
        members = {c: tuple(self.members.get(c, ())) for c in self.categories}
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "_category_of", {t: c for c, ids in members.items() for t in ids})

    @classmethod
    def from_labels(cls, trace_ids: Sequence[str], labels: Sequence[int]) -> "CategoricalDistribution":
        labels = [int(c) for c in labels]
        cats = tuple(sorted(set(labels)))
        members = {c: [] for c in cats}
        for tid, c in zip(trace_ids, labels):
            members[c].append(tid)
        counts = np.array([len(members[c]) for c in cats], dtype=float)
        return cls(cats, counts / counts.sum(), members)

    @classmethod
    def single(cls, trace_ids: Sequence[str]) -> "CategoricalDistribution":
        return cls((0,), np.array([1.0]), {0: list(trace_ids)})

    @property
    def k(self) -> int:
        return len(self.categories)

    def category_of(self, trace_id: str) -> int:
        return self._category_of[trace_id]

    def index_of(self, category) -> int:
        return self.categories.index(category)


@dataclass(frozen=True)
class WeightTable:
    """Immutable weight snapshot; ``version`` grows with every publish."""

    categories: tuple
    weights: np.ndarray
    base_pdf: np.ndarray
    version: int = 0
    flags: tuple = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).copy()
        f = np.asarray(self.base_pdf, dtype=float).copy()
        if w.shape != f.shape or w.shape != (len(self.categories),):
            raise ValueError("weights, base pdf and categories must align")
        if np.any(w < 0) or not np.any(w * f > 0):
            raise ValueError("weights must be non-negative with at least one live category")
        mass = w * f
        eff = mass / mass.sum()
        for arr in (w, f, eff):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "base_pdf", f)
        object.__setattr__(self, "_effective", eff)

    @property
    def effective_pdf(self) -> np.ndarray:
        return self._effective

    def replace(self, weights, version: int | None = None, flags: tuple = ()) -> "WeightTable":
        return WeightTable(self.categories, weights, self.base_pdf,
                           self.version + 1 if version is None else version, flags)

    def to_json(self) -> dict:
        return {"version": self.version, "categories": [int(c) for c in self.categories],
                "weights": self.weights.tolist(), "effective_pdf": self.effective_pdf.tolist(),
                "flags": list(self.flags)}


def uniform_weights(dist: CategoricalDistribution) -> WeightTable:
    return WeightTable(dist.categories, np.ones(dist.k), dist.pdf)


def static_weights(dist: CategoricalDistribution) -> WeightTable:
    f = dist.pdf
    live = f > 0
    if not live.all():
        log.warning("categories %s are empty and get no weight",
                    [c for c, ok in zip(dist.categories, live) if not ok])
    w = np.zeros_like(f)
    w[live] = 1.0 / f[live]
    return WeightTable(dist.categories, w, f)


def two_class_equal_weights(dataset, threshold: float) -> tuple[CategoricalDistribution, WeightTable]:
    """Split traces by mean value against ``threshold`` and weight both halves equally.

    Category 0 holds traces with mean below the threshold, category 1 the
    rest. If either side is empty the split degrades to uniform sampling.
    """
    ids = dataset.ids
    labels = [0 if float(np.mean(tr.values)) < threshold else 1 for tr in dataset]
    if len(set(labels)) < 2:
        log.warning("every trace falls on one side of threshold %.3g; using random sampling", threshold)
        dist = CategoricalDistribution.single(ids)
        return dist, uniform_weights(dist)
    dist = CategoricalDistribution.from_labels(ids, labels)
    return dist, static_weights(dist)


def sample_trace(table: WeightTable, dist: CategoricalDistribution, rng: np.random.Generator,
                 size: int | None = None):
    """Draw a category from ``f'`` and then a member trace uniformly.

    With ``size`` given, returns an array of that many trace ids.
    """
    if tuple(table.categories) != tuple(dist.categories):
        raise ValueError("weight table and distribution disagree on categories")
    p = table.effective_pdf
    cdf = np.cumsum(p)
    last_live = int(np.flatnonzero(p > 0)[-1])
    n = 1 if size is None else int(size)
    cat_idx = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), last_live)
    out = []
    for ci, u in zip(cat_idx, rng.random(n)):
        members = dist.members[dist.categories[ci]]
        out.append(members[min(int(u * len(members)), len(members) - 1)])
    return out[0] if size is None else np.array(out)


@dataclass
class EpisodeResult:
    trace_id: str
    category: int
    return_G: float
    features: np.ndarray
    step: int = 0
    raw_return: float = 0.0


class _Mlp(nn.Module):
    def __init__(self, n_in: int, hidden: Sequence[int]):
        super().__init__()
        layers, prev = [], n_in
        for h in hidden:
            layers += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        layers.append(nn.Linear(prev, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).squeeze(-1)


class ReturnPredictor:
    """Feed-forward regressor from trace features to episode return.

    Training pairs live in a bounded FIFO per category. Targets are
    standardized by the current buffer statistics before regression.
    """

    def __init__(self, n_features: int, hidden: Sequence[int] = (64, 64), lr: float = 1e-3,
                 capacity: int = 256, seed: int = 0):
        self.n_features = int(n_features)
        self.hidden = tuple(hidden)
        self.lr = lr
        self.capacity = int(capacity)
        self.seed = seed
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.model = _Mlp(self.n_features, self.hidden)
        torch.random.set_rng_state(gen_state)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=lr)
        self.buffers: dict = {}
        self.steps = 0
        self.target_mean = 0.0
        self.target_std = 1.0
        self._rng = np.random.default_rng(seed)

    @property
    def trained(self) -> bool:
        return self.steps > 0

    def __len__(self) -> int:
        return sum(len(b) for b in self.buffers.values())

    def add(self, category, features, value: float) -> None:
        buf = self.buffers.setdefault(category, deque(maxlen=self.capacity))
        buf.append((np.asarray(features, dtype=np.float32), float(value)))

    def add_result(self, result: EpisodeResult) -> None:
        self.add(result.category, result.features, result.return_G)

    def predict(self, features) -> np.ndarray:
        x = torch.as_tensor(np.asarray(features, dtype=np.float32).reshape(-1, self.n_features))
        with torch.no_grad():
            out = self.model(x).numpy().astype(float)
        return out * self.target_std + self.target_mean

    def train_step(self, batch_size: int = 32) -> float | None:
        """One squared-error step on a uniform batch over all buffers.

        Returns the batch loss in target units, or None when fewer than
        ``batch_size`` pairs are stored.
        """
        pairs = [p for buf in self.buffers.values() for p in buf]
        if len(pairs) < batch_size or batch_size < 1:
            return None
        targets = np.fromiter((p[1] for p in pairs), dtype=float, count=len(pairs))
        self.target_mean = float(targets.mean())
        std = float(targets.std())
        self.target_std = std if std > 1e-8 else 1.0
        idx = self._rng.integers(len(pairs), size=batch_size)
        x = torch.as_tensor(np.stack([pairs[i][0] for i in idx]))
        y = torch.as_tensor(((targets[idx] - self.target_mean) / self.target_std).astype(np.float32))
        loss = torch.mean((self.model(x) - y) ** 2)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.steps += 1
        return float(loss.item()) * self.target_std ** 2

    def save(self, path) -> None:
        torch.save({
            "schema_version": PREDICTOR_SCHEMA,
            "kind": "return_predictor",
            "n_features": self.n_features,
            "hidden": list(self.hidden),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "steps": self.steps,
            "state_dict": self.model.state_dict(),
        }, path)

    @classmethod
    def load(cls, path) -> "ReturnPredictor":
        blob = torch.load(path, weights_only=False)
        if blob.get("kind") != "return_predictor" or blob.get("schema_version") != PREDICTOR_SCHEMA:
            raise ValueError(f"{path}: not a version-{PREDICTOR_SCHEMA} return predictor checkpoint")
        pred = cls(blob["n_features"], blob["hidden"])
        pred.model.load_state_dict(blob["state_dict"])
        pred.target_mean, pred.target_std, pred.steps = blob["target_mean"], blob["target_std"], blob["steps"]
        return pred


def _minmax(x: np.ndarray) -> np.ndarray:
    span = x.max() - x.min()
    if span <= 1e-12 * max(1.0, np.abs(x).max()):
        return np.zeros_like(x)
    return (x - x.min()) / span


def combine_dynamic_terms(error_term, return_term, w_min: float = 0.05) -> np.ndarray:
    """Min-max normalize both terms across categories, add them plus ``w_min``, scale to mean 1."""
    w = _minmax(np.asarray(error_term, dtype=float)) + _minmax(np.asarray(return_term, dtype=float)) + w_min
    return w / w.mean()


def update_dynamic_weights(predictor: ReturnPredictor, dist: CategoricalDistribution, recent: Mapping,
                           w_min: float = 0.05, previous: WeightTable | None = None) -> WeightTable:
    """Dynamic weights from per-category windows of (features, return) pairs.

    ``recent`` maps category -> iterable of :class:`EpisodeResult` or
    ``(features, return)`` pairs. The error term is the mean absolute
    prediction error on the window, the return term the negated mean
    return. Categories with an empty window take the global means.
    """
    feats, rets, owner = [], [], []
    for ci, c in enumerate(dist.categories):
        for item in recent.get(c, ()):
            if isinstance(item, EpisodeResult):
                f, g = item.features, item.return_G
            else:
                f, g = item
            feats.append(np.asarray(f, dtype=float))
            rets.append(float(g))
            owner.append(ci)
    if not rets:
        raise ValueError("no episode results to compute dynamic weights from")
    rets = np.asarray(rets)
    owner = np.asarray(owner)
    flags = []
    if predictor is not None and predictor.trained:
        abs_err = np.abs(predictor.predict(np.stack(feats)) - rets)
    else:
        flags.append("predictor_untrained")
        abs_err = np.full_like(rets, rets.std() if rets.size > 1 else 1.0)
    err_term = np.empty(dist.k)
    ret_term = np.empty(dist.k)
    for ci in range(dist.k):
        mask = owner == ci
        if mask.any():
            err_term[ci] = abs_err[mask].mean()
            ret_term[ci] = -rets[mask].mean()
        else:
            err_term[ci] = abs_err.mean()
            ret_term[ci] = -rets.mean()
    weights = combine_dynamic_terms(err_term, ret_term, w_min)
    base = previous if previous is not None else uniform_weights(dist)
    return base.replace(weights, flags=tuple(flags))


class WeightBoard:
    """Single-writer, many-reader holder of the current :class:`WeightTable`.

    Readers get the current immutable snapshot without locking; the writer
    swaps in a new table under a lock so versions only move forward.
    """

    def __init__(self, table: WeightTable):
        self._table = table
        self._lock = threading.Lock()
        self.history: list = [(0, table)]

    def snapshot(self) -> WeightTable:
        return self._table

    def publish(self, weights, episode: int = 0, flags: tuple = ()) -> WeightTable:
        with self._lock:
            table = self._table.replace(weights, flags=flags)
            self._table = table
            self.history.append((episode, table))
        return table

    def dump(self, path, cluster_classes: Mapping | None = None) -> None:
        series = [{"episode": ep, **t.to_json()} for ep, t in self.history]
        blob = {"schema_version": 1, "series": series}
        if cluster_classes is not None:
            blob["cluster_classes"] = {str(k): v for k, v in cluster_classes.items()}
        with open(path, "w") as fh:
            json.dump(blob, fh, indent=1)
            fh.write("\n")


class TraceSelector:
    """The trace-selection service queried by actors for their next trace."""

    def __init__(self, dist: CategoricalDistribution, board: WeightBoard, seed: int = 0):
        self.dist = dist
        self.board = board
        self.rng = np.random.default_rng(seed)
        self.counts = {c: 0 for c in dist.categories}

    def sample(self) -> str:
        tid = sample_trace(self.board.snapshot(), self.dist, self.rng)
        self.counts[self.dist.category_of(tid)] += 1
        return tid


@dataclass
class DynamicConfig:
    w_min: float = 0.05
    update_every: int = 64
    window: int = 256
    cold_start_updates: int = 10
    hidden: tuple = (64, 64)
    lr: float = 1e-3
    batch_size: int = 32
    train_steps_per_episode: int = 1


@dataclass
class DynamicPrioritizer:
    """Consumes finished episodes and republishes dynamic weights.

    Producers call :meth:`submit` from any thread; a single consumer calls
    :meth:`process`, which trains the return predictor and recomputes the
    weights every ``update_every`` episodes once the cold-start period of
    ``cold_start_updates * update_every`` episodes has passed.
    """

    dist: CategoricalDistribution
    board: WeightBoard
    n_features: int
    cfg: DynamicConfig = field(default_factory=DynamicConfig)
    seed: int = 0

    def __post_init__(self):
        self.predictor = ReturnPredictor(self.n_features, self.cfg.hidden, self.cfg.lr, self.cfg.window, self.seed)
        self.queue: queue.SimpleQueue = queue.SimpleQueue()
        self.episodes = 0
        self.losses: list = []

    def submit(self, result: EpisodeResult) -> None:
        self.queue.put(result)

    def process(self) -> WeightTable | None:
        published = None
        while True:
            try:
                result = self.queue.get_nowait()
            except queue.Empty:
                break
            if self.dist.category_of(result.trace_id) != result.category:
                raise ValueError(f"episode category mismatch for trace {result.trace_id!r}")
            self.predictor.add_result(result)
            self.episodes += 1
            for _ in range(self.cfg.train_steps_per_episode):
                loss = self.predictor.train_step(self.cfg.batch_size)
                if loss is not None:
                    self.losses.append(loss)
            start = self.cfg.cold_start_updates * self.cfg.update_every
            if self.episodes >= start and (self.episodes - start) % self.cfg.update_every == 0:
                table = update_dynamic_weights(self.predictor, self.dist, self.predictor.buffers,
                                               self.cfg.w_min, self.board.snapshot())
                published = self.board.publish(table.weights, self.episodes, table.flags)
        return published
