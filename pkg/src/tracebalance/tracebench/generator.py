"""Parametric throughput traces: a two-state Markov chain per trace class."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .._seeding import derive_seed
from ..traces import Trace, TraceDataset, TraceKind

MAX_DURATION = 100.0


class TraceClass(str, enum.Enum):
    FAST_LOW_VAR = "fast_low_var"
    FAST_HIGH_VAR = "fast_high_var"
    SLOW_LOW_VAR = "slow_low_var"
    SLOW_HIGH_VAR = "slow_high_var"

    @property
    def is_slow(self) -> bool:
        return self.value.startswith("slow")


@dataclass(frozen=True)
class TraceGenConfig:
    trace_class: TraceClass
    markov: tuple[float, float]  # (p_high_to_low, p_low_to_high)
    levels: tuple[float, float]  # (high, low) in MB/s
    noise: float = 0.02
    duration: float = MAX_DURATION
    step: float = 1.0
    seed: int = 0
    start_high: bool | None = None  # None: draw from the stationary distribution

    def __post_init__(self):
        object.__setattr__(self, "trace_class", TraceClass(self.trace_class))
        p_hl, p_lh = self.markov
        if not (0 <= p_hl <= 1 and 0 <= p_lh <= 1):
            raise ValueError("switching probabilities must lie in [0, 1]")
        hi, lo = self.levels
        if not hi > lo > 0:
            raise ValueError("levels must satisfy high > low > 0")
        if not 0 < self.duration <= MAX_DURATION:
            raise ValueError(f"duration must be in (0, {MAX_DURATION}] seconds")
        if self.step <= 0 or self.noise < 0:
            raise ValueError("step must be positive and noise non-negative")

    def with_seed(self, seed: int) -> "TraceGenConfig":
        return TraceGenConfig(self.trace_class, self.markov, self.levels, self.noise, self.duration,
                              self.step, seed, self.start_high)


# Both variance classes of a speed share the same long-run mean; the
# high-variance classes switch often between widely separated levels.
CLASS_PRESETS = {
    TraceClass.FAST_LOW_VAR: TraceGenConfig(TraceClass.FAST_LOW_VAR, (0.05, 0.05), (6.5, 5.5), 0.02),
    TraceClass.FAST_HIGH_VAR: TraceGenConfig(TraceClass.FAST_HIGH_VAR, (0.35, 0.35), (9.5, 2.5), 0.10),
    TraceClass.SLOW_LOW_VAR: TraceGenConfig(TraceClass.SLOW_LOW_VAR, (0.05, 0.05), (0.9, 0.7), 0.02),
    TraceClass.SLOW_HIGH_VAR: TraceGenConfig(TraceClass.SLOW_HIGH_VAR, (0.35, 0.35), (1.4, 0.2), 0.10),
}

# class shares per dataset composition, in TraceClass order
COMPOSITIONS = {
    "majority_fast": (0.4, 0.4, 0.1, 0.1),
    "balanced": (0.25, 0.25, 0.25, 0.25),
    "majority_slow": (0.1, 0.1, 0.4, 0.4),
}

# scenario -> (train composition, test composition)
SCENARIOS = {
    1: ("majority_fast", "majority_slow"),
    2: ("balanced", "balanced"),
    3: ("majority_slow", "majority_fast"),
}


def markov_states(n: int, p_hl: float, p_lh: float, rng: np.random.Generator, start_high: bool | None = None):
    """Boolean high/low state sequence of a two-state chain."""
    if start_high is None:
        total = p_hl + p_lh
        p_high = 0.5 if total == 0 else p_lh / total
        start_high = bool(rng.random() < p_high)
    u = rng.random(n)
    states = np.empty(n, dtype=bool)
    s = start_high
    for i in range(n):
        states[i] = s
        if s and u[i] < p_hl:
            s = False
        elif not s and u[i] < p_lh:
            s = True
    return states


def generate_trace(cfg: TraceGenConfig, trace_id: str | None = None) -> Trace:
    rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.duration / cfg.step))
    states = markov_states(n, cfg.markov[0], cfg.markov[1], rng, cfg.start_high)
    hi, lo = cfg.levels
    level = np.where(states, hi, lo)
    values = np.maximum(level * (1.0 + cfg.noise * rng.standard_normal(n)), 0.0)
    times = cfg.step * np.arange(n)
    return Trace(trace_id or f"{cfg.trace_class.value}-{cfg.seed}", TraceKind.THROUGHPUT, times, values,
                 ground_truth_class=cfg.trace_class.value)


def class_counts(shares, n: int) -> list[int]:
    """Largest-remainder apportionment of ``n`` traces over ``shares``."""
    raw = np.asarray(shares, dtype=float) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def build_dataset(kind: str, n: int, seed: int, split: str = "train") -> TraceDataset:
    """Build a TraceBench dataset of ``n`` traces.

    ``split`` enters every per-trace seed, so train and test datasets built
    from the same master seed never share a trace.
    """
    if kind not in COMPOSITIONS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {sorted(COMPOSITIONS)}")
    if n < 4:
        raise ValueError("a TraceBench dataset needs at least 4 traces")
    classes = []
    for cls, count in zip(TraceClass, class_counts(COMPOSITIONS[kind], n)):
        classes += [cls] * count
    order = np.random.default_rng(derive_seed(seed, f"order:{kind}:{split}")).permutation(n)
    traces = []
    for i, pos in enumerate(order):
        cls = classes[pos]
        cfg = CLASS_PRESETS[cls].with_seed(derive_seed(seed, f"trace:{kind}:{split}", i))
        traces.append(generate_trace(cfg, f"{kind}-{split}-{i:05d}"))
    return TraceDataset(f"{kind}-{split}", tuple(traces))


def build_scenario(scenario: int, n_train: int, n_test: int, seed: int) -> tuple[TraceDataset, TraceDataset]:
    train_kind, test_kind = SCENARIOS[scenario]
    return build_dataset(train_kind, n_train, seed, "train"), build_dataset(test_kind, n_test, seed, "test")
