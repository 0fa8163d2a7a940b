"""Chunk-level adaptive-bitrate simulator driven by a throughput trace.

Downloads follow a fluid model: a chunk of ``size`` MB takes the time needed
for the integrated trace throughput to reach ``size``. The trace repeats
cyclically if the wall clock runs past its end. The reward of a chunk is its
nominal bitrate minus ``stall_penalty`` times the stall seconds it caused.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from ..traces import Trace

BITRATES = (1.0, 3.0, 6.0)  # MB/s, one-second chunks
OBS_FIELDS = 4  # bitrate, transmit time, stall, measured throughput


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class AbrConfig:
    bitrates: tuple = BITRATES
    chunk_duration: float = 1.0
    max_buffer: float = 15.0
    stall_penalty: float = 6.0
    chunk_noise: float = 0.1
    history_len: int = 10
    max_chunks: int = 100

    @property
    def n_actions(self) -> int:
        return len(self.bitrates)

    @property
    def obs_dim(self) -> int:
        return self.history_len * OBS_FIELDS + 1


@dataclass
class AbrEnvState:
    buffer: float = 0.0
    chunk_index: int = 0
    wall_time: float = 0.0
    n_chunks: int = 0
    chunk_noise: np.ndarray = field(default_factory=lambda: np.zeros(0))
    history: deque = field(default_factory=deque)
    done: bool = False


@dataclass(frozen=True)
class StepInfo:
    bitrate: float
    size: float
    transmit: float
    stall: float
    startup: float
    idle: float
    buffer_before: float
    buffer_after: float


class _Link:
    """Piecewise-constant throughput over one trace period."""

    def __init__(self, trace: Trace):
        t = np.asarray(trace.times, dtype=float)
        self.values = np.asarray(trace.values, dtype=float)
        if t.size > 1:
            step = float(np.median(np.diff(t)))
            self.ends = np.append(t[1:], t[-1] + step) - t[0]
        else:
            self.ends = np.array([1.0])
        self.starts = np.concatenate([[0.0], self.ends[:-1]])
        self.period = float(self.ends[-1])
        if not np.any(self.values * (self.ends - self.starts) > 0):
            raise ValueError(f"trace {trace.id!r} carries no throughput")

    def download_time(self, start: float, size: float) -> float:
        pos = start % self.period
        j = int(np.searchsorted(self.ends, pos, side="right"))
        j = min(j, self.values.size - 1)
        remaining = size
        elapsed = 0.0
        while True:
            rate = self.values[j]
            span = self.ends[j] - pos
            if rate > 0 and rate * span >= remaining:
                return elapsed + remaining / rate
            remaining -= rate * span
            elapsed += span
            j += 1
            if j == self.values.size:
                j = 0
            pos = self.starts[j]


@lru_cache(maxsize=4096)
def _link(trace: Trace) -> _Link:
    return _Link(trace)


def initial_state(trace: Trace, cfg: AbrConfig, seed: int) -> AbrEnvState:
    n = min(cfg.max_chunks, len(trace))
    noise = np.random.default_rng(seed).standard_normal(n)
    history = deque([(0.0, 0.0, 0.0, 0.0)] * cfg.history_len, maxlen=cfg.history_len)
    return AbrEnvState(0.0, 0, 0.0, n, noise, history, n == 0)


def abr_step(state: AbrEnvState, action: int, trace: Trace, cfg: AbrConfig = AbrConfig()):
    """Download one chunk at bitrate ``action``; returns ``(next_state, reward, info)``.

    The download of the first chunk is startup delay and is not penalized.
    If the buffer would exceed ``max_buffer`` the client idles until it fits.
    """
    if state.done:
        raise EpisodeDone("episode already finished; call reset")
    if not 0 <= int(action) < cfg.n_actions:
        raise ValueError(f"action {action} out of range [0, {cfg.n_actions})")
    bitrate = cfg.bitrates[int(action)]
    z = state.chunk_noise[state.chunk_index]
    size = bitrate * cfg.chunk_duration * float(np.clip(1.0 + cfg.chunk_noise * z, 0.5, 1.5))
    transmit = _link(trace).download_time(state.wall_time, size)
    before = state.buffer
    shortfall = max(0.0, transmit - before)
    startup = shortfall if state.chunk_index == 0 else 0.0
    stall = shortfall - startup
    buffer = max(before - transmit, 0.0) + cfg.chunk_duration
    idle = max(0.0, buffer - cfg.max_buffer)
    buffer -= idle
    reward = bitrate - cfg.stall_penalty * stall
    history = deque(state.history, maxlen=cfg.history_len)
    history.append((bitrate, transmit, stall, size / transmit))
    chunk = state.chunk_index + 1
    nxt = replace(state, buffer=buffer, chunk_index=chunk, wall_time=state.wall_time + transmit + idle,
                  history=history, done=chunk >= state.n_chunks)
    return nxt, reward, StepInfo(bitrate, size, transmit, stall, startup, idle, before, buffer)


def observation(state: AbrEnvState, cfg: AbrConfig = AbrConfig()) -> np.ndarray:
    hist = np.asarray(state.history, dtype=np.float32)
    scale = np.array([1.0 / max(cfg.bitrates), 0.1, 0.1, 0.1], dtype=np.float32)
    feats = np.minimum(hist * scale, 5.0).reshape(-1)
    return np.append(feats, np.float32(state.buffer / cfg.max_buffer)).astype(np.float32)


class AbrEnv:
    """Stateful wrapper around :func:`abr_step` with a gym-like interface."""

    def __init__(self, cfg: AbrConfig = AbrConfig()):
        self.cfg = cfg
        self.trace: Trace | None = None
        self.state: AbrEnvState | None = None
        self.log: list | None = None

    @property
    def obs_dim(self) -> int:
        return self.cfg.obs_dim

    @property
    def n_actions(self) -> int:
        return self.cfg.n_actions

    def reset(self, trace: Trace, seed: int = 0, record: bool = False) -> np.ndarray:
        self.trace = trace
        self.state = initial_state(trace, self.cfg, seed)
        self.log = [] if record else None
        return observation(self.state, self.cfg)

    def step(self, action: int):
        if self.state is None:
            raise EpisodeDone("reset must be called before step")
        self.state, reward, info = abr_step(self.state, action, self.trace, self.cfg)
        if self.log is not None:
            self.log.append({"chunk": self.state.chunk_index - 1, "action": int(action),
                             "transmit": info.transmit, "stall": info.stall, "reward": reward})
        return observation(self.state, self.cfg), reward, self.state.done, info
