"""Companion load-balancing environment: FIFO servers fed by a job trace.

A job trace is a ``job_size_series`` whose sample times are arrival times
and whose values are job sizes. Each step assigns the next arriving job to a
server; the reward is the negated completion time of that job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..traces import Trace, TraceKind

TRACE_LENGTH = 650
INTERARRIVAL_MEAN = 55.0
PARETO_SCALE = 1.5
PARETO_SHAPE = 100.0


def lb_generate(seed: int, n_jobs: int = TRACE_LENGTH, interarrival_mean: float = INTERARRIVAL_MEAN,
                pareto_scale: float = PARETO_SCALE, pareto_shape: float = PARETO_SHAPE,
                trace_id: str | None = None) -> Trace:
    """Poisson arrivals with Pareto(scale, shape) job sizes."""
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(interarrival_mean, n_jobs)
    gaps = np.maximum(gaps, np.finfo(float).tiny)
    arrivals = np.cumsum(gaps)
    sizes = (rng.pareto(pareto_shape, n_jobs) + 1.0) * pareto_scale
    return Trace(trace_id or f"lb-{seed}", TraceKind.JOB_SIZE, arrivals, sizes)


@dataclass
class LbState:
    free_at: np.ndarray  # time each server drains its queue
    job_index: int = 0
    done: bool = False


def lb_reset(n_servers: int) -> LbState:
    if n_servers < 1:
        raise ValueError("need at least one server")
    return LbState(np.zeros(n_servers))


def lb_step(state: LbState, action: int, trace: Trace, service_rates=None):
    """Queue the next job on server ``action``; returns ``(next_state, reward, completion_time)``."""
    if state.done:
        raise RuntimeError("episode already finished")
    n = state.free_at.size
    if not 0 <= int(action) < n:
        raise ValueError(f"invalid server index {action} for {n} servers")
    rates = np.ones(n) if service_rates is None else np.asarray(service_rates, dtype=float)
    i = state.job_index
    arrival = float(trace.times[i])
    size = float(trace.values[i])
    start = max(arrival, float(state.free_at[action]))
    finish = start + size / rates[action]
    free_at = state.free_at.copy()
    free_at[action] = finish
    completion = finish - arrival
    nxt = LbState(free_at, i + 1, i + 1 >= len(trace))
    return nxt, -completion, completion


def lb_observation(state: LbState, trace: Trace) -> np.ndarray:
    i = min(state.job_index, len(trace) - 1)
    arrival = float(trace.times[i])
    backlog = np.maximum(state.free_at - arrival, 0.0)
    return np.concatenate([[trace.values[i]], backlog]).astype(np.float32)


class LbEnv:
    """Gym-like wrapper; observations are scaled by ``obs_scale`` for the agent."""

    def __init__(self, n_servers: int = 3, service_rates=None, obs_scale: float = 0.01):
        self.n_servers = n_servers
        self.service_rates = service_rates
        self.obs_scale = obs_scale
        self.trace = None
        self.state = None

    @property
    def obs_dim(self) -> int:
        return self.n_servers + 1

    @property
    def n_actions(self) -> int:
        return self.n_servers

    def reset(self, trace: Trace, seed: int = 0, record: bool = False) -> np.ndarray:
        # job traces carry no per-episode noise, so the seed is unused
        self.trace = trace
        self.state = lb_reset(self.n_servers)
        return lb_observation(self.state, trace) * np.float32(self.obs_scale)

    def step(self, action: int):
        self.state, reward, completion = lb_step(self.state, action, self.trace, self.service_rates)
        obs = lb_observation(self.state, self.trace) * np.float32(self.obs_scale)
        return obs, reward, self.state.done, {"completion": completion}
