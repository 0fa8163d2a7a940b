"""Training loop: trace sampler -> actors -> replay -> learner, with held-out evaluation.

Actors advance in lockstep inside one process. Each tick every actor takes
one step with the current actor snapshot of the Q network and pushes its
n-step transitions onto a shared queue; the learner drains the queue into
replay and runs its scheduled gradient steps. Finished episodes go to the
trace prioritizer when the sampler is dynamic.
"""

from __future__ import annotations

import csv
import logging
import queue
from dataclasses import dataclass, field

import numpy as np
import torch

from .._seeding import derive_seed, make_rng
from ..pipeline import Categorization
from ..prioritization import (CategoricalDistribution, DynamicConfig, DynamicPrioritizer, EpisodeResult,
                              TraceSelector, WeightBoard, static_weights, two_class_equal_weights,
                              uniform_weights)
from ..tracebench.abr import AbrConfig, AbrEnv
from ..tracebench.generator import TraceClass
from ..tracebench.lb import LbEnv
from ..traces import ReturnSpec, TraceDataset, discounted_return
from .dqn import AgentConfig, Learner, QNetwork, act
from .replay import NStepAccumulator

log = logging.getLogger(__name__)

SAMPLERS = ("random", "two_class", "plume_static", "plume_dynamic")
METRICS_SCHEMA = 1
EPISODE_RETURN = ReturnSpec(gamma=1.0, normalize=True)


@dataclass(frozen=True)
class TrainConfig:
    sampler: str = "random"
    total_steps: int = 150_000  # env steps summed over actors
    n_actors: int = 4
    learning_starts: int = 2_000
    learn_every: int = 4  # env steps per gradient step
    actor_sync_interval: int = 50  # gradient steps between actor snapshots
    eval_every: int = 50_000
    two_class_threshold: float = 3.0
    dynamic: DynamicConfig = field(default_factory=lambda: DynamicConfig(update_every=16, window=64,
                                                                           cold_start_updates=4))
    eval_seed: int = 0
    env: str = "abr"

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLERS}")
        if self.n_actors < 1 or self.learn_every < 1 or self.eval_every < 1:
            raise ValueError("n_actors, learn_every and eval_every must be positive")


def make_env(kind: str):
    if kind == "abr":
        return AbrEnv(AbrConfig())
    if kind == "lb":
        return LbEnv()
    raise ValueError(f"unknown environment {kind!r}")


class Sampler:
    """Trace source for actors; wraps a selector and, if dynamic, a prioritizer."""

    def __init__(self, name: str, dist: CategoricalDistribution, board: WeightBoard, seed: int,
                 prioritizer: DynamicPrioritizer | None = None, features: dict | None = None):
        self.name = name
        self.dist = dist
        self.board = board
        self.selector = TraceSelector(dist, board, seed)
        self.prioritizer = prioritizer
        self.features = features or {}

    def sample(self) -> str:
        return self.selector.sample()

    def observe(self, trace_id: str, rewards, step: int) -> EpisodeResult:
        raw = float(np.sum(rewards))
        result = EpisodeResult(trace_id, self.dist.category_of(trace_id),
                               discounted_return(rewards, EPISODE_RETURN),
                               self.features.get(trace_id), step, raw)
        if self.prioritizer is not None:
            self.prioritizer.submit(result)
            self.prioritizer.process()
        return result


def make_sampler(name: str, dataset: TraceDataset, categories: Categorization | None, cfg: TrainConfig,
                 seed: int) -> Sampler:
    rng_seed = derive_seed(seed, "sampler")
    if name == "random":
        dist = CategoricalDistribution.single(dataset.ids)
        return Sampler(name, dist, WeightBoard(uniform_weights(dist)), rng_seed)
    if name == "two_class":
        dist, table = two_class_equal_weights(dataset, cfg.two_class_threshold)
        return Sampler(name, dist, WeightBoard(table), rng_seed)
    if categories is None:
        raise ValueError(f"sampler {name!r} needs a clustered dataset")
    if set(categories.dist._category_of) != set(dataset.ids):
        raise ValueError("clustering does not cover exactly the training traces")
    dist = categories.dist
    if name == "plume_static":
        return Sampler(name, dist, WeightBoard(static_weights(dist)), rng_seed)
    board = WeightBoard(uniform_weights(dist))
    n_feat = len(next(iter(categories.features.values())))
    prio = DynamicPrioritizer(dist, board, n_feat, cfg.dynamic, derive_seed(seed, "predictor"))
    return Sampler(name, dist, board, rng_seed, prio, categories.features)


def evaluate(network: QNetwork, dataset: TraceDataset, env_kind: str = "abr", eval_seed: int = 0) -> dict:
    """Greedy raw return per trace, all traces stepped in lockstep.

    Episode noise seeds depend only on ``eval_seed`` and the trace position,
    so every policy is scored on identical conditions.
    """
    envs, obs = [], []
    for i, tr in enumerate(dataset):
        env = make_env(env_kind)
        obs.append(env.reset(tr, seed=derive_seed(eval_seed, "eval", i)))
        envs.append(env)
    totals = np.zeros(len(envs))
    live = np.ones(len(envs), dtype=bool)
    obs = np.stack(obs)
    while live.any():
        idx = np.flatnonzero(live)
        actions = np.argmax(network.q_values(obs[idx]), axis=1)
        for j, a in zip(idx, actions):
            o, r, done, _ = envs[j].step(int(a))
            obs[j] = o
            totals[j] += r
            live[j] = not done
    return dict(zip(dataset.ids, totals.tolist()))


def summarize(returns: dict, dataset: TraceDataset) -> dict:
    """Mean return overall, per ground-truth class, and over slow and fast classes."""
    vals = np.array([returns[t] for t in dataset.ids])
    out = {"mean_return_all": float(vals.mean())}
    classes = [dataset[t].ground_truth_class for t in dataset.ids]
    if all(c is None for c in classes):
        return out
    for cls in TraceClass:
        mask = np.array([c == cls.value for c in classes])
        out[f"mean_return_{cls.value}"] = float(vals[mask].mean()) if mask.any() else float("nan")
    for tag, slow in (("slow", True), ("fast", False)):
        mask = np.array([c is not None and TraceClass(c).is_slow == slow for c in classes])
        out[f"mean_return_{tag}"] = float(vals[mask].mean()) if mask.any() else float("nan")
    return out


@dataclass
class TrainResult:
    metrics: list
    learner: Learner
    sampler: Sampler
    episodes: list  # (trace_id, category, raw return, step)

    @property
    def final(self) -> dict:
        return self.metrics[-1]

    def category_counts(self) -> dict:
        return dict(self.sampler.selector.counts)

    def write_metrics(self, path) -> None:
        write_metrics_csv(self.metrics, path)


def write_metrics_csv(rows, path) -> None:
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={METRICS_SCHEMA} kind=metrics\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


class _Actor:
    def __init__(self, env, n_step: int):
        self.env = env
        self.acc = NStepAccumulator(n_step)
        self.obs = None
        self.trace_id = None
        self.rewards: list = []


def train(train_ds: TraceDataset, test_ds: TraceDataset, categories: Categorization | None = None,
          cfg: TrainConfig = TrainConfig(), agent: AgentConfig = AgentConfig()) -> TrainResult:
    """Train one agent and evaluate it on ``test_ds`` every ``eval_every`` steps and at the end."""
    test_ids = set(test_ds.ids)
    if test_ids & set(train_ds.ids):
        raise ValueError("held-out traces overlap the training set")
    seed = agent.seed
    torch.set_num_threads(1)
    sampler = make_sampler(cfg.sampler, train_ds, categories, cfg, seed)
    probe = make_env(cfg.env)
    learner = Learner(probe.obs_dim, probe.n_actions, agent)
    actor_net = learner.snapshot()
    act_rng = make_rng(seed, "actors")
    transitions: queue.SimpleQueue = queue.SimpleQueue()
    episodes: list = []
    n_started = 0

    def start(actor: _Actor) -> None:
        nonlocal n_started
        tid = sampler.sample()
        assert tid not in test_ids, f"held-out trace {tid} drawn for training"
        actor.trace_id = tid
        actor.obs = actor.env.reset(train_ds[tid], seed=derive_seed(seed, "episode", n_started))
        actor.rewards = []
        actor.acc.reset()
        n_started += 1

    def checkpoint(step: int) -> dict:
        try:
            returns = evaluate(actor_net if step == 0 else learner.snapshot(), test_ds, cfg.env, cfg.eval_seed)
        except Exception as exc:
            raise RuntimeError(f"evaluation at step {step}: {exc}") from exc
        row = {"step": step, "episodes": len(episodes), "updates": learner.updates}
        row.update(summarize(returns, test_ds))
        row["weights_version"] = sampler.board.snapshot().version
        log.info("step %d: %s", step, row)
        return row

    metrics = [checkpoint(0)]
    if cfg.total_steps <= 0:
        return TrainResult(metrics, learner, sampler, episodes)

    actors = [_Actor(make_env(cfg.env), agent.n_step) for _ in range(cfg.n_actors)]
    for a in actors:
        start(a)
    step = 0
    next_eval = cfg.eval_every
    while step < cfg.total_steps:
        batch = np.stack([a.obs for a in actors])
        actions = act(batch, actor_net, agent.epsilon(step), act_rng)
        for actor, action in zip(actors, actions):
            try:
                next_obs, reward, done, _ = actor.env.step(int(action))
            except Exception as exc:
                raise RuntimeError(f"env step {step} on trace {actor.trace_id}: {exc}") from exc
            for t in actor.acc.push(actor.obs, int(action), reward, next_obs, done):
                transitions.put(t)
            actor.rewards.append(reward)
            actor.obs = next_obs
            step += 1
            if done:
                res = sampler.observe(actor.trace_id, actor.rewards, step)
                episodes.append((res.trace_id, res.category, res.raw_return, step))
                start(actor)
        while not transitions.empty():
            learner.store(*transitions.get_nowait())
        due = max(0, (step - cfg.learning_starts) // cfg.learn_every)
        while learner.updates < due:
            if learner.learn(step / cfg.total_steps) is None:
                break
            if learner.updates % cfg.actor_sync_interval == 0:
                actor_net = learner.snapshot()
        if step >= next_eval or step >= cfg.total_steps:
            metrics.append(checkpoint(step))
            next_eval += cfg.eval_every
    return TrainResult(metrics, learner, sampler, episodes)
