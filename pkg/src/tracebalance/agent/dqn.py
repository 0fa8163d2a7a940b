"""n-step DQN: Q network, epsilon-greedy acting, and the learner."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .._seeding import derive_seed, make_rng
from ..traces import REWARD_CLIP, normalize_reward
from .replay import PrioritizedReplayBuffer, ReplayBuffer

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class AgentConfig:
    history_len: int = 10
    n_step: int = 7
    gamma: float = 0.975
    lr: float = 1e-4
    eps_schedule: tuple = (1.0, 0.05, 50_000)  # start, end, anneal steps
    replay_capacity: int = 50_000
    batch_size: int = 64
    target_sync_interval: int = 500  # learn steps
    hidden_sizes: tuple = (256, 256)
    seed: int = 0
    dueling: bool = False
    double: bool = False
    prioritized: bool = False
    per_alpha: float = 0.6
    per_beta: tuple = (0.4, 1.0)
    per_eta: float = 1e-3
    normalize_rewards: bool = True
    reward_epsilon: float = 1e-2
    grad_clip: float = 0.0  # 0 disables norm clipping

    def __post_init__(self):
        if self.n_step < 1:
            raise ValueError("n_step must be >= 1")
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay_capacity must be >= batch_size")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")

    def epsilon(self, step: int) -> float:
        start, end, anneal = self.eps_schedule
        if anneal <= 0:
            return float(end)
        frac = min(max(step, 0) / anneal, 1.0)
        return float(start + frac * (end - start))


class QNetwork(nn.Module):
    def __init__(self, obs_dim: int, n_actions: int, hidden: Sequence[int] = (256, 256), dueling: bool = False):
        super().__init__()
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.dueling = dueling
        layers, prev = [], obs_dim
        for h in hidden:
            layers += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        self.body = nn.Sequential(*layers)
        if dueling:
            self.value = nn.Linear(prev, 1)
            self.advantage = nn.Linear(prev, n_actions)
        else:
            self.head = nn.Linear(prev, n_actions)

    def forward(self, x):
        z = self.body(x)
        if not self.dueling:
            return self.head(z)
        a = self.advantage(z)
        return self.value(z) + a - a.mean(dim=-1, keepdim=True)

    def q_values(self, obs) -> np.ndarray:
        x = torch.as_tensor(np.asarray(obs, dtype=np.float32))
        with torch.no_grad():
            return self(x).numpy()


def act(state, network: QNetwork, epsilon: float, rng: np.random.Generator):
    """Epsilon-greedy action; greedy ties go to the lowest index.

    ``state`` may be one observation or a batch of them.
    """
    s = np.asarray(state, dtype=np.float32)
    if s.shape[-1] != network.obs_dim or s.ndim not in (1, 2):
        raise ValueError(f"state shape {s.shape} does not match network input ({network.obs_dim},)")
    batch = np.atleast_2d(s)
    greedy = np.argmax(network.q_values(batch), axis=1)  # first maximum wins
    explore = rng.random(batch.shape[0]) < epsilon
    randoms = rng.integers(network.n_actions, size=batch.shape[0])
    actions = np.where(explore, randoms, greedy)
    return int(actions[0]) if s.ndim == 1 else actions


def make_adam(params, lr: float):
    # the fused kernel is several times faster on small CPU networks
    try:
        return torch.optim.Adam(params, lr=lr, fused=True)
    except (RuntimeError, TypeError):
        return torch.optim.Adam(params, lr=lr)


def _seeded_network(obs_dim, n_actions, cfg: AgentConfig) -> QNetwork:
    state = torch.random.get_rng_state()
    torch.manual_seed(derive_seed(cfg.seed, "qnet"))
    net = QNetwork(obs_dim, n_actions, cfg.hidden_sizes, cfg.dueling)
    torch.random.set_rng_state(state)
    return net


class Learner:
    """Owns the online and target networks, the optimizer and the replay.

    The target network is copied from the online one every
    ``target_sync_interval`` learn steps and at no other time.
    """

    def __init__(self, obs_dim: int, n_actions: int, cfg: AgentConfig = AgentConfig()):
        self.cfg = cfg
        self.online = _seeded_network(obs_dim, n_actions, cfg)
        self.target = copy.deepcopy(self.online)
        self.target.requires_grad_(False)
        self.optimizer = make_adam(self.online.parameters(), cfg.lr)
        if cfg.prioritized:
            self.replay = PrioritizedReplayBuffer(cfg.replay_capacity, obs_dim, cfg.n_step, cfg.gamma,
                                                  cfg.per_alpha, cfg.per_eta)
        else:
            self.replay = ReplayBuffer(cfg.replay_capacity, obs_dim, cfg.n_step, cfg.gamma)
        self.rng = make_rng(cfg.seed, "replay")
        self.updates = 0
        self.syncs = 0

    def store(self, obs, action, rewards, next_obs, done, steps=None) -> int:
        r = np.asarray(rewards, dtype=float)
        if self.cfg.normalize_rewards:
            r = normalize_reward(r, self.cfg.reward_epsilon, REWARD_CLIP)
        return self.replay.add(obs, action, r, next_obs, done, steps)

    def beta(self, progress: float) -> float:
        b0, b1 = self.cfg.per_beta
        return b0 + min(max(progress, 0.0), 1.0) * (b1 - b0)

    def learn(self, progress: float = 0.0):
        """One gradient step; returns the batch TD errors, or None if replay is too small."""
        out = learn_step(self.replay, self.online, self.target, self.optimizer, self.cfg,
                         self.rng, self.beta(progress))
        if out is None:
            return None
        self.updates += 1
        if self.updates % self.cfg.target_sync_interval == 0:
            self.sync_target()
        return out

    def sync_target(self) -> None:
        self.target.load_state_dict(self.online.state_dict())
        self.syncs += 1

    def snapshot(self) -> QNetwork:
        """Frozen copy of the online network for actors."""
        net = copy.deepcopy(self.online)
        net.requires_grad_(False)
        return net

    def save(self, path, **extra) -> None:
        torch.save({"schema_version": CHECKPOINT_SCHEMA, "kind": "q_network",
                    "obs_dim": self.online.obs_dim, "n_actions": self.online.n_actions,
                    "hidden": list(self.cfg.hidden_sizes), "dueling": self.cfg.dueling,
                    "updates": self.updates, "state_dict": self.online.state_dict(), **extra}, path)


def load_network(path) -> QNetwork:
    blob = torch.load(path, weights_only=False)
    if blob.get("kind") != "q_network" or blob.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_SCHEMA} Q-network checkpoint")
    net = QNetwork(blob["obs_dim"], blob["n_actions"], blob["hidden"], blob["dueling"])
    net.load_state_dict(blob["state_dict"])
    net.requires_grad_(False)
    return net


def learn_step(replay: ReplayBuffer, network: QNetwork, target_network: QNetwork, optimizer,
               cfg: AgentConfig, rng: np.random.Generator, beta: float = 0.4):
    """Squared TD error on ``R_n + gamma**n * max_a Q_target(s_{t+n}, a)``.

    Terminal transitions carry a zero discount, so they do not bootstrap.
    With double Q-learning the online network picks the bootstrap action.
    Returns the TD errors of the batch, or None when the replay holds fewer
    than ``batch_size`` transitions.
    """
    if len(replay) < cfg.batch_size:
        return None
    idx, weights = replay.sample(cfg.batch_size, rng, beta)
    obs, actions, returns, next_obs, discounts = (torch.as_tensor(a) for a in replay.batch(idx))
    with torch.no_grad():
        q_next = target_network(next_obs)
        if cfg.double:
            a_star = network(next_obs).argmax(dim=1, keepdim=True)
            boot = q_next.gather(1, a_star).squeeze(1)
        else:
            boot = q_next.max(dim=1).values
        target = returns + discounts * boot
    q = network(obs).gather(1, actions.unsqueeze(1)).squeeze(1)
    td = q - target
    loss = torch.mean(torch.as_tensor(weights) * td ** 2)
    optimizer.zero_grad()
    loss.backward()
    if cfg.grad_clip:
        nn.utils.clip_grad_norm_(network.parameters(), cfg.grad_clip)
    optimizer.step()
    td_np = td.detach().numpy().astype(float)
    replay.update_priorities(idx, td_np)
    return td_np
