"""n-step experience replay, uniform or proportionally prioritized."""

from __future__ import annotations

from collections import deque

import numpy as np


class NStepAccumulator:
    """Turns one actor's single-step transitions into n-step transitions.

    Emits ``(obs, action, rewards, next_obs, done, steps)`` where ``rewards``
    holds the raw per-step rewards (at most ``n``) and ``next_obs`` is the
    observation ``steps`` steps later.
    """

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("n_step must be >= 1")
        self.n = n
        self.pending: deque = deque()

    def push(self, obs, action, reward, next_obs, done):
        self.pending.append((obs, action, float(reward)))
        out = []
        if len(self.pending) == self.n:
            out.append(self._emit(next_obs, done))
        if done:
            while self.pending:
                out.append(self._emit(next_obs, True))
        return out

    def _emit(self, next_obs, done):
        obs, action, _ = self.pending[0]
        rewards = [r for _, _, r in self.pending]
        self.pending.popleft()
        return obs, action, rewards, next_obs, done, len(rewards)

    def reset(self):
        self.pending.clear()


class ReplayBuffer:
    """Ring buffer of n-step transitions; oldest entries are evicted first."""

    def __init__(self, capacity: int, obs_dim: int, n_step: int, gamma: float):
        self.capacity = int(capacity)
        self.n_step = n_step
        self.gamma = gamma
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.step_rewards = np.zeros((capacity, n_step), dtype=np.float64)
        self.returns = np.zeros(capacity, dtype=np.float64)
        self.discounts = np.zeros(capacity, dtype=np.float64)  # gamma**steps, 0 at terminal
        self.dones = np.zeros(capacity, dtype=bool)
        self.insert_ids = np.full(capacity, -1, dtype=np.int64)
        self.next_idx = 0
        self.size = 0
        self.added = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action, rewards, next_obs, done, steps=None) -> int:
        rewards = np.asarray(rewards, dtype=float)
        steps = rewards.size if steps is None else steps
        i = self.next_idx
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.step_rewards[i] = 0.0
        self.step_rewards[i, : rewards.size] = rewards
        self.returns[i] = float(np.dot(self.gamma ** np.arange(rewards.size), rewards))
        self.discounts[i] = 0.0 if done else self.gamma ** steps
        self.dones[i] = done
        self.insert_ids[i] = self.added
        self.added += 1
        self.next_idx = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def sample(self, batch_size: int, rng: np.random.Generator, beta: float = 0.0):
        idx = rng.integers(self.size, size=batch_size)
        return idx, np.ones(batch_size, dtype=np.float32)

    def batch(self, idx):
        return (self.obs[idx], self.actions[idx], self.returns[idx].astype(np.float32),
                self.next_obs[idx], self.discounts[idx].astype(np.float32))

    def update_priorities(self, idx, td_errors) -> None:
        pass


class SumTree:
    """Binary sum tree over ``capacity`` leaves stored in a flat array."""

    def __init__(self, capacity: int):
        size = 1
        while size < capacity:
            size *= 2
        self.leaves = size
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def __getitem__(self, i):
        return self.tree[self.leaves + np.asarray(i)]

    def set(self, i: int, value: float) -> None:
        j = self.leaves + int(i)
        self.tree[j] = value
        j //= 2
        while j >= 1:
            self.tree[j] = self.tree[2 * j] + self.tree[2 * j + 1]
            j //= 2

    def find(self, mass: float) -> int:
        """Leftmost leaf whose prefix sum exceeds ``mass``."""
        j = 1
        while j < self.leaves:
            left = self.tree[2 * j]
            if mass < left:
                j = 2 * j
            else:
                mass -= left
                j = 2 * j + 1
        return j - self.leaves


class PrioritizedReplayBuffer(ReplayBuffer):
    """Proportional prioritization: ``P(i) ~ p_i ** alpha`` with importance weights.

    New transitions get the largest priority seen so far. Priorities are
    updated to ``|td| + eta`` after each learning step.
    """

    def __init__(self, capacity: int, obs_dim: int, n_step: int, gamma: float,
                 alpha: float = 0.6, eta: float = 1e-3):
        super().__init__(capacity, obs_dim, n_step, gamma)
        self.alpha = alpha
        self.eta = eta
        self.tree = SumTree(capacity)
        self.max_priority = 1.0

    def add(self, *args, priority: float | None = None, **kwargs) -> int:
        i = super().add(*args, **kwargs)
        p = self.max_priority if priority is None else float(priority)
        if p <= 0:
            raise ValueError("priorities must be positive")
        self.tree.set(i, p ** self.alpha)
        return i

    def priorities(self) -> np.ndarray:
        return self.tree[np.arange(self.size)] ** (1.0 / self.alpha)

    def sample(self, batch_size: int, rng: np.random.Generator, beta: float = 0.4):
        total = self.tree.total
        bounds = np.linspace(0.0, total, batch_size + 1)
        masses = rng.uniform(bounds[:-1], bounds[1:])
        idx = np.array([min(self.tree.find(m), self.size - 1) for m in masses])
        probs = self.tree[idx] / total
        weights = (self.size * probs) ** (-beta)
        return idx, (weights / weights.max()).astype(np.float32)

    def update_priorities(self, idx, td_errors) -> None:
        for i, td in zip(np.asarray(idx), np.abs(np.asarray(td_errors, dtype=float))):
            p = td + self.eta
            self.max_priority = max(self.max_priority, p)
            self.tree.set(int(i), p ** self.alpha)
