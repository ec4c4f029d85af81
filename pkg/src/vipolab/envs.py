"""Small continuous environments with known dynamics, used as ground truth
for continuous-model experiments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import OfflineDataset, SpaceSpec


@dataclass(frozen=True)
class LinearRegulator:
    """1-D regulator: s' = clip(s + a + noise), r = -(s^2 + action_cost * a^2).

    Actions are clipped to [-action_scale, action_scale]; start states are
    uniform on [-start_range, start_range].
    """

    noise: float = 0.05
    action_cost: float = 0.1
    action_scale: float = 1.0
    state_bound: float = 3.0
    start_range: float = 1.5
    gamma: float = 0.9

    state_dim = 1
    action_dim = 1

    @property
    def space(self) -> SpaceSpec:
        return SpaceSpec.box(1, 1)

    def reset(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.start_range, self.start_range, size=(n, 1))

    def reward(self, s, a) -> np.ndarray:
        a = np.clip(a, -self.action_scale, self.action_scale)
        return -(s[:, 0] ** 2 + self.action_cost * a[:, 0] ** 2)

    def step(self, s, a, rng: np.random.Generator):
        a = np.clip(a, -self.action_scale, self.action_scale)
        r = self.reward(s, a)
        s_next = np.clip(s + a + self.noise * rng.standard_normal(s.shape), -self.state_bound,
                         self.state_bound)
        return r, s_next


def noisy_linear_policy(gain: float, noise: float, scale: float = 1.0):
    """a = clip(-gain * s + noise * eps); the behaviour family for regulator data."""
    def act(states, rng, deterministic=False):
        states = np.asarray(states, dtype=float).reshape(-1, 1)
        a = -gain * states
        if not deterministic:
            a = a + noise * rng.standard_normal(a.shape)
        return np.clip(a, -scale, scale)
    return act


def collect_continuous(env, policy, n_episodes: int, horizon: int, seed: int) -> OfflineDataset:
    """Roll `policy(states, rng)` in `env`; episode-major order, done always False."""
    rng = np.random.default_rng(seed)
    if n_episodes == 0:
        return OfflineDataset.empty(env.space)
    s = env.reset(n_episodes, rng)
    cols = {k: [] for k in ("s", "a", "r", "s_next")}
    for _ in range(horizon):
        a = np.asarray(policy(s, rng), dtype=float).reshape(n_episodes, env.action_dim)
        r, s_next = env.step(s, a, rng)
        for key, val in zip(("s", "a", "r", "s_next"), (s, a, r, s_next)):
            cols[key].append(val)
        s = s_next
    stack = {k: np.stack(v, axis=1) for k, v in cols.items()}
    n = n_episodes * horizon
    return OfflineDataset(stack["s"].reshape(n, -1), stack["a"].reshape(n, -1), stack["r"].reshape(n),
                          stack["s_next"].reshape(n, -1), np.zeros(n, dtype=bool), env.space)


def evaluate_return(env, policy, n_episodes: int = 200, horizon: int = 50, seed: int = 0,
                    deterministic: bool = True) -> float:
    """Monte-Carlo discounted return from env.reset; a fixed seed gives common
    random numbers across policies."""
    rng = np.random.default_rng(seed)
    s = env.reset(n_episodes, rng)
    total = np.zeros(n_episodes)
    for t in range(horizon):
        a = np.asarray(policy(s, rng, deterministic=deterministic), dtype=float).reshape(n_episodes, -1)
        r, s = env.step(s, a, rng)
        total += env.gamma ** t * r
    return float(total.mean())
