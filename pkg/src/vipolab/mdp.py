"""Tabular MDPs, policies and exact evaluation.

Everything learned elsewhere in the package is judged against the objects
defined here. Arrays are made read-only on construction, so instances can be
shared freely.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

PROB_ATOL = 1e-12


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP (S, A, r, rho0, P, gamma).

    transition has shape (S, A, S), reward (S, A), rho0 (S,).
    r_max defaults to max |reward| (or 1.0 for an all-zero reward).
    """

    transition: np.ndarray
    reward: np.ndarray
    rho0: np.ndarray
    gamma: float
    r_max: float | None = None

    def __post_init__(self):
        P = _frozen(self.transition)
        R = _frozen(self.reward)
        rho0 = _frozen(self.rho0)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise InvalidInputError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if R.shape != (S, A):
            raise InvalidInputError(f"reward must have shape {(S, A)}, got {R.shape}")
        if rho0.shape != (S,):
            raise InvalidInputError(f"rho0 must have shape {(S,)}, got {rho0.shape}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > PROB_ATOL):
            raise InvalidInputError("every transition row must be a probability vector")
        if np.any(rho0 < 0) or abs(rho0.sum() - 1.0) > PROB_ATOL:
            raise InvalidInputError("rho0 must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidInputError(f"gamma must lie in [0, 1), got {self.gamma}")
        r_max = self.r_max
        if r_max is None:
            r_max = float(np.max(np.abs(R))) if R.size and np.any(R) else 1.0
        if r_max <= 0 or np.any(np.abs(R) > r_max + 1e-12):
            raise InvalidInputError("rewards must satisfy |r| <= r_max with r_max > 0")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "rho0", rho0)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(r_max))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def permuted(self, perm) -> "TabularMdp":
        """Relabel states so that new state i is old state perm[i]."""
        perm = np.asarray(perm)
        P = self.transition[perm][:, :, perm]
        return TabularMdp(P, self.reward[perm], self.rho0[perm], self.gamma, self.r_max)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "rho0": self.rho0.tolist(),
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        required = {"n_states", "n_actions", "transition", "reward", "rho0", "gamma"}
        missing = required - set(doc)
        if missing:
            raise InvalidInputError(f"MDP document missing keys: {sorted(missing)}")
        mdp = cls(doc["transition"], doc["reward"], doc["rho0"], doc["gamma"], doc.get("r_max"))
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise InvalidInputError("declared n_states/n_actions disagree with array shapes")
        return mdp

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TabularPolicy:
    """Stochastic policy as a (S, A) table of action probabilities."""

    probs: np.ndarray = field()

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise InvalidInputError(f"policy table must be 2-D, got shape {probs.shape}")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > PROB_ATOL):
            raise InvalidInputError("every policy row must be a probability vector")
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    def mix(self, other: "TabularPolicy", weight: float) -> "TabularPolicy":
        """weight * self + (1 - weight) * other."""
        return TabularPolicy(weight * self.probs + (1.0 - weight) * other.probs)

    def act(self, states, rng: np.random.Generator) -> np.ndarray:
        states = np.asarray(states, dtype=int)
        cdf = np.cumsum(self.probs[states], axis=-1)
        u = rng.random(states.shape + (1,))
        return np.minimum((cdf < u).sum(axis=-1), self.n_actions - 1)

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularPolicy":
        return cls(doc["probs"])


def _check_pair(mdp: TabularMdp, policy: TabularPolicy):
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidInputError(
            f"policy shape {policy.probs.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}"
        )


def policy_matrices(transition, reward, probs):
    """Policy-averaged kernel P^mu (S, S) and reward r^mu (S,)."""
    P_mu = np.einsum("sa,sat->st", probs, transition)
    r_mu = np.einsum("sa,sa->s", probs, reward)
    return P_mu, r_mu


def apply_bellman(mdp: TabularMdp, policy: TabularPolicy, v) -> np.ndarray:
    """One application of T^mu: E_{a~mu, s'~P}[r(s,a) + gamma v(s')]."""
    _check_pair(mdp, policy)
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,):
        raise InvalidInputError(f"value vector must have shape {(mdp.n_states,)}, got {v.shape}")
    q = mdp.reward + mdp.gamma * mdp.transition @ v
    return np.einsum("sa,sa->s", policy.probs, q)


def solve_value_linear(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """Direct solve of (I - gamma P^mu) V = r^mu."""
    _check_pair(mdp, policy)
    P_mu, r_mu = policy_matrices(mdp.transition, mdp.reward, policy.probs)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_mu, r_mu)


def exact_value(mdp: TabularMdp, policy: TabularPolicy, tol: float = 1e-10,
                v0=None, max_iter: int = 1_000_000) -> np.ndarray:
    """Iterate T^mu until the sup-norm Bellman residual is at most tol."""
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    _check_pair(mdp, policy)
    P_mu, r_mu = policy_matrices(mdp.transition, mdp.reward, policy.probs)
    v = np.zeros(mdp.n_states) if v0 is None else np.array(v0, dtype=float)
    for _ in range(max_iter):
        tv = r_mu + mdp.gamma * P_mu @ v
        if np.max(np.abs(tv - v)) <= tol:
            return v
        v = tv
    raise RuntimeError("policy evaluation did not converge")  # unreachable for gamma < 1


def policy_return(mdp: TabularMdp, policy: TabularPolicy) -> float:
    """J(pi) = <rho0, V^pi>."""
    return float(mdp.rho0 @ solve_value_linear(mdp, policy))


def greedy_value_iteration(transition, reward, gamma: float, tol: float = 1e-10,
                           max_iter: int = 1_000_000):
    """Optimal values by value iteration on (transition, reward).

    Returns (V, Q, greedy actions). Stops when the sup residual is <= tol.
    """
    S = transition.shape[0]
    v = np.zeros(S)
    for _ in range(max_iter):
        q = reward + gamma * transition @ v
        v_new = q.max(axis=1)
        done = np.max(np.abs(v_new - v)) <= tol
        v = v_new
        if done:
            break
    q = reward + gamma * transition @ v
    return v, q, np.argmax(q, axis=1)


def optimal_policy(mdp: TabularMdp, tol: float = 1e-10) -> TabularPolicy:
    _, _, actions = greedy_value_iteration(mdp.transition, mdp.reward, mdp.gamma, tol)
    return TabularPolicy.deterministic(actions, mdp.n_actions)


# --- environments ---------------------------------------------------------


def chain_mdp(n_states: int = 6, slip: float = 0.1, gamma: float = 0.9,
              left_reward: float = 0.2, right_reward: float = 1.0,
              uniform_start: bool = True) -> TabularMdp:
    """Two-action chain. Action 0 moves left, 1 moves right; with prob `slip`
    the move goes the other way. Reward depends on the current state: a small
    payoff at the left end and a large one at the right end."""
    S, A = n_states, 2
    P = np.zeros((S, A, S))
    for s in range(S):
        left, right = max(s - 1, 0), min(s + 1, S - 1)
        P[s, 0, left] += 1.0 - slip
        P[s, 0, right] += slip
        P[s, 1, right] += 1.0 - slip
        P[s, 1, left] += slip
    R = np.zeros((S, A))
    R[0, :] = left_reward
    R[S - 1, :] = right_reward
    rho0 = np.full(S, 1.0 / S) if uniform_start else np.eye(S)[0]
    return TabularMdp(P, R, rho0, gamma)


GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right


def gridworld(size: int = 5, slip: float = 0.1, gamma: float = 0.9,
              goal_reward: float = 1.0, cliff_reward: float = -1.0) -> TabularMdp:
    """size x size grid with a cliff along the bottom row.

    The agent starts at the bottom-left corner; the goal is the bottom-right
    corner. Any action taken at the goal pays goal_reward and resets to the
    start; the same holds for cliff cells with cliff_reward. A move succeeds
    with probability 1 - slip, otherwise a uniformly random move is made.
    """
    S, A = size * size, 4
    start = (size - 1) * size
    goal = size * size - 1
    cliff = [(size - 1) * size + c for c in range(1, size - 1)]

    def step(s, move):
        r, c = divmod(s, size)
        dr, dc = GRID_MOVES[move]
        r2, c2 = min(max(r + dr, 0), size - 1), min(max(c + dc, 0), size - 1)
        return r2 * size + c2

    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            if s == goal or s in cliff:
                P[s, a, start] = 1.0
                R[s, a] = goal_reward if s == goal else cliff_reward
                continue
            P[s, a, step(s, a)] += 1.0 - slip
            for m in range(A):
                P[s, a, step(s, m)] += slip / A
    return TabularMdp(P, R, np.eye(S)[start], gamma)


def grid_coordinates(size: int = 5) -> np.ndarray:
    """(row, col) embedding of gridworld states."""
    return np.array([divmod(s, size) for s in range(size * size)], dtype=float)


def random_mdp(n_states: int, n_actions: int, gamma: float = 0.9, seed: int = 0,
               concentration: float = 1.0) -> TabularMdp:
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    rho0 = rng.dirichlet(np.ones(n_states))
    # renormalise in float64 so the 1e-12 row-sum invariant holds exactly
    P /= P.sum(axis=2, keepdims=True)
    rho0 /= rho0.sum()
    return TabularMdp(P, R, rho0, gamma, r_max=1.0)


def random_policy(n_states: int, n_actions: int, seed: int = 0, floor: float = 0.0) -> TabularPolicy:
    """Dirichlet policy, optionally mixed with the uniform policy by `floor`."""
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(n_actions), size=n_states)
    probs = (1.0 - floor) * probs + floor / n_actions
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


ENVIRONMENTS = {"chain": chain_mdp, "gridworld": gridworld}
