"""Behaviour-policy values learned two ways: directly from data (V_d) and
through a learned model (V_m).

Tabular value functions are plain float arrays of shape (S,).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approximator import Adam, Layout, ValuePair, backward_batch, forward_batch, soft_update
from .dataset import OfflineDataset
from .errors import ConvergenceError, DivergenceError, InvalidInputError
from .mdp import TabularPolicy, policy_matrices


def _check_gamma(gamma):
    if not 0.0 <= gamma < 1.0:
        raise InvalidInputError(f"gamma must lie in [0, 1), got {gamma}")


def empirical_bellman(dataset: OfflineDataset, v, gamma: float) -> np.ndarray:
    """Average of r + gamma v(s') over the transitions leaving each state;
    0 for states with no transitions."""
    _check_gamma(gamma)
    if not dataset.space.discrete:
        raise InvalidInputError("empirical_bellman needs a discrete dataset")
    S = dataset.space.state_size
    v = np.asarray(v, dtype=float)
    if v.shape != (S,):
        raise InvalidInputError(f"value vector must have shape {(S,)}")
    counts = np.bincount(dataset.s, minlength=S)
    sums = np.bincount(dataset.s, weights=dataset.r + gamma * v[dataset.s_next], minlength=S)
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


def solve_vd(dataset: OfflineDataset, gamma: float, tol: float = 1e-10, max_iter: int = 100_000,
             v0=None) -> np.ndarray:
    """Fixed point of the empirical Bellman operator by iteration."""
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    S = dataset.space.state_size
    v = np.zeros(S) if v0 is None else np.array(v0, dtype=float)
    residual = np.inf
    for _ in range(max_iter):
        tv = empirical_bellman(dataset, v, gamma)
        residual = float(np.max(np.abs(tv - v))) if S else 0.0
        if residual <= tol:
            return v
        v = tv
    raise ConvergenceError(f"solve_vd hit max_iter={max_iter}", residual)


def model_bellman(model, policy: TabularPolicy, v, gamma: float) -> np.ndarray:
    """Bellman operator of a tabular model: E_{a~mu, s'~P_theta}[r_theta + gamma v(s')]."""
    q = model.reward_table + gamma * model.probs @ np.asarray(v, dtype=float)
    return np.einsum("sa,sa->s", policy.probs, q)


def solve_vm_tabular(model, policy: TabularPolicy, gamma: float) -> np.ndarray:
    """Exact fixed point of the model Bellman operator via
    (I - gamma P_theta^mu) V = r_theta^mu."""
    _check_gamma(gamma)
    if policy.probs.shape != model.reward_table.shape:
        raise InvalidInputError("policy and model sizes differ")
    P_mu, r_mu = policy_matrices(model.probs, model.reward_table, policy.probs)
    v = np.linalg.solve(np.eye(model.n_states) - gamma * P_mu, r_mu)
    if not np.all(np.isfinite(v)):
        raise RuntimeError("model value solve produced non-finite values")
    return v


# --- function approximation ---------------------------------------------------


def state_features(states, space) -> np.ndarray:
    """Value-network inputs: one-hot rows for discrete states, raw vectors otherwise."""
    if space.discrete:
        return np.eye(space.state_size)[np.asarray(states, dtype=int)]
    return np.asarray(states, dtype=float).reshape(-1, space.state_size)


def value_layout(space, hidden=(64, 64)) -> Layout:
    n_in = space.state_size
    return Layout.mlp(n_in, 1, hidden)


def evaluate_value(params, states, space) -> np.ndarray:
    """Network values at `states`, shape (B,)."""
    return forward_batch(params.values, params.layout, state_features(states, space))[:, 0]


@dataclass
class FitResult:
    pair: ValuePair
    final_loss: float
    curve: list  # rows of (step, loss, residual)
    optimizer: Adam | None = None


def _regression_step(pair: ValuePair, opt: Adam, X: np.ndarray, y: np.ndarray):
    params = pair.primary
    out, cache = forward_batch(params.values, params.layout, X, cache=True)
    err = y - out[:, 0]
    loss = float(np.mean(err ** 2))
    if not np.isfinite(loss):
        raise DivergenceError("value regression loss became non-finite")
    upstream = (-2.0 * err / len(y))[:, None]
    grad = backward_batch(params.values, params.layout, cache, upstream)
    new = params.replace(opt.step(params.values, grad))
    return soft_update(pair.with_primary(new)), loss


def fit_vd_msbe(dataset: OfflineDataset, pair: ValuePair, config, rng: np.random.Generator,
                n_steps: int | None = None, optimizer: Adam | None = None) -> FitResult:
    """Minimise E_D[(r + gamma Vbar_d(s') - V_d(s))^2] with a soft target update
    after every step. Steps default to config.vd_steps."""
    if len(dataset) == 0:
        raise InvalidInputError("dataset must be nonempty")
    steps = config.vd_steps if n_steps is None else n_steps
    opt = optimizer or Adam(pair.primary.layout.n_params, config.value_lr)
    space, gamma = dataset.space, config.gamma
    curve, loss = [], 0.0
    for step in range(steps):
        batch = dataset.sample(min(config.batch_size, len(dataset)), rng)
        v_next = evaluate_value(pair.target, batch.s_next, space)
        y = batch.r + gamma * (1.0 - batch.done) * v_next
        pair, loss = _regression_step(pair, opt, state_features(batch.s, space), y)
        curve.append((step, loss, float(np.sqrt(loss))))
    return FitResult(pair, loss, curve, opt)


def fit_vm(dataset: OfflineDataset, model, pair: ValuePair, config, rng: np.random.Generator,
           n_steps: int | None = None, member: int | None = None,
           optimizer: Adam | None = None) -> FitResult:
    """Minimise E_{(s,a)~D, (r,s')~P_theta}[(r + gamma Vbar_m(s') - V_m(s))^2].

    States and actions come from the dataset; rewards and next states are drawn
    fresh from the model (from `member` for an ensemble) at every step.
    Steps default to config.vm_inner_steps.
    """
    if len(dataset) == 0:
        raise InvalidInputError("dataset must be nonempty")
    steps = config.vm_inner_steps if n_steps is None else n_steps
    opt = optimizer or Adam(pair.primary.layout.n_params, config.value_lr)
    space, gamma = dataset.space, config.gamma
    curve, loss = [], 0.0
    for step in range(steps):
        batch = dataset.sample(min(config.batch_size, len(dataset)), rng)
        if member is None:
            r, s_next = model.sample(batch.s, batch.a, rng)
        else:
            r, s_next = model.sample_member(member, batch.s, batch.a, rng)
        y = r + gamma * evaluate_value(pair.target, s_next, space)
        pair, loss = _regression_step(pair, opt, state_features(batch.s, space), y)
        curve.append((step, loss, float(np.sqrt(loss))))
    return FitResult(pair, loss, curve, opt)
