"""Policy extraction from a learned model.

Continuous tasks use a penalised soft actor-critic trained on a mix of real
transitions and short model rollouts; synthetic transitions have their
targets lowered by beta times an uncertainty estimate. Tabular tasks use
value iteration on the model with the same penalty subtracted from the
reward.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .approximator import (Adam, Layout, ParamVector, ValuePair, backward_batch, forward_batch, init_params,
                          soft_update)
from .dataset import OfflineDataset, Transition, round_half_up, visit_counts
from .dynamics import max_aleatoric_uncertainty, sample as model_sample
from .errors import ConfigError, DivergenceError, InvalidInputError
from .mdp import TabularPolicy, greedy_value_iteration
from .vipo import _strict_config

CURVE_COLUMNS = ("step", "critic_loss", "actor_loss", "eval_return")
UNCERTAINTY_KINDS = ("bellman_inconsistency", "max_aleatoric")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PlannerConfig:
    h: int = 5
    real_ratio: float = 0.05
    beta: float = 1.0
    alpha: float = 0.2
    k_critics: int = 2
    gamma: float = 0.99
    tau: float = 5e-3
    batch_size: int = 256
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    n_steps: int = 5000
    seed: int = 0
    hidden: tuple = (64, 64)
    rollout_every: int = 250
    n_rollout_starts: int = 256
    buffer_factor: int = 10
    uncertainty: str = "bellman_inconsistency"
    n_uncertainty_samples: int = 4
    action_scale: float = 1.0
    log_std_bounds: tuple = (-5.0, 1.0)
    log_every: int = 250

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.log_std_bounds = tuple(float(b) for b in self.log_std_bounds)
        if self.h < 1:
            raise ConfigError("h must be >= 1")
        if not 0.0 <= self.real_ratio <= 1.0:
            raise ConfigError("real_ratio must lie in [0, 1]")
        if self.k_critics < 2:
            raise ConfigError("k_critics must be >= 2")
        if self.beta < 0 or self.alpha < 0:
            raise ConfigError("beta and alpha must be >= 0")
        if not 0.0 <= self.gamma < 1.0 or not 0.0 <= self.tau <= 1.0:
            raise ConfigError("need 0 <= gamma < 1 and 0 <= tau <= 1")
        if min(self.batch_size, self.rollout_every, self.n_rollout_starts, self.buffer_factor,
               self.n_uncertainty_samples, self.log_every) < 1:
            raise ConfigError("batch_size, rollout_every, n_rollout_starts, buffer_factor, "
                              "n_uncertainty_samples and log_every must be >= 1")
        if self.n_steps < 0:
            raise ConfigError("n_steps must be >= 0")
        if self.uncertainty not in UNCERTAINTY_KINDS:
            raise ConfigError(f"uncertainty must be one of {UNCERTAINTY_KINDS}")
        if self.action_scale <= 0 or not self.log_std_bounds[0] < self.log_std_bounds[1]:
            raise ConfigError("action_scale must be positive and log_std_bounds increasing")

    @property
    def buffer_capacity(self) -> int:
        return self.buffer_factor * self.n_rollout_starts * self.h

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        doc["log_std_bounds"] = list(self.log_std_bounds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PlannerConfig":
        return _strict_config(cls, doc)


# --- synthetic replay ---------------------------------------------------------


class SyntheticBuffer:
    """FIFO store of model-generated transitions; the oldest rows are evicted first."""

    synthetic = True

    def __init__(self, capacity: int, space):
        if capacity < 1:
            raise InvalidInputError("capacity must be >= 1")
        self.capacity = capacity
        self.space = space
        self._data = OfflineDataset.empty(space)

    def __len__(self) -> int:
        return len(self._data)

    def extend(self, transitions: OfflineDataset) -> None:
        data = self._data.concat(transitions)
        if len(data) > self.capacity:
            data = data.subset(np.arange(len(data) - self.capacity, len(data)))
        self._data = data

    def sample(self, n: int, rng: np.random.Generator) -> OfflineDataset:
        if not len(self._data):
            raise InvalidInputError("buffer is empty")
        return self._data.sample(n, rng)

    def as_dataset(self) -> OfflineDataset:
        return self._data


def rollout(model, dataset: OfflineDataset, policy, h: int, n_starts: int,
            rng: np.random.Generator) -> OfflineDataset:
    """h-step model rollouts of `policy` from start states drawn out of `dataset`.

    Rows are trajectory-major: all h steps of start 0, then start 1, and so on.
    """
    if h < 1:
        raise InvalidInputError("h must be >= 1")
    if len(dataset) == 0:
        raise InvalidInputError("dataset must be nonempty")
    s = dataset.s[rng.integers(0, len(dataset), size=n_starts)]
    steps = []
    for _ in range(h):
        a = policy.act(s, rng)
        r, s_next = model_sample(model, s, a, rng)
        steps.append((s, a, r, s_next))
        s = s_next
    cols = [np.stack(c, axis=1) for c in zip(*steps)]
    n = n_starts * h
    tail = () if dataset.space.discrete else (-1,)
    s, a, r, s_next = (c.reshape((n,) + (tail if c.ndim > 2 else ())) for c in cols)
    return OfflineDataset(s, a, r, s_next, np.zeros(n, dtype=bool), dataset.space)


# --- actor -------------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class GaussianActor:
    """Diagonal Gaussian squashed by action_scale * tanh.

    The network outputs means then raw log-stds; log-stds are mapped smoothly
    into log_std_bounds.
    """

    params: ParamVector
    action_dim: int
    action_scale: float = 1.0
    log_std_bounds: tuple = (-5.0, 1.0)

    @classmethod
    def create(cls, state_dim: int, action_dim: int, rng: np.random.Generator, hidden=(64, 64),
               action_scale: float = 1.0, log_std_bounds=(-5.0, 1.0)) -> "GaussianActor":
        layout = Layout.mlp(state_dim, 2 * action_dim, hidden)
        return cls(init_params(layout, rng), action_dim, action_scale, tuple(log_std_bounds))

    def with_params(self, values) -> "GaussianActor":
        return GaussianActor(self.params.replace(values), self.action_dim, self.action_scale,
                             self.log_std_bounds)

    def _heads(self, states):
        X = np.asarray(states, dtype=float).reshape(-1, self.params.layout.n_in)
        out, cache = forward_batch(self.params.values, self.params.layout, X, cache=True)
        d = self.action_dim
        lo, hi = self.log_std_bounds
        t = np.tanh(out[:, d:])
        log_std = lo + 0.5 * (hi - lo) * (t + 1.0)
        return out[:, :d], log_std, t, cache

    def sample(self, states, rng: np.random.Generator, internals: bool = False):
        """Reparameterised draw; returns (actions, log_probs[, internals])."""
        mean, log_std, t, cache = self._heads(states)
        eps = rng.standard_normal(mean.shape)
        std = np.exp(log_std)
        u = mean + std * eps
        a = self.action_scale * np.tanh(u)
        log_prob = (np.sum(-0.5 * eps ** 2 - log_std - 0.5 * LOG_2PI, axis=1)
                    - np.sum(2.0 * (math.log(2.0) - u - _softplus(-2.0 * u)), axis=1)
                    - self.action_dim * math.log(self.action_scale))
        if internals:
            return a, log_prob, (cache, t, std, eps, u)
        return a, log_prob

    def act(self, states, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
        if deterministic:
            mean, _, _, _ = self._heads(states)
            return self.action_scale * np.tanh(mean)
        return self.sample(states, rng)[0]

    __call__ = act

    def backward(self, internals, g_u, g_log_std) -> np.ndarray:
        """Parameter gradient given upstream gradients on u (through the mean)
        and on the log-std heads."""
        cache, t, _, _, _ = internals
        lo, hi = self.log_std_bounds
        g_raw = g_log_std * 0.5 * (hi - lo) * (1.0 - t ** 2)
        return backward_batch(self.params.values, self.params.layout, cache, np.hstack([g_u, g_raw]))

    def to_dict(self) -> dict:
        return {"kind": "gaussian_actor", "action_dim": self.action_dim, "action_scale": self.action_scale,
                "log_std_bounds": list(self.log_std_bounds), "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianActor":
        return cls(ParamVector.from_dict(doc["params"]), doc["action_dim"], doc["action_scale"],
                   tuple(doc["log_std_bounds"]))


# --- critics -----------------------------------------------------------------


@dataclass(frozen=True)
class Critics:
    """K Q-networks over [s, a], each with a soft-updated target copy."""

    pairs: tuple

    @classmethod
    def create(cls, state_dim: int, action_dim: int, k: int, rng: np.random.Generator, hidden=(64, 64),
               tau: float = 5e-3) -> "Critics":
        layout = Layout.mlp(state_dim + action_dim, 1, hidden)
        return cls(tuple(ValuePair.create(layout, rng, tau) for _ in range(k)))

    @staticmethod
    def _inputs(s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return np.hstack([s.reshape(len(s), -1), a.reshape(len(a), -1)])

    def values(self, s, a, target: bool = False) -> np.ndarray:
        """(K, B) Q-values from the primary or target networks."""
        X = self._inputs(s, a)
        nets = [p.target if target else p.primary for p in self.pairs]
        return np.stack([forward_batch(n.values, n.layout, X)[:, 0] for n in nets])

    def target_min(self, s, a) -> np.ndarray:
        return self.values(s, a, target=True).min(axis=0)

    def min_with_action_grad(self, s, a):
        """Primary min_k Q and its gradient with respect to the action."""
        X = self._inputs(s, a)
        qs, grads = [], []
        ones = np.ones((len(X), 1))
        for p in self.pairs:
            out, cache = forward_batch(p.primary.values, p.primary.layout, X, cache=True)
            _, gx = backward_batch(p.primary.values, p.primary.layout, cache, ones, need_input=True)
            qs.append(out[:, 0])
            grads.append(gx)
        qs = np.stack(qs)
        pick = qs.argmin(axis=0)
        rows = np.arange(len(X))
        da = np.asarray(a).reshape(len(X), -1).shape[1]
        return qs[pick, rows], np.stack(grads)[pick, rows][:, -da:]


# --- uncertainty and targets ------------------------------------------------------


def bellman_inconsistency(ensemble, critics_target, policy, s, a, rng: np.random.Generator,
                          gamma: float = 0.99, n_samples: int = 1) -> np.ndarray:
    """Per row: population std over members i of
    gamma * E_{s' ~ member i, a' ~ policy}[critics_target(s', a')].

    `critics_target(s, a)` returns the min over target critics; the inner
    expectation is a mean over n_samples draws.
    """
    if ensemble.n_members < 2:
        raise InvalidInputError("bellman inconsistency needs at least two ensemble members")
    s = np.asarray(s)
    a = np.asarray(a)
    B = len(s)
    s_rep = np.repeat(s, n_samples, axis=0)
    a_rep = np.repeat(a, n_samples, axis=0)
    per_member = np.empty((ensemble.n_members, B))
    for i in range(ensemble.n_members):
        _, s_next = ensemble.sample_member(i, s_rep, a_rep, rng)
        a_next = policy.act(s_next, rng)
        per_member[i] = gamma * np.asarray(critics_target(s_next, a_next)).reshape(B, n_samples).mean(axis=1)
    return per_member.std(axis=0)


def penalized_targets(r, s_next, done, synthetic, uncertainty, critics_target, policy, gamma: float,
                      alpha: float, beta: float, rng: np.random.Generator) -> np.ndarray:
    """r + gamma (1 - done) [min_k Qbar(s', a') - alpha log pi(a'|s')], minus
    beta * uncertainty on synthetic rows."""
    uncertainty = np.asarray(uncertainty, dtype=float)
    if np.any(uncertainty < 0):
        raise InvalidInputError("uncertainty must be >= 0")
    a_next, log_prob = policy.sample(s_next, rng)
    soft = np.asarray(critics_target(s_next, a_next)) - alpha * log_prob
    y = np.asarray(r, dtype=float) + gamma * (1.0 - np.asarray(done, dtype=float)) * soft
    penalty = np.where(uncertainty > 0, beta * uncertainty, 0.0)
    return y - np.where(np.asarray(synthetic, dtype=bool), penalty, 0.0)


def penalized_target(transition: Transition, critics_target, policy, config: PlannerConfig,
                     uncertainty: float, rng: np.random.Generator, synthetic: bool = True) -> float:
    """Single-transition form of `penalized_targets`."""
    s_next = np.asarray(transition.s_next, dtype=float).reshape(1, -1)
    y = penalized_targets([transition.r], s_next, [transition.done], [synthetic], [uncertainty],
                          critics_target, policy, config.gamma, config.alpha, config.beta, rng)
    return float(y[0])


# --- actor-critic loop ----------------------------------------------------------


@dataclass
class PlannerReport:
    records: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    critics: Critics | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_COLUMNS)
            for rec in self.records:
                writer.writerow([rec["step"]] + [repr(float(rec[c])) for c in CURVE_COLUMNS[1:]])


def actor_objective(actor: GaussianActor, critics: Critics, states, alpha: float,
                    rng: np.random.Generator):
    """Mean of alpha log pi(a|s) - min_k Q(s, a) over reparameterised draws, and
    its gradient with respect to the actor parameters."""
    a, log_prob, internals = actor.sample(states, rng, internals=True)
    q, dq_da = critics.min_with_action_grad(states, a)
    _, t, std, eps, u = internals
    B = len(a)
    tanh_u = np.tanh(u)
    g_u = (alpha * 2.0 * tanh_u - dq_da * actor.action_scale * (1.0 - tanh_u ** 2)) / B
    g_log_std = -alpha / B + g_u * std * eps
    return float(np.mean(alpha * log_prob - q)), actor.backward(internals, g_u, g_log_std)


def _critic_step(critics: Critics, opts, s, a, y):
    X = Critics._inputs(s, a)
    pairs, losses = [], []
    for pair, opt in zip(critics.pairs, opts):
        p = pair.primary
        out, cache = forward_batch(p.values, p.layout, X, cache=True)
        err = out[:, 0] - y
        losses.append(float(np.mean(err ** 2)))
        grad = backward_batch(p.values, p.layout, cache, (2.0 * err / len(y))[:, None])
        pairs.append(pair.with_primary(p.replace(opt.step(p.values, grad))))
    return Critics(tuple(pairs)), float(np.mean(losses))


def synthetic_uncertainty(model, critics: Critics, actor, s, a, config: PlannerConfig,
                          rng: np.random.Generator) -> np.ndarray:
    if config.uncertainty == "max_aleatoric":
        return max_aleatoric_uncertainty(model, s, a)
    return bellman_inconsistency(model, critics.target_min, actor, s, a, rng, config.gamma,
                                 config.n_uncertainty_samples)


def plan_actor_critic(model, dataset: OfflineDataset, config: PlannerConfig, evaluate=None):
    """Penalised actor-critic on real plus synthetic data.

    Every `rollout_every` steps, n_rollout_starts h-step rollouts of the
    current actor are appended to the synthetic buffer. Each batch holds
    round(real_ratio * batch_size) real rows (all rows while the buffer is
    empty). `evaluate(actor)` is called at logging steps when given.
    Returns (actor, PlannerReport).
    """
    if len(dataset) == 0:
        raise InvalidInputError("dataset must be nonempty")
    if dataset.space.discrete:
        raise InvalidInputError("plan_actor_critic needs a continuous dataset; use plan_tabular")
    ds, da = dataset.space.state_size, dataset.space.action_size
    init_rng, roll_rng, batch_rng, target_rng, actor_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(5))
    critics = Critics.create(ds, da, config.k_critics, init_rng, config.hidden, config.tau)
    actor = GaussianActor.create(ds, da, init_rng, config.hidden, config.action_scale, config.log_std_bounds)
    critic_opts = [Adam(p.primary.layout.n_params, config.critic_lr) for p in critics.pairs]
    actor_opt = Adam(actor.params.layout.n_params, config.actor_lr)
    buffer = SyntheticBuffer(config.buffer_capacity, dataset.space)
    report = PlannerReport(notes=[f"rollouts regenerated every {config.rollout_every} gradient steps",
                                  f"synthetic buffer capacity {config.buffer_capacity}"])
    n_real = round_half_up(config.real_ratio * config.batch_size)

    for step in range(config.n_steps):
        if step % config.rollout_every == 0:
            buffer.extend(rollout(model, dataset, actor, config.h, config.n_rollout_starts, roll_rng))
        k_real = n_real if len(buffer) else config.batch_size
        real = dataset.sample(k_real, batch_rng)
        batch = real
        unc = np.zeros(len(real))
        flag = np.zeros(len(real), dtype=bool)
        if k_real < config.batch_size:
            syn = buffer.sample(config.batch_size - k_real, batch_rng)
            syn_unc = synthetic_uncertainty(model, critics, actor, syn.s, syn.a, config, target_rng)
            batch = real.concat(syn)
            unc = np.concatenate([unc, syn_unc])
            flag = np.concatenate([flag, np.ones(len(syn), dtype=bool)])
        y = penalized_targets(batch.r, batch.s_next, batch.done, flag, unc, critics.target_min, actor,
                              config.gamma, config.alpha, config.beta, target_rng)
        critics, critic_loss = _critic_step(critics, critic_opts, batch.s, batch.a, y)
        actor_loss, g = actor_objective(actor, critics, batch.s, config.alpha, actor_rng)
        if not (np.isfinite(critic_loss) and np.isfinite(actor_loss) and np.all(np.isfinite(g))):
            raise DivergenceError(f"non-finite planner loss at step {step}")
        actor = actor.with_params(actor_opt.step(actor.params.values, g))
        critics = Critics(tuple(soft_update(p) for p in critics.pairs))
        if (step + 1) % config.log_every == 0 or step + 1 == config.n_steps:
            ret = float(evaluate(actor)) if evaluate is not None else float("nan")
            report.records.append({"step": step + 1, "critic_loss": critic_loss, "actor_loss": actor_loss,
                                   "eval_return": ret})
    report.critics = critics
    return actor, report


# --- tabular planning ------------------------------------------------------------


def count_uncertainty(dataset: OfflineDataset, kind: str = "indicator") -> np.ndarray:
    """Per-(s, a) uncertainty from visit counts: 1 for unvisited pairs and 0
    otherwise ("indicator"), or 1 / sqrt(n + 1) ("inverse_sqrt")."""
    n = visit_counts(dataset)
    if kind == "indicator":
        return (n == 0).astype(float)
    if kind == "inverse_sqrt":
        return 1.0 / np.sqrt(n + 1.0)
    raise InvalidInputError(f"unknown uncertainty kind {kind!r}")


def plan_tabular(model, uncertainty, beta: float, gamma: float, tol: float = 1e-10) -> TabularPolicy:
    """Greedy deterministic policy of value iteration on reward r - beta * U."""
    U = np.asarray(uncertainty, dtype=float)
    if U.shape != model.reward_table.shape:
        raise InvalidInputError("uncertainty table must have shape (S, A)")
    if np.any(U < 0) or not 0 <= beta < np.inf:
        raise InvalidInputError("uncertainty must be >= 0 and beta finite and >= 0")
    reward = model.reward_table - np.where(U > 0, beta * U, 0.0)
    _, _, actions = greedy_value_iteration(model.probs, reward, gamma, tol)
    return TabularPolicy.deterministic(actions, model.n_actions)


def penalized_q(model, uncertainty, beta: float, gamma: float, tol: float = 1e-10) -> np.ndarray:
    """Optimal Q of the penalised model (finite beta)."""
    reward = model.reward_table - np.where(np.asarray(uncertainty) > 0, beta * np.asarray(uncertainty), 0.0)
    return greedy_value_iteration(model.probs, reward, gamma, tol)[1]
