"""Learned dynamics P_theta(s', r | s, a).

Two model families share one duck-typed surface (nll_loss, nll_grad, sample,
theta/with_theta, backup_gradient):

* `TabularDynamicsModel` - row-softmax transition logits plus a deterministic
  reward table; exactly differentiable, used by every oracle.
* `GaussianEnsemble` - N MLP heads, each predicting a diagonal Gaussian over
  [s'; r] (reward is the last output dimension).

For the tabular model the reward is deterministic, so the score function of
the reward is undefined; gradients of a sampled backup r + gamma V(s') take
the score-function route for the next state and the pathwise route
(d r / d reward_table = 1) for the reward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .approximator import Layout, ParamVector, backward_batch, forward_batch, init_params
from .dataset import OfflineDataset, visit_counts
from .errors import InvalidInputError

MLE_PSEUDO_COUNT = 1e-3
LOGIT_FLOOR = np.log(1e-12)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_discrete(model, batch: OfflineDataset):
    if not batch.space.discrete or batch.space.state_size != model.n_states \
            or batch.space.action_size != model.n_actions:
        raise InvalidInputError(f"batch space {batch.space} does not fit a "
                                f"{model.n_states}x{model.n_actions} tabular model")
    if len(batch) == 0:
        raise InvalidInputError("batch must be nonempty")


@dataclass(frozen=True)
class TabularDynamicsModel:
    logits: np.ndarray
    reward_table: np.ndarray
    probs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        logits = np.array(self.logits, dtype=float)
        reward = np.array(self.reward_table, dtype=float)
        if logits.ndim != 3 or logits.shape[0] != logits.shape[2] or reward.shape != logits.shape[:2]:
            raise InvalidInputError(f"bad tabular model shapes {logits.shape}, {reward.shape}")
        if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(reward))):
            raise InvalidInputError("tabular model parameters must be finite")
        for arr in (logits, reward):
            arr.setflags(write=False)
        probs = softmax(logits)
        probs.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "reward_table", reward)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> "TabularDynamicsModel":
        return cls(np.zeros((n_states, n_actions, n_states)), np.zeros((n_states, n_actions)))

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng: np.random.Generator,
               logit_scale: float = 1.0, reward_scale: float = 1.0) -> "TabularDynamicsModel":
        return cls(logit_scale * rng.standard_normal((n_states, n_actions, n_states)),
                   rng.uniform(-reward_scale, reward_scale, size=(n_states, n_actions)))

    @classmethod
    def from_mdp(cls, mdp) -> "TabularDynamicsModel":
        """Logits log P (floored), so the softmax reproduces the MDP kernel."""
        return cls(np.maximum(np.log(np.maximum(mdp.transition, 1e-300)), LOGIT_FLOOR), mdp.reward)

    @property
    def n_states(self) -> int:
        return self.logits.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logits.shape[1]

    @property
    def n_params(self) -> int:
        return self.logits.size + self.reward_table.size

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.logits.ravel(), self.reward_table.ravel()])

    def with_theta(self, theta) -> "TabularDynamicsModel":
        theta = np.asarray(theta, dtype=float)
        k = self.logits.size
        return TabularDynamicsModel(theta[:k].reshape(self.logits.shape),
                                    theta[k:].reshape(self.reward_table.shape))

    def split_grad(self, g: np.ndarray):
        """View a flat gradient as (logit block, reward block)."""
        k = self.logits.size
        return g[:k].reshape(self.logits.shape), g[k:].reshape(self.reward_table.shape)

    # --- losses -----------------------------------------------------------

    def nll_loss(self, batch: OfflineDataset) -> float:
        """mean[-log softmax(logits)[s, a, s'] + (reward_table[s, a] - r)^2]."""
        _check_discrete(self, batch)
        s, a, sn = batch.s, batch.a, batch.s_next
        z = self.logits[s, a]
        log_norm = np.logaddexp.reduce(z, axis=1)
        ce = log_norm - z[np.arange(len(s)), sn]
        sq = (self.reward_table[s, a] - batch.r) ** 2
        return float(np.mean(ce + sq))

    def nll_grad(self, batch: OfflineDataset) -> np.ndarray:
        """Closed form: (p - e_{s'}) on the logit row, 2(R - r) on the reward entry."""
        _check_discrete(self, batch)
        s, a, sn = batch.s, batch.a, batch.s_next
        n = len(s)
        g_logits = np.zeros_like(self.logits)
        g_reward = np.zeros_like(self.reward_table)
        rows = self.probs[s, a].copy()
        rows[np.arange(n), sn] -= 1.0
        np.add.at(g_logits, (s, a), rows / n)
        np.add.at(g_reward, (s, a), 2.0 * (self.reward_table[s, a] - batch.r) / n)
        return np.concatenate([g_logits.ravel(), g_reward.ravel()])

    # --- sampling and backup gradients -----------------------------------

    def sample(self, s, a, rng: np.random.Generator):
        """Categorical next state from the softmax row; deterministic reward."""
        s = np.asarray(s, dtype=int)
        a = np.asarray(a, dtype=int)
        cdf = np.cumsum(self.probs[s, a], axis=-1)
        u = rng.random(s.shape + (1,))
        s_next = np.minimum((cdf < u).sum(axis=-1), self.n_states - 1)
        return self.reward_table[s, a], s_next

    def backup_gradient(self, s, a, s_next, backup, weights) -> np.ndarray:
        """sum_b w_b * single-sample gradient estimate of Q_theta(s_b, a_b).

        backup_b = r_b + gamma V(s'_b) for a model sample (r_b, s'_b). The logit
        block uses backup_b * (e_{s'_b} - p(.|s_b, a_b)); the reward block uses
        the pathwise derivative 1.
        """
        s, a, s_next = (np.asarray(x, dtype=int) for x in (s, a, s_next))
        backup = np.asarray(backup, dtype=float)
        weights = np.asarray(weights, dtype=float)
        n = len(s)
        rows = -self.probs[s, a]
        rows[np.arange(n), s_next] += 1.0
        g_logits = np.zeros_like(self.logits)
        g_reward = np.zeros_like(self.reward_table)
        np.add.at(g_logits, (s, a), (weights * backup)[:, None] * rows)
        np.add.at(g_reward, (s, a), weights)
        return np.concatenate([g_logits.ravel(), g_reward.ravel()])

    def expected_backup_gradient(self, s, a, next_values, gamma: float, weights) -> np.ndarray:
        """Exact counterpart of `backup_gradient`: sum_b w_b grad_theta Q_theta(s_b, a_b)
        with Q_theta(s, a) = R[s, a] + gamma sum_j p(j | s, a) V(j), V frozen."""
        s, a = np.asarray(s, dtype=int), np.asarray(a, dtype=int)
        weights = np.asarray(weights, dtype=float)
        v = np.asarray(next_values, dtype=float)
        p = self.probs[s, a]
        rows = gamma * p * (v[None, :] - (p @ v)[:, None])
        g_logits = np.zeros_like(self.logits)
        g_reward = np.zeros_like(self.reward_table)
        np.add.at(g_logits, (s, a), weights[:, None] * rows)
        np.add.at(g_reward, (s, a), weights)
        return np.concatenate([g_logits.ravel(), g_reward.ravel()])

    def prediction_error(self, batch: OfflineDataset) -> float:
        """Held-out error used for early stopping: the tabular NLL."""
        return self.nll_loss(batch)

    def to_dict(self) -> dict:
        return {"kind": "tabular", "logits": self.logits.tolist(),
                "reward_table": self.reward_table.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularDynamicsModel":
        return cls(doc["logits"], doc["reward_table"])


def fit_mle_tabular(dataset: OfflineDataset) -> TabularDynamicsModel:
    """Maximum-likelihood tabular model.

    Visited (s, a): softmax equals the empirical next-state frequencies
    (unobserved next states get logit log 1e-12) and the reward is the
    empirical mean. Unvisited (s, a): every next state receives the pseudo-count
    1e-3, i.e. a uniform row, and reward 0.
    """
    if not dataset.space.discrete:
        raise InvalidInputError("fit_mle_tabular needs a discrete dataset")
    S, A = dataset.space.state_size, dataset.space.action_size
    counts = np.zeros((S, A, S))
    np.add.at(counts, (dataset.s, dataset.a, dataset.s_next), 1.0)
    n_sa = visit_counts(dataset)
    reward_sum = np.zeros((S, A))
    np.add.at(reward_sum, (dataset.s, dataset.a), dataset.r)
    unseen = n_sa == 0
    counts[unseen] = MLE_PSEUDO_COUNT
    freq = counts / counts.sum(axis=2, keepdims=True)
    logits = np.maximum(np.log(np.maximum(freq, 1e-300)), LOGIT_FLOOR)
    rewards = np.where(unseen, 0.0, reward_sum / np.maximum(n_sa, 1.0))
    return TabularDynamicsModel(logits, rewards)


# --- Gaussian ensemble ------------------------------------------------------


@dataclass
class GaussianEnsemble:
    """Ensemble of diagonal-Gaussian heads over [s'; r].

    Each member network maps normalised [s, a] to 2 * (state_dim + 1) outputs:
    raw means then raw log-variances. With predict_delta the state part of the
    mean is s + raw mean. Log-variances are softly clamped into
    log_var_bounds after every forward pass.
    """

    members: list
    state_dim: int
    action_dim: int
    log_var_bounds: tuple = (-10.0, 0.5)
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None
    predict_delta: bool = True

    def __post_init__(self):
        if len(self.members) < 1:
            raise InvalidInputError("ensemble needs at least one member")
        n_in = self.state_dim + self.action_dim
        for m in self.members:
            if m.layout.n_in != n_in or m.layout.n_out != 2 * self.out_dim:
                raise InvalidInputError("member layout does not match ensemble arity")
        if self.input_mean is None:
            self.input_mean = np.zeros(n_in)
        if self.input_std is None:
            self.input_std = np.ones(n_in)
        self.input_mean = np.asarray(self.input_mean, dtype=float)
        self.input_std = np.asarray(self.input_std, dtype=float)
        lo, hi = self.log_var_bounds
        if not lo < hi:
            raise InvalidInputError("log-variance bounds must satisfy min < max")
        self.log_var_bounds = (float(lo), float(hi))

    @classmethod
    def create(cls, state_dim: int, action_dim: int, n_members: int, rng: np.random.Generator,
               hidden=(64, 64), log_var_bounds=(-10.0, 0.5), data: OfflineDataset | None = None,
               predict_delta: bool = True) -> "GaussianEnsemble":
        layout = Layout.mlp(state_dim + action_dim, 2 * (state_dim + 1), hidden)
        members = [init_params(layout, rng) for _ in range(n_members)]
        mean = std = None
        if data is not None and len(data):
            X = data.state_action_features()
            mean = X.mean(axis=0)
            std = X.std(axis=0)
            std = np.where(std < 1e-6, 1.0, std)
        return cls(members, state_dim, action_dim, tuple(log_var_bounds), mean, std, predict_delta)

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def out_dim(self) -> int:
        return self.state_dim + 1

    @property
    def layout(self) -> Layout:
        return self.members[0].layout

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([m.values for m in self.members])

    def with_theta(self, theta) -> "GaussianEnsemble":
        theta = np.asarray(theta, dtype=float)
        k = self.layout.n_params
        members = [ParamVector(theta[i * k:(i + 1) * k], self.layout) for i in range(self.n_members)]
        return self.with_members(members)

    def with_members(self, members) -> "GaussianEnsemble":
        return GaussianEnsemble(list(members), self.state_dim, self.action_dim, self.log_var_bounds,
                                self.input_mean, self.input_std, self.predict_delta)

    def with_member(self, k: int, params: ParamVector) -> "GaussianEnsemble":
        members = list(self.members)
        members[k] = params
        return self.with_members(members)

    # --- forward ------------------------------------------------------------

    def _inputs(self, s, a):
        s = np.asarray(s, dtype=float).reshape(-1, self.state_dim)
        a = np.asarray(a, dtype=float).reshape(-1, self.action_dim)
        return s, (np.hstack([s, a]) - self.input_mean) / self.input_std

    def _clamp(self, raw):
        lo, hi = self.log_var_bounds
        upper = hi - _softplus(hi - raw)
        lv = lo + _softplus(upper - lo)
        dlv = _sigmoid(hi - raw) * _sigmoid(upper - lo)
        # the soft form overshoots hi by at most log(1 + exp(lo - hi))
        over = lv > hi
        return np.where(over, hi, lv), np.where(over, 0.0, dlv)

    def predict(self, k: int, s, a, cache: bool = False):
        """Member k's mean and clamped log-variance, each (B, state_dim + 1)."""
        s, X = self._inputs(s, a)
        params = self.members[k]
        out, net_cache = forward_batch(params.values, params.layout, X, cache=True)
        d = self.out_dim
        mean = out[:, :d].copy()
        if self.predict_delta:
            mean[:, :self.state_dim] += s
        log_var, dlv = self._clamp(out[:, d:])
        if cache:
            return mean, log_var, (net_cache, dlv)
        return mean, log_var

    def _backward(self, k: int, cache, g_mean, g_log_var):
        net_cache, dlv = cache
        upstream = np.hstack([g_mean, g_log_var * dlv])
        params = self.members[k]
        return backward_batch(params.values, params.layout, net_cache, upstream)

    @staticmethod
    def _targets(batch: OfflineDataset):
        return np.hstack([batch.s_next, batch.r[:, None]])

    def _check_batch(self, batch: OfflineDataset):
        if batch.space.discrete or batch.space.state_size != self.state_dim \
                or batch.space.action_size != self.action_dim:
            raise InvalidInputError(f"batch space {batch.space} does not match ensemble arity "
                                    f"({self.state_dim}, {self.action_dim})")
        if len(batch) == 0:
            raise InvalidInputError("batch must be nonempty")

    # --- losses -------------------------------------------------------------

    def member_nll_loss(self, k: int, batch: OfflineDataset) -> float:
        self._check_batch(batch)
        mean, log_var = self.predict(k, batch.s, batch.a)
        resid = mean - self._targets(batch)
        return float(np.mean(np.sum(resid ** 2 * np.exp(-log_var) + log_var, axis=1)))

    def nll_loss(self, batch: OfflineDataset, member: int | None = None) -> float:
        """Per-sample (mu - x)^T Sigma^-1 (mu - x) + log det Sigma, averaged over
        the batch and (unless `member` is given) over members."""
        if member is not None:
            return self.member_nll_loss(member, batch)
        return float(np.mean([self.member_nll_loss(k, batch) for k in range(self.n_members)]))

    def member_nll_grad(self, k: int, batch: OfflineDataset) -> np.ndarray:
        self._check_batch(batch)
        mean, log_var, cache = self.predict(k, batch.s, batch.a, cache=True)
        resid = mean - self._targets(batch)
        inv_var = np.exp(-log_var)
        n = len(batch)
        g_mean = 2.0 * resid * inv_var / n
        g_lv = (1.0 - resid ** 2 * inv_var) / n
        return self._backward(k, cache, g_mean, g_lv)

    def nll_grad(self, batch: OfflineDataset) -> np.ndarray:
        """Gradient of `nll_loss(batch)` (member-averaged) w.r.t. theta."""
        return np.concatenate([self.member_nll_grad(k, batch) for k in range(self.n_members)]) \
            / self.n_members

    # --- sampling -----------------------------------------------------------

    def sample_member(self, k: int, s, a, rng: np.random.Generator):
        mean, log_var = self.predict(k, s, a)
        x = mean + np.exp(0.5 * log_var) * rng.standard_normal(mean.shape)
        return x[:, -1], x[:, :self.state_dim]

    def sample(self, s, a, rng: np.random.Generator, member: int | None = None):
        """Draw (r, s') from a uniformly chosen member per row, or from `member`."""
        if member is not None:
            return self.sample_member(member, s, a, rng)
        s = np.asarray(s, dtype=float).reshape(-1, self.state_dim)
        a = np.asarray(a, dtype=float).reshape(-1, self.action_dim)
        which = rng.integers(0, self.n_members, size=len(s))
        r = np.empty(len(s))
        s_next = np.empty_like(s)
        for k in np.unique(which):
            rows = which == k
            r[rows], s_next[rows] = self.sample_member(int(k), s[rows], a[rows], rng)
        return r, s_next

    def member_backup_gradient(self, k: int, s, a, s_next, r, backup, weights) -> np.ndarray:
        """sum_b w_b backup_b grad log N([s'_b; r_b]; mu_k, Sigma_k) (score function)."""
        mean, log_var, cache = self.predict(k, s, a, cache=True)
        x = np.hstack([np.asarray(s_next, dtype=float).reshape(-1, self.state_dim),
                       np.asarray(r, dtype=float).reshape(-1, 1)])
        coef = (np.asarray(weights, dtype=float) * np.asarray(backup, dtype=float))[:, None]
        resid = x - mean
        inv_var = np.exp(-log_var)
        g_mean = coef * resid * inv_var
        g_lv = coef * 0.5 * (resid ** 2 * inv_var - 1.0)
        return self._backward(k, cache, g_mean, g_lv)

    def member_prediction_error(self, k: int, batch: OfflineDataset) -> float:
        mean, _ = self.predict(k, batch.s, batch.a)
        return float(np.mean((mean - self._targets(batch)) ** 2))

    def prediction_error(self, batch: OfflineDataset) -> float:
        """MSE of predicted means against [s'; r], averaged over members."""
        self._check_batch(batch)
        return float(np.mean([self.member_prediction_error(k, batch) for k in range(self.n_members)]))

    def variances(self, s, a) -> np.ndarray:
        """(N, B, state_dim + 1) predicted variances."""
        return np.stack([np.exp(self.predict(k, s, a)[1]) for k in range(self.n_members)])

    def to_dict(self) -> dict:
        return {
            "kind": "gaussian_ensemble",
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "log_var_bounds": list(self.log_var_bounds),
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "predict_delta": self.predict_delta,
            "layout": self.layout.to_dict(),
            "members": [m.values.tolist() for m in self.members],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianEnsemble":
        layout = Layout(tuple(doc["layout"]["sizes"]))
        members = [ParamVector(np.asarray(v, dtype=float), layout) for v in doc["members"]]
        return cls(members, doc["state_dim"], doc["action_dim"], tuple(doc["log_var_bounds"]),
                   np.asarray(doc["input_mean"]), np.asarray(doc["input_std"]), doc["predict_delta"])


def model_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind == "tabular":
        return TabularDynamicsModel.from_dict(doc)
    if kind == "gaussian_ensemble":
        return GaussianEnsemble.from_dict(doc)
    raise InvalidInputError(f"unknown model kind {kind!r}")


def nll_loss(model, batch: OfflineDataset) -> float:
    return model.nll_loss(batch)


def nll_grad(model, batch: OfflineDataset) -> np.ndarray:
    return model.nll_grad(batch)


def sample(model, s, a, rng: np.random.Generator, member: int | None = None):
    if hasattr(model, "n_members"):
        return model.sample(s, a, rng, member)
    return model.sample(s, a, rng)


def max_aleatoric_uncertainty(ensemble: GaussianEnsemble, s, a) -> np.ndarray:
    """max_k ||Sigma_k(s, a)||_F for diagonal Sigma_k; one value per row."""
    var = ensemble.variances(s, a)
    return np.sqrt(np.sum(var ** 2, axis=2)).max(axis=0)


@dataclass(frozen=True)
class TabularEnsemble:
    """Independent tabular models sampled member-wise (no training surface)."""

    models: tuple

    def __post_init__(self):
        if not self.models:
            raise InvalidInputError("ensemble needs at least one member")
        shapes = {m.logits.shape for m in self.models}
        if len(shapes) != 1:
            raise InvalidInputError("tabular members must share a shape")
        object.__setattr__(self, "models", tuple(self.models))

    @property
    def n_members(self) -> int:
        return len(self.models)

    def sample_member(self, k: int, s, a, rng: np.random.Generator):
        return self.models[k].sample(s, a, rng)

    def sample(self, s, a, rng: np.random.Generator, member: int | None = None):
        if member is not None:
            return self.sample_member(member, s, a, rng)
        s = np.asarray(s, dtype=int)
        which = rng.integers(0, self.n_members, size=s.shape)
        r = np.empty(s.shape)
        s_next = np.empty(s.shape, dtype=int)
        for k in np.unique(which):
            rows = which == k
            r[rows], s_next[rows] = self.sample_member(int(k), s[rows], np.asarray(a)[rows], rng)
        return r, s_next
