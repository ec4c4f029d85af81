"""Value-inconsistency penalised model training.

The model loss is NLL + lambda * E[(V_d(s) - V_m(s))^2], where V_d is learned
from data alone and V_m through the model. Its practical gradient replaces
the implicit derivative of V_m with a score-function term on one-step model
samples, using target value functions.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .approximator import Adam, ParamVector, ValuePair
from .dataset import OfflineDataset, estimate_behavior_policy
from .dynamics import GaussianEnsemble, TabularDynamicsModel
from .errors import ConfigError, DivergenceError, InvalidInputError
from .value_learning import (
    empirical_bellman,
    evaluate_value,
    fit_vd_msbe,
    fit_vm,
    model_bellman,
    solve_vd,
    solve_vm_tabular,
    value_layout,
)

REPORT_COLUMNS = ("iteration", "nll", "l_vic_rho0", "l_vic_data", "augmented_loss", "grad_norm",
                  "vd_residual", "vm_residual", "holdout_error")


@dataclass
class TrainConfig:
    """Every tunable of model training. `lam` is serialised as "lambda"."""

    lam: float = 0.35
    model_lr: float = 1e-3
    tabular_lr: float = 0.05
    value_lr: float = 1e-4
    tau: float = 5e-3
    gamma: float = 0.99
    batch_size: int = 256
    max_outer_iters: int = 100
    invalid_update_patience: int = 5
    improvement_threshold: float = 0.01
    n_members: int = 7
    seed: int = 0
    vm_inner_steps: int = 200
    vd_steps: int = 2000
    hidden: tuple = (64, 64)
    log_var_bounds: tuple = (-10.0, 0.5)
    model_optimizer: str = "adam"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.log_var_bounds = tuple(float(b) for b in self.log_var_bounds)
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0.0 < self.improvement_threshold < 1.0:
            raise ConfigError("improvement_threshold must lie in (0, 1)")
        if self.batch_size < 1 or self.n_members < 1 or self.max_outer_iters < 0:
            raise ConfigError("batch_size and n_members must be >= 1, max_outer_iters >= 0")
        if not 0.0 <= self.gamma < 1.0 or not 0.0 <= self.tau <= 1.0:
            raise ConfigError("need 0 <= gamma < 1 and 0 <= tau <= 1")
        if self.invalid_update_patience < 1:
            raise ConfigError("invalid_update_patience must be >= 1")
        if self.model_optimizer != "adam":
            raise ConfigError("only the 'adam' model optimizer is available")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        doc["hidden"] = list(self.hidden)
        doc["log_var_bounds"] = list(self.log_var_bounds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return _strict_config(cls, doc, aliases={"lambda": "lam"})


def _strict_config(cls, doc: dict, aliases=None):
    aliases = aliases or {}
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        name = aliases.get(key, key)
        if name not in names or key in aliases.values():
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    wall_clock: float = 0.0
    model: object = None
    stop_reason: str = ""
    notes: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for rec in self.records:
                writer.writerow([rec["iteration"]] + [repr(float(rec[c])) for c in REPORT_COLUMNS[1:]])


# --- losses -------------------------------------------------------------------


def value_inconsistency(vd_values, vm_values, weights=None) -> float:
    """Weighted mean of (V_d(s) - V_m(s))^2 over a state set."""
    vd_values = np.asarray(vd_values, dtype=float).reshape(-1)
    vm_values = np.asarray(vm_values, dtype=float).reshape(-1)
    if vd_values.size == 0:
        raise InvalidInputError("value inconsistency needs a nonempty state set")
    if vd_values.shape != vm_values.shape:
        raise InvalidInputError("V_d and V_m must be evaluated on the same states")
    w = np.full(vd_values.size, 1.0 / vd_values.size) if weights is None else np.asarray(weights, float)
    if w.shape != vd_values.shape or np.any(w < 0) or w.sum() <= 0:
        raise InvalidInputError("weights must be nonnegative with positive sum")
    return float(np.sum(w * (vd_values - vm_values) ** 2) / w.sum())


def values_at(v, states, space) -> np.ndarray:
    """Evaluate a tabular value vector, a value network or a callable."""
    if isinstance(v, ParamVector):
        return evaluate_value(v, states, space)
    if callable(v):
        return np.asarray(v(states), dtype=float)
    return np.asarray(v, dtype=float)[np.asarray(states, dtype=int)]


def augmented_loss(model, vd, vm, batch: OfflineDataset, lam: float, member: int | None = None) -> float:
    """nll_loss + lambda * value inconsistency over the batch's start states."""
    if lam < 0:
        raise InvalidInputError("lambda must be >= 0")
    nll = model.nll_loss(batch) if member is None else model.member_nll_loss(member, batch)
    if lam == 0:
        return nll
    vic = value_inconsistency(values_at(vd, batch.s, batch.space), values_at(vm, batch.s, batch.space))
    return nll + lam * vic


def linearized_augmented_loss(model: TabularDynamicsModel, vd, vm, batch: OfflineDataset,
                              lam: float, gamma: float) -> float:
    """Tabular surrogate objective whose exact gradient is the enumerated
    surrogate gradient: V_m(s) is replaced by its first-order proxy
    Q_theta(s, a) = r_theta(s, a) + gamma sum_j p_theta(j|s, a) Vbar_m(j) around Vbar_m,
    i.e. (d - m)^2 - 2 (d - m)(Q_theta - m) per sample."""
    vd, vm = np.asarray(vd, float), np.asarray(vm, float)
    s, a = batch.s, batch.a
    q = model.reward_table[s, a] + gamma * model.probs[s, a] @ vm
    gap = vd[s] - vm[s]
    return model.nll_loss(batch) + lam * float(np.mean(gap ** 2 - 2.0 * gap * (q - vm[s])))


def surrogate_gradient(model, vd_target, vm_target, batch: OfflineDataset, lam: float, gamma: float,
                       rng: np.random.Generator, member: int | None = None, exact: bool = False):
    """grad NLL - 2 lambda mean_b (Vbar_d(s) - Vbar_m(s)) (r + gamma Vbar_m(s')) grad log P(s', r|s, a)

    with (s', r) a fresh model draw per batch row. For a GaussianEnsemble pass
    `member` to get that member's gradient; with member=None, vm_target must
    hold one value function per member and the result is the gradient of the
    member-averaged loss. `exact=True` (tabular only) enumerates next states
    instead of sampling.
    """
    if isinstance(model, GaussianEnsemble) and member is None:
        parts = [surrogate_gradient(model, vd_target, vm_target[k], batch, lam, gamma, rng, member=k)
                 for k in range(model.n_members)]
        return np.concatenate(parts) / model.n_members
    tabular = isinstance(model, TabularDynamicsModel)
    nll = model.nll_grad(batch) if tabular else model.member_nll_grad(member, batch)
    if lam == 0:
        return nll
    space = batch.space
    gap = values_at(vd_target, batch.s, space) - values_at(vm_target, batch.s, space)
    weights = gap / len(batch)
    if exact:
        if not tabular:
            raise InvalidInputError("exact enumeration is only available for tabular models")
        second = model.expected_backup_gradient(batch.s, batch.a, vm_target, gamma, weights)
    elif tabular:
        r, s_next = model.sample(batch.s, batch.a, rng)
        backup = r + gamma * values_at(vm_target, s_next, space)
        second = model.backup_gradient(batch.s, batch.a, s_next, backup, weights)
    else:
        r, s_next = model.sample_member(member, batch.s, batch.a, rng)
        backup = r + gamma * values_at(vm_target, s_next, space)
        second = model.member_backup_gradient(member, batch.s, batch.a, s_next, r, backup, weights)
    grad = nll - 2.0 * lam * second
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("surrogate gradient became non-finite")
    return grad


# --- training -------------------------------------------------------------------


def _rng_streams(seed: int, n_members: int):
    root = np.random.SeedSequence(seed)
    init, vd, *rest = root.spawn(2 + 3 * n_members)
    members = [tuple(np.random.default_rng(s) for s in rest[3 * k:3 * k + 3]) for k in range(n_members)]
    return np.random.default_rng(init), np.random.default_rng(vd), members


class _StopRule:
    """An update is invalid unless it improves the best held-out error by more
    than `threshold` (relative); stop after `patience` invalid updates in a row."""

    def __init__(self, threshold: float, patience: int):
        self.threshold, self.patience = threshold, patience
        self.best = math.inf
        self.invalid = 0

    def update(self, error: float) -> bool:
        if self.best == math.inf or (self.best - error) > self.threshold * abs(self.best):
            self.best = error
            self.invalid = 0
        else:
            self.invalid += 1
        return self.invalid >= self.patience


def _check_record(rec: dict):
    for key, value in rec.items():
        if not np.isfinite(value):
            raise DivergenceError(f"logged scalar {key!r} became non-finite")


def train_vipo(dataset: OfflineDataset, config: TrainConfig, holdout: OfflineDataset | None = None,
               rho0=None, init_model=None):
    """Train a dynamics model with the value-inconsistency penalty.

    A discrete dataset yields a `TabularDynamicsModel` (exact V_d and V_m
    solves); a continuous one yields a `GaussianEnsemble` with network values.
    `holdout` drives the stopping rule (the training set is used when absent).
    `rho0` is a start distribution (tabular) or an array of start states
    (continuous) for the logged rho0-weighted inconsistency; it defaults to
    the dataset's own state distribution. `init_model` replaces the seeded
    initialisation (a zero-logit table or a fresh ensemble).
    Returns (model, TrainReport).
    """
    if len(dataset) == 0:
        raise InvalidInputError("dataset must be nonempty")
    start = time.perf_counter()
    if dataset.space.discrete:
        model, report = _train_tabular(dataset, config, holdout, rho0, init_model)
    else:
        model, report = _train_ensemble(dataset, config, holdout, rho0, init_model)
    report.wall_clock = time.perf_counter() - start
    report.model = model
    return model, report


def _train_tabular(dataset, config, holdout, rho0, init_model=None):
    S, A = dataset.space.state_size, dataset.space.action_size
    gamma, lam = config.gamma, config.lam
    report = TrainReport()
    mu = estimate_behavior_policy(dataset)
    vd = solve_vd(dataset, gamma)
    vd_residual = float(np.max(np.abs(empirical_bellman(dataset, vd, gamma) - vd)))
    if rho0 is None:
        rho0 = np.bincount(dataset.s, minlength=S) / len(dataset)
        report.notes.append("rho0 defaulted to the dataset state distribution")
    rho0 = np.asarray(rho0, dtype=float)
    monitor = dataset if holdout is None else holdout
    model = TabularDynamicsModel.zeros(S, A) if init_model is None else init_model
    if model.reward_table.shape != (S, A):
        raise InvalidInputError("init_model does not match the dataset's spaces")
    opt = Adam(model.n_params, config.tabular_lr)
    _, _, streams = _rng_streams(config.seed, 1)
    batch_rng, _, sample_rng = streams[0]
    rule = _StopRule(config.improvement_threshold, config.invalid_update_patience)
    report.stop_reason = "max_outer_iters"
    for it in range(config.max_outer_iters):
        nll = model.nll_loss(dataset)
        vm = solve_vm_tabular(model, mu, gamma)
        vm_residual = float(np.max(np.abs(model_bellman(model, mu, vm, gamma) - vm)))
        l_vic_data = value_inconsistency(vd[dataset.s], vm[dataset.s])
        l_vic_rho0 = value_inconsistency(vd, vm, rho0)
        grad_sq = 0.0
        theta = model.theta
        for batch in dataset.minibatches(config.batch_size, batch_rng):
            # V_m tracks theta at every update; a stale V_m overshoots through the occupancy.
            vm_now = solve_vm_tabular(model, mu, gamma) if lam else vm
            g = surrogate_gradient(model, vd, vm_now, batch, lam, gamma, sample_rng)
            grad_sq = float(g @ g)
            theta = opt.step(theta, g)
            model = model.with_theta(theta)
        err = model.prediction_error(monitor)
        rec = dict(iteration=it, nll=nll, l_vic_rho0=l_vic_rho0, l_vic_data=l_vic_data,
                   augmented_loss=nll + lam * l_vic_data, grad_norm=math.sqrt(grad_sq),
                   vd_residual=vd_residual, vm_residual=vm_residual, holdout_error=err)
        _check_record(rec)
        report.records.append(rec)
        if rule.update(err):
            report.stop_reason = "invalid_update_patience"
            break
    return model, report


def _train_ensemble(dataset, config, holdout, rho0, init_model=None):
    space = dataset.space
    gamma, lam, N = config.gamma, config.lam, config.n_members
    report = TrainReport()
    init_rng, vd_rng, streams = _rng_streams(config.seed, N)
    model = GaussianEnsemble.create(space.state_size, space.action_size, N, init_rng,
                                    hidden=config.hidden, log_var_bounds=config.log_var_bounds,
                                    data=dataset)
    if init_model is not None:
        if (init_model.n_members, init_model.state_dim, init_model.action_dim) != (
                N, space.state_size, space.action_size):
            raise InvalidInputError("init_model does not match n_members or the dataset's spaces")
        model = init_model
    vd_pair = ValuePair.create(value_layout(space, config.hidden), init_rng, config.tau)
    if rho0 is None:
        rho0 = dataset.s
        report.notes.append("rho0 defaulted to the dataset states")
    rho0 = np.asarray(rho0, dtype=float).reshape(-1, space.state_size)
    monitor = dataset if holdout is None else holdout
    fit = fit_vd_msbe(dataset, vd_pair, config, vd_rng)
    vd_pair, vd_residual = fit.pair, fit.final_loss
    vd_data = evaluate_value(vd_pair.target, dataset.s, space)
    vd_rho0 = evaluate_value(vd_pair.target, rho0, space)
    vm_pairs = [vd_pair] * N  # warm start V_m from V_d
    vm_opts = [None] * N
    opts = [Adam(model.layout.n_params, config.model_lr) for _ in range(N)]
    rule = _StopRule(config.improvement_threshold, config.invalid_update_patience)
    report.stop_reason = "max_outer_iters"
    for it in range(config.max_outer_iters):
        nll = model.nll_loss(dataset)
        vm_res, vic_data, vic_rho0, grad_sq = [], [], [], []
        for k in range(N):
            batch_rng, vm_rng, sample_rng = streams[k]
            vm_target = vm_pairs[k].target
            vic_data.append(value_inconsistency(vd_data, evaluate_value(vm_target, dataset.s, space)))
            vic_rho0.append(value_inconsistency(vd_rho0, evaluate_value(vm_target, rho0, space)))
            batches = list(dataset.minibatches(config.batch_size, batch_rng))
            # The V_m budget is spread over the updates so V_m tracks theta.
            per_batch = -(-config.vm_inner_steps // len(batches))
            values = model.members[k].values
            g = None
            for batch in batches:
                fitm = fit_vm(dataset, model, vm_pairs[k], config, vm_rng, n_steps=per_batch, member=k,
                              optimizer=vm_opts[k])
                vm_pairs[k], vm_opts[k] = fitm.pair, fitm.optimizer
                g = surrogate_gradient(model, vd_pair.target, vm_pairs[k].target, batch, lam, gamma,
                                       sample_rng, member=k)
                values = opts[k].step(values, g)
                model = model.with_member(k, ParamVector(values, model.layout))
            vm_res.append(fitm.final_loss)
            grad_sq.append(float(g @ g))
        err = model.prediction_error(monitor)
        l_vic_data = float(np.mean(vic_data))
        rec = dict(iteration=it, nll=nll, l_vic_rho0=float(np.mean(vic_rho0)), l_vic_data=l_vic_data,
                   augmented_loss=nll + lam * l_vic_data, grad_norm=math.sqrt(float(np.mean(grad_sq))),
                   vd_residual=vd_residual, vm_residual=float(np.mean(vm_res)), holdout_error=err)
        _check_record(rec)
        report.records.append(rec)
        if rule.update(err):
            report.stop_reason = "invalid_update_patience"
            break
    return model, report


def train_nll(dataset: OfflineDataset, config: TrainConfig, holdout: OfflineDataset | None = None):
    """Plain maximum-likelihood training with the same initialisation, batch
    order and stopping rule as `train_vipo`; returns (model, final holdout error)."""
    if len(dataset) == 0:
        raise InvalidInputError("dataset must be nonempty")
    monitor = dataset if holdout is None else holdout
    rule = _StopRule(config.improvement_threshold, config.invalid_update_patience)
    err = math.nan
    if dataset.space.discrete:
        model = TabularDynamicsModel.zeros(dataset.space.state_size, dataset.space.action_size)
        opt = Adam(model.n_params, config.tabular_lr)
        _, _, streams = _rng_streams(config.seed, 1)
        batch_rng = streams[0][0]
        for _ in range(config.max_outer_iters):
            theta = model.theta
            for batch in dataset.minibatches(config.batch_size, batch_rng):
                theta = opt.step(theta, model.nll_grad(batch))
                model = model.with_theta(theta)
            err = model.prediction_error(monitor)
            if rule.update(err):
                break
        return model, err
    space = dataset.space
    init_rng, _, streams = _rng_streams(config.seed, config.n_members)
    model = GaussianEnsemble.create(space.state_size, space.action_size, config.n_members, init_rng,
                                    hidden=config.hidden, log_var_bounds=config.log_var_bounds,
                                    data=dataset)
    opts = [Adam(model.layout.n_params, config.model_lr) for _ in range(config.n_members)]
    for _ in range(config.max_outer_iters):
        for k in range(config.n_members):
            values = model.members[k].values
            for batch in dataset.minibatches(config.batch_size, streams[k][0]):
                values = opts[k].step(values, model.member_nll_grad(k, batch))
                model = model.with_member(k, ParamVector(values, model.layout))
        err = model.prediction_error(monitor)
        if rule.update(err):
            break
    return model, err
