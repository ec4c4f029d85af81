"""Exact and Monte-Carlo gradients of the augmented loss on tabular models.

The rho0-weighted augmented loss is

    L(theta) = NLL(theta; batch) + lambda * sum_s rho0(s) (V_d(s) - V_m^theta(s))^2

where V_m^theta is the exact value of the behaviour policy under the model.
Its gradient is assembled from the discounted occupancy
d = (I - gamma P_theta^mu)^-1 and the per-state vectors

    psi(x) = grad_theta sum_a mu(a|x) sum_j p_theta(j|x, a) (r_theta(x, a) + gamma V_m(j))

taken at frozen V_m. Parameters are the tabular model's flat theta
(logits followed by the reward table). All computations use direct solves.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .dataset import OfflineDataset
from .dynamics import TabularDynamicsModel
from .errors import ConfigError, InvalidInputError
from .mdp import TabularPolicy, policy_matrices
from .value_learning import model_bellman, solve_vm_tabular

PSI_RESIDUAL_TOL = 1e-8


def discounted_occupancy(model: TabularDynamicsModel, policy: TabularPolicy, gamma: float) -> np.ndarray:
    """d[s, s'] = sum_t gamma^t Pr(s_t = s' | s_0 = s); rows sum to 1/(1 - gamma)."""
    if not 0.0 <= gamma < 1.0:
        raise InvalidInputError("gamma must lie in [0, 1)")
    P_mu, _ = policy_matrices(model.probs, model.reward_table, policy.probs)
    return np.linalg.inv(np.eye(model.n_states) - gamma * P_mu)


def psi(model: TabularDynamicsModel, policy: TabularPolicy, vm, gamma: float) -> np.ndarray:
    """(S, n_params) array; row x is psi(x) in flat-theta coordinates.

    Logit block at (x, a, j): mu(a|x) p(j|x,a) gamma (vm(j) - sum_k p(k|x,a) vm(k))
    (the reward cancels inside the softmax Jacobian). Reward block at (x, a):
    mu(a|x).
    """
    vm = np.asarray(vm, dtype=float)
    residual = np.max(np.abs(model_bellman(model, policy, vm, gamma) - vm))
    if residual > PSI_RESIDUAL_TOL:
        raise InvalidInputError(f"vm is not the model's fixed point (residual {residual:.2e})")
    S, A = model.n_states, model.n_actions
    mu = policy.probs
    p = model.probs
    centred = vm[None, None, :] - (p @ vm)[:, :, None]
    logit_block = mu[:, :, None] * p * gamma * centred  # (S, A, S)
    out = np.zeros((S, model.n_params))
    k = model.logits.size
    for x in range(S):
        out[x, x * A * S:(x + 1) * A * S] = logit_block[x].ravel()
        out[x, k + x * A:k + (x + 1) * A] = mu[x]
    return out


def vic_rho0(model: TabularDynamicsModel, policy: TabularPolicy, vd, rho0, gamma: float) -> float:
    """sum_s rho0(s) (V_d(s) - V_m(s))^2 with V_m solved exactly."""
    vm = solve_vm_tabular(model, policy, gamma)
    return float(np.asarray(rho0) @ (np.asarray(vd) - vm) ** 2)


def augmented_loss_exact(model: TabularDynamicsModel, policy: TabularPolicy, vd, rho0, lam: float,
                         gamma: float, batch: OfflineDataset) -> float:
    return model.nll_loss(batch) + lam * vic_rho0(model, policy, vd, rho0, gamma)


def exact_theorem_gradient(model: TabularDynamicsModel, policy: TabularPolicy, vd, rho0, lam: float,
                           gamma: float, batch: OfflineDataset) -> np.ndarray:
    """grad NLL - 2 lambda sum_{s, s'} rho0(s) (V_d(s) - V_m(s)) d(s, s') psi(s')."""
    vm = solve_vm_tabular(model, policy, gamma)
    gap = np.asarray(rho0, dtype=float) * (np.asarray(vd, dtype=float) - vm)
    d = discounted_occupancy(model, policy, gamma)
    second = (gap @ d) @ psi(model, policy, vm, gamma)
    return model.nll_grad(batch) - 2.0 * lam * second


def _categorical(cdf_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random((len(cdf_rows), 1))
    return np.minimum((cdf_rows < u).sum(axis=1), cdf_rows.shape[1] - 1)


def mc_theorem_samples(model: TabularDynamicsModel, policy: TabularPolicy, vd, rho0, gamma: float,
                       n_samples: int, rng: np.random.Generator):
    """Draw s ~ rho0, s' ~ (1 - gamma) d(s, .), a' ~ mu(.|s'), s'' ~ p(.|s', a').

    Returns (s, s', a', s'', per-sample weight (V_d(s) - V_m(s)) / (1 - gamma), V_m).
    """
    vm = solve_vm_tabular(model, policy, gamma)
    d = discounted_occupancy(model, policy, gamma) * (1.0 - gamma)
    d = np.maximum(d, 0.0)
    d /= d.sum(axis=1, keepdims=True)
    rho0 = np.asarray(rho0, dtype=float)
    s = _categorical(np.tile(np.cumsum(rho0), (n_samples, 1)), rng)
    s1 = _categorical(np.cumsum(d, axis=1)[s], rng)
    a1 = _categorical(np.cumsum(policy.probs, axis=1)[s1], rng)
    s2 = _categorical(np.cumsum(model.probs[s1, a1], axis=1), rng)
    weight = (np.asarray(vd, dtype=float)[s] - vm[s]) / (1.0 - gamma)
    return s, s1, a1, s2, weight, vm


def mc_theorem_gradient(model: TabularDynamicsModel, policy: TabularPolicy, vd, rho0, lam: float,
                        gamma: float, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Unbiased estimate of the second term, -2 lambda E[(V_d(s) - V_m(s)) psi(s')].

    Each draw contributes (r' + gamma V_m(s'')) (e_{s''} - p(.|s', a')) on the
    logits of (s', a') and the pathwise 1 on the reward of (s', a').
    """
    if lam == 0:
        return np.zeros(model.n_params)
    s, s1, a1, s2, weight, vm = mc_theorem_samples(model, policy, vd, rho0, gamma, n_samples, rng)
    backup = model.reward_table[s1, a1] + gamma * vm[s2]
    est = model.backup_gradient(s1, a1, s2, backup, weight / n_samples)
    return -2.0 * lam * est


def finite_difference(loss, params, step: float = 1e-5) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate."""
    if step <= 0:
        raise InvalidInputError("step must be positive")
    x0 = np.asarray(params, dtype=float)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        x = x0.copy()
        x[i] = x0[i] + step
        f_plus = loss(x)
        x[i] = x0[i] - step
        f_minus = loss(x)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite loss evaluation at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_errors(exact: np.ndarray, approx: np.ndarray, floor: float = 1e-8):
    """Per-coordinate |e - f| / max(|e|, |f|) and the mask of coordinates
    whose magnitude exceeds `floor` (the only ones that are judged)."""
    scale = np.maximum(np.abs(exact), np.abs(approx))
    mask = scale > floor
    rel = np.zeros_like(exact)
    rel[mask] = np.abs(exact - approx)[mask] / scale[mask]
    return rel, mask


# --- random instances ------------------------------------------------------------


def random_instance(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float,
                    batch_size: int = 20):
    """A random tabular model, behaviour policy, V_d, rho0 and NLL batch.

    Policies and rho0 are mixed with the uniform distribution so that no
    probability is vanishingly small.
    """
    from .dataset import SpaceSpec

    model = TabularDynamicsModel.random(n_states, n_actions, rng)
    probs = 0.5 * rng.dirichlet(np.ones(n_actions), size=n_states) + 0.5 / n_actions
    policy = TabularPolicy(probs / probs.sum(axis=1, keepdims=True))
    rho0 = 0.5 * rng.dirichlet(np.ones(n_states)) + 0.5 / n_states
    rho0 /= rho0.sum()
    vd = rng.uniform(-1.0, 1.0, size=n_states) / (1.0 - gamma)
    space = SpaceSpec.tabular(n_states, n_actions)
    batch = OfflineDataset(rng.integers(0, n_states, batch_size), rng.integers(0, n_actions, batch_size),
                           rng.uniform(-1.0, 1.0, batch_size), rng.integers(0, n_states, batch_size),
                           np.zeros(batch_size, dtype=bool), space)
    return model, policy, vd, rho0, batch


def theorem_check(model, policy, vd, rho0, lam, gamma, batch, step: float = 1e-5, floor: float = 1e-8):
    """Exact theorem gradient vs central differences of the exact augmented loss
    (V_m re-solved at every perturbed theta). Returns (exact, fd, rel, mask)."""
    exact = exact_theorem_gradient(model, policy, vd, rho0, lam, gamma, batch)

    def loss(theta):
        return augmented_loss_exact(model.with_theta(theta), policy, vd, rho0, lam, gamma, batch)

    fd = finite_difference(loss, model.theta, step)
    rel, mask = relative_errors(exact, fd, floor)
    return exact, fd, rel, mask


# --- batch check ---------------------------------------------------------------------

GRAD_CHECK_COLUMNS = ("instance", "coordinate", "exact", "fd", "mc", "rel_error", "judged")


@dataclass
class GradCheckSpec:
    """Random-instance sweep for the exact gradient vs central differences.
    Instance i draws its sizes from rng([seed, i]); gamma and lambda cycle
    through their lists. `mc_samples` sets the size of the Monte-Carlo
    column (0 disables it)."""

    n_instances: int = 50
    max_states: int = 6
    max_actions: int = 3
    gammas: tuple = (0.5, 0.9)
    lambdas: tuple = (0.1, 1.0)
    batch_size: int = 20
    step: float = 1e-5
    tolerance: float = 1e-4
    floor: float = 1e-8
    mc_samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.gammas = tuple(float(g) for g in self.gammas)
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if self.n_instances < 1 or self.max_states < 2 or self.max_actions < 1:
            raise ConfigError("need n_instances >= 1, max_states >= 2, max_actions >= 1")
        if not self.gammas or not self.lambdas:
            raise ConfigError("gammas and lambdas must be nonempty")
        if any(not 0.0 <= g < 1.0 for g in self.gammas) or any(x < 0 for x in self.lambdas):
            raise ConfigError("gammas must lie in [0, 1) and lambdas be >= 0")
        if self.step <= 0 or self.tolerance <= 0 or self.mc_samples < 0:
            raise ConfigError("step and tolerance must be positive, mc_samples >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "GradCheckSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown grad-check keys {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["gammas"], doc["lambdas"] = list(self.gammas), list(self.lambdas)
        return doc


@dataclass
class GradCheckResult:
    instances: list  # per instance: n_states, n_actions, gamma, lambda, max_rel_error, n_judged, passed
    coordinates: list  # rows matching GRAD_CHECK_COLUMNS

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.instances)

    @property
    def max_rel_error(self) -> float:
        return max(r["max_rel_error"] for r in self.instances)


def grad_check(spec: GradCheckSpec) -> GradCheckResult:
    instances, coords = [], []
    for i in range(spec.n_instances):
        rng = np.random.default_rng([spec.seed, i])
        S = int(rng.integers(2, spec.max_states + 1))
        A = int(rng.integers(1, spec.max_actions + 1))
        gamma = spec.gammas[i % len(spec.gammas)]
        lam = spec.lambdas[(i // len(spec.gammas)) % len(spec.lambdas)]
        model, policy, vd, rho0, batch = random_instance(rng, S, A, gamma, spec.batch_size)
        exact, fd, rel, mask = theorem_check(model, policy, vd, rho0, lam, gamma, batch, spec.step,
                                              spec.floor)
        if spec.mc_samples:
            mc = model.nll_grad(batch) + mc_theorem_gradient(model, policy, vd, rho0, lam, gamma,
                                                             spec.mc_samples, rng)
        else:
            mc = np.full_like(exact, np.nan)
        worst = float(rel[mask].max()) if mask.any() else 0.0
        instances.append({"instance": i, "n_states": S, "n_actions": A, "gamma": gamma, "lambda": lam,
                          "max_rel_error": worst, "n_judged": int(mask.sum()), "passed": worst < spec.tolerance})
        coords.extend({"instance": i, "coordinate": j, "exact": float(exact[j]), "fd": float(fd[j]),
                       "mc": float(mc[j]), "rel_error": float(rel[j]), "judged": bool(mask[j])}
                      for j in range(exact.size))
    return GradCheckResult(instances, coords)
