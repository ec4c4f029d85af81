import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vipolab.dataset import OfflineDataset, SpaceSpec, collect, estimate_behavior_policy
from vipolab.dynamics import TabularDynamicsModel, fit_mle_tabular
from vipolab.envs import LinearRegulator, collect_continuous, noisy_linear_policy
from vipolab.errors import ConfigError, InvalidInputError
from vipolab.mdp import TabularPolicy, chain_mdp, random_mdp
from vipolab.value_learning import solve_vm_tabular
from vipolab.vipo import (REPORT_COLUMNS, TrainConfig, _StopRule, augmented_loss, linearized_augmented_loss,
                          surrogate_gradient, train_nll, train_vipo, value_inconsistency)


def _instance(seed, S=4, A=2, episodes=2, horizon=6):
    rng = np.random.default_rng([7, seed])
    model = TabularDynamicsModel.random(S, A, rng)
    batch = collect(random_mdp(S, A, seed=seed), TabularPolicy.uniform(S, A), episodes, horizon, seed=seed)
    vd, vm = rng.uniform(-3, 3, S), rng.uniform(-3, 3, S)
    return model, batch, vd, vm, rng


# --- value inconsistency --------------------------------------------------------


def test_equal_values_have_zero_inconsistency():
    assert value_inconsistency([1.0, -2.0, 3.5], [1.0, -2.0, 3.5]) == 0.0


def test_single_state_unit_gap():
    assert value_inconsistency([1.0], [0.0]) == 1.0


def test_uniform_weights_over_two_states():
    assert value_inconsistency([2.0, 0.0], [0.0, 0.0], weights=[0.5, 0.5]) == pytest.approx(2.0)


def test_empty_state_set_rejected():
    with pytest.raises(InvalidInputError):
        value_inconsistency([], [])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(-10, 10))
def test_inconsistency_is_shift_invariant_and_nonnegative(values, shift):
    vd = np.array(values)
    vm = vd[::-1].copy()
    base = value_inconsistency(vd, vm)
    assert base >= 0.0
    assert value_inconsistency(vd + shift, vm + shift) == pytest.approx(base, rel=1e-9, abs=1e-6)


# --- augmented loss -------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_zero_lambda_is_nll(seed):
    model, batch, vd, vm, _ = _instance(seed)
    assert augmented_loss(model, vd, vm, batch, 0.0) == model.nll_loss(batch)


@pytest.mark.parametrize("lam", [0.1, 0.35, 4.0])
def test_matching_values_reduce_to_nll(lam):
    model, batch, vd, _, _ = _instance(3)
    assert augmented_loss(model, vd, vd, batch, lam) == model.nll_loss(batch)


def test_default_lambda():
    assert TrainConfig().lam == 0.35
    assert TrainConfig().to_dict()["lambda"] == 0.35


def test_augmented_loss_adds_scaled_inconsistency():
    model, batch, vd, vm, _ = _instance(1)
    gap = value_inconsistency(vd[batch.s], vm[batch.s])
    assert augmented_loss(model, vd, vm, batch, 2.0) == pytest.approx(model.nll_loss(batch) + 2.0 * gap)


def test_negative_lambda_rejected():
    model, batch, vd, vm, _ = _instance(0)
    with pytest.raises(InvalidInputError):
        augmented_loss(model, vd, vm, batch, -0.1)


# --- surrogate gradient -----------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_surrogate_degenerates_to_nll_grad(seed):
    model, batch, vd, vm, rng = _instance(seed)
    np.testing.assert_array_equal(surrogate_gradient(model, vd, vm, batch, 0.0, 0.9, rng), model.nll_grad(batch))
    np.testing.assert_array_equal(surrogate_gradient(model, vd, vd, batch, 1.3, 0.9, rng), model.nll_grad(batch))


def _second_term(model, vd, vm, batch, rng, exact):
    zero = np.zeros_like(vd)
    full = surrogate_gradient(model, vd, vm, batch, 1.0, 0.9, rng, exact=exact)
    return full - surrogate_gradient(model, zero, zero, batch, 1.0, 0.9, rng, exact=exact)


def test_sampled_second_term_converges_to_enumeration():
    # 10^5 repetitions of every batch row
    rng = np.random.default_rng(0)
    model = TabularDynamicsModel.random(2, 2, rng)
    base = collect(random_mdp(2, 2, seed=1), TabularPolicy.uniform(2, 2), 1, 4, seed=2)
    vd, vm = np.array([2.0, 3.0]), np.array([0.0, 6.0])
    exact = _second_term(model, vd, vm, base, rng, exact=True)
    tiled = base.subset(np.tile(np.arange(len(base)), 100_000))
    mc = _second_term(model, vd, vm, tiled, rng, exact=False)
    judged = exact != 0
    np.testing.assert_array_equal(mc[~judged], 0.0)
    assert np.max(np.abs(mc - exact)[judged] / np.abs(exact[judged])) < 0.01


@pytest.mark.parametrize("seed", range(4))
def test_sampled_second_term_within_standard_errors(seed):
    model, base, vd, vm, rng = _instance(seed, S=3, episodes=1, horizon=4)
    exact = _second_term(model, vd, vm, base, rng, exact=True)
    reps = np.stack([_second_term(model, vd, vm, base.subset(np.tile(np.arange(len(base)), 500)), rng, False)
                     for _ in range(40)])
    se = reps.std(axis=0, ddof=1) / math.sqrt(len(reps))
    assert np.all(np.abs(reps.mean(axis=0) - exact) <= 4 * se + 1e-12)


def test_exact_surrogate_is_gradient_of_linearized_loss():
    model, batch, vd, vm, rng = _instance(2)
    grad = surrogate_gradient(model, vd, vm, batch, 0.7, 0.9, rng, exact=True)
    theta, h = model.theta, 1e-6
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (linearized_augmented_loss(model.with_theta(theta + e), vd, vm, batch, 0.7, 0.9)
                 - linearized_augmented_loss(model.with_theta(theta - e), vd, vm, batch, 0.7, 0.9)) / (2 * h)
    np.testing.assert_allclose(grad, fd, atol=1e-7)


def test_exact_step_never_increases_frozen_loss():
    failures = 0
    for i in range(100):
        model, batch, vd, vm, rng = _instance(i, S=int(2 + i % 4), A=int(1 + i % 3))
        lam = [0.1, 0.35, 1.0, 3.0][i % 4]
        grad = surrogate_gradient(model, vd, vm, batch, lam, 0.9, rng, exact=True)
        before = linearized_augmented_loss(model, vd, vm, batch, lam, 0.9)
        after = linearized_augmented_loss(model.with_theta(model.theta - 1e-4 * grad), vd, vm, batch, lam, 0.9)
        failures += after > before
    assert failures == 0


def test_exact_step_raises_model_value_when_data_value_is_higher():
    mdp = random_mdp(4, 2, seed=5)
    data = collect(mdp, TabularPolicy.uniform(4, 2), 10, 20, seed=5)
    mu = estimate_behavior_policy(data)
    model = fit_mle_tabular(data)
    vm = solve_vm_tabular(model, mu, 0.9)
    vd = vm + 1.0
    grad = surrogate_gradient(model, vd, vm, data, 1.0, 0.9, np.random.default_rng(0), exact=True)
    stepped = model.with_theta(model.theta - 1e-3 * grad)
    assert np.all(solve_vm_tabular(stepped, mu, 0.9) > vm)


# --- training -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def chain_data():
    return collect(chain_mdp(), TabularPolicy.uniform(6, 2), 20, 50, seed=0)


def test_tabular_zero_lambda_matches_nll_trainer(chain_data):
    cfg = TrainConfig(lam=0.0, gamma=0.9, max_outer_iters=30)
    model, _ = train_vipo(chain_data, cfg)
    ref, _ = train_nll(chain_data, cfg)
    np.testing.assert_allclose(model.theta, ref.theta, rtol=0, atol=1e-12)


def test_chain_recovers_kernel_and_lowers_inconsistency():
    mdp = chain_mdp()
    # 5000 transitions: the MLE itself is within TV 0.02 per row
    chain_data = collect(mdp, TabularPolicy.uniform(6, 2), 100, 50, seed=0)
    model, report = train_vipo(chain_data, TrainConfig(gamma=0.9, lam=0.35))
    visited = np.zeros((6, 2), bool)
    visited[chain_data.s, chain_data.a] = True
    tv = 0.5 * np.abs(model.probs - mdp.transition).sum(axis=2)
    assert np.all(tv[visited] < 0.05)
    assert report.records[-1]["l_vic_rho0"] < report.records[0]["l_vic_rho0"]


def test_report_rows_are_finite_and_complete(chain_data, tmp_path):
    _, report = train_vipo(chain_data, TrainConfig(gamma=0.9, max_outer_iters=7))
    assert 1 <= len(report.records) <= 7
    assert [r["iteration"] for r in report.records] == list(range(len(report.records)))
    assert all(set(r) == set(REPORT_COLUMNS) for r in report.records)
    assert all(np.isfinite(r[c]) for r in report.records for c in REPORT_COLUMNS)
    assert report.stop_reason in ("max_outer_iters", "invalid_update_patience")
    report.to_csv(tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == len(report.records) + 1


def test_zero_iterations_returns_initial_model(chain_data):
    model, report = train_vipo(chain_data, TrainConfig(gamma=0.9, max_outer_iters=0))
    np.testing.assert_array_equal(model.theta, TabularDynamicsModel.zeros(6, 2).theta)
    assert report.records == []


def test_empty_dataset_rejected():
    with pytest.raises(InvalidInputError):
        train_vipo(OfflineDataset.empty(SpaceSpec.tabular(2, 1)), TrainConfig())


def test_same_seed_is_reproducible(chain_data):
    cfg = TrainConfig(gamma=0.9, max_outer_iters=5, seed=3)
    a, ra = train_vipo(chain_data, cfg)
    b, rb = train_vipo(chain_data, cfg)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert ra.records == rb.records


def test_ensemble_zero_lambda_matches_nll_trainer():
    env = LinearRegulator()
    data = collect_continuous(env, noisy_linear_policy(0.5, 0.3), 4, 20, seed=0)
    cfg = TrainConfig(lam=0.0, gamma=0.9, n_members=2, hidden=(8,), max_outer_iters=3, vd_steps=20,
                      vm_inner_steps=5, batch_size=32)
    model, _ = train_vipo(data, cfg)
    ref, err = train_nll(data, cfg)
    assert model.nll_loss(data) == pytest.approx(ref.nll_loss(data), rel=1e-9)
    assert model.prediction_error(data) == pytest.approx(err, rel=1e-9)


# --- stop rule ----------------------------------------------------------------------


def test_small_improvements_count_as_invalid():
    rule = _StopRule(0.01, 3)
    assert not rule.update(1.0)
    assert not rule.update(0.995)   # 0.5% better: invalid
    assert not rule.update(0.992)
    assert rule.update(0.991)


def test_large_improvement_resets_patience():
    rule = _StopRule(0.01, 2)
    rule.update(1.0)
    rule.update(1.0)
    assert not rule.update(0.9)
    assert not rule.update(0.9)
    assert rule.update(0.9)


@settings(max_examples=50)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=30), st.integers(1, 5))
def test_stop_rule_fires_only_after_patience(errors, patience):
    rule = _StopRule(0.01, patience)
    best, invalid = math.inf, 0
    for e in errors:
        fired = rule.update(e)
        if best == math.inf or best - e > 0.01 * best:
            best, invalid = e, 0
        else:
            invalid += 1
        assert fired == (invalid >= patience)


def test_patience_stops_training(chain_data):
    _, report = train_vipo(chain_data, TrainConfig(gamma=0.9, max_outer_iters=500, invalid_update_patience=1))
    assert report.stop_reason == "invalid_update_patience"
    assert len(report.records) < 500


# --- config -------------------------------------------------------------------------


def test_config_round_trip():
    cfg = TrainConfig(lam=1.5, hidden=(16, 16), seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("doc", [{"lam": 0.3}, {"learning_rate": 1e-3}, {"lambda": -1.0},
                                 {"improvement_threshold": 0.0}, {"model_optimizer": "sgd"}])
def test_config_rejects_bad_documents(doc):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(doc)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.model_lr, cfg.value_lr, cfg.tau, cfg.gamma, cfg.batch_size) == (1e-3, 1e-4, 5e-3, 0.99, 256)
    assert (cfg.n_members, cfg.vm_inner_steps, cfg.invalid_update_patience) == (7, 200, 5)
