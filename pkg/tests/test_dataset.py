import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vipolab.dataset import (OfflineDataset, SpaceSpec, collect, embed, estimate_behavior_policy, load,
                             neighborhood_candidates, neighborhood_drop, save, split, visit_counts)
from vipolab.errors import InvalidInputError, ParseError
from vipolab.mdp import TabularMdp, TabularPolicy, random_mdp, random_policy


def _deterministic_ring(S=4):
    P = np.zeros((S, 1, S))
    for s in range(S):
        P[s, 0, (s + 1) % S] = 1.0
    return TabularMdp(P, np.arange(S, dtype=float).reshape(S, 1), np.eye(S)[0], 0.9)


def _box(points):
    pts = np.asarray(points, dtype=float)
    return OfflineDataset(pts[:, :1], pts[:, 1:], np.zeros(len(pts)), pts[:, :1], np.zeros(len(pts), bool),
                          SpaceSpec.box(1, 1))


def _tabular(rows, S, A):
    return OfflineDataset.from_transitions([(s, a, r, s2, False) for s, a, r, s2 in rows],
                                           SpaceSpec.tabular(S, A))


def test_collect_zero_episodes_is_empty():
    assert len(collect(random_mdp(3, 2), TabularPolicy.uniform(3, 2), 0, 5, seed=0)) == 0


def test_collect_deterministic_trajectory():
    data = collect(_deterministic_ring(), TabularPolicy.uniform(4, 1), 1, 3, seed=99)
    assert list(data) == [(0, 0, 0.0, 1, False), (1, 0, 1.0, 2, False), (2, 0, 2.0, 3, False)]


def test_collect_is_seeded():
    mdp, pi = random_mdp(4, 2, seed=1), random_policy(4, 2, seed=2)
    assert collect(mdp, pi, 5, 7, seed=3) == collect(mdp, pi, 5, 7, seed=3)
    assert collect(mdp, pi, 5, 7, seed=3) != collect(mdp, pi, 5, 7, seed=4)


def test_collect_frequencies_match_finite_horizon_occupancy():
    mdp, pi = random_mdp(3, 2, seed=11), random_policy(3, 2, seed=12)
    n_ep, horizon = 100, 10
    data = collect(mdp, pi, n_ep, horizon, seed=5)
    assert len(data) == 1000
    P_mu = np.einsum("sa,sat->st", pi.probs, mdp.transition)
    dist, occ = mdp.rho0.copy(), np.zeros(3)
    for _ in range(horizon):
        occ += dist / horizon
        dist = dist @ P_mu
    expected = occ[:, None] * pi.probs
    per_episode = np.zeros((n_ep, 3, 2))
    for i in range(n_ep):
        ep = data.subset(np.arange(i * horizon, (i + 1) * horizon))
        per_episode[i] = visit_counts(ep) / horizon
    se = per_episode.std(axis=0, ddof=1) / np.sqrt(n_ep)
    assert np.all(np.abs(per_episode.mean(axis=0) - expected) <= 3 * se + 1e-12)


def test_split_sizes_nine_to_one():
    data = _tabular([(0, 0, float(i), 0) for i in range(10)], 1, 1)
    train, valid = split(data, 0.9, seed=0)
    assert (len(train), len(valid)) == (9, 1)


def test_split_half_of_two():
    data = _tabular([(0, 0, 1.0, 0), (0, 0, 2.0, 0)], 1, 1)
    assert tuple(map(len, split(data, 0.5, seed=3))) == (1, 1)


def test_split_errors():
    data = _tabular([(0, 0, 1.0, 0)], 1, 1)
    with pytest.raises(InvalidInputError):
        split(OfflineDataset.empty(SpaceSpec.tabular(1, 1)), 0.5, 0)
    with pytest.raises(InvalidInputError):
        split(data, 1.0, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.floats(0.01, 0.99), st.integers(0, 1000))
def test_split_is_a_partition(n, ratio, seed):
    data = _tabular([(0, 0, float(i), 0) for i in range(n)], 1, 1)
    a, b = split(data, ratio, seed)
    assert sorted(np.concatenate([a.r, b.r])) == list(map(float, range(n)))
    assert len(a) == int(np.floor(ratio * n + 0.5 + 1e-9))
    assert split(data, ratio, seed)[0] == a


def test_drop_ratio_zero_keeps_everything():
    data = collect(random_mdp(4, 2, seed=1), TabularPolicy.uniform(4, 2), 5, 10, 0)
    assert neighborhood_drop(data, 3, 0.8, 0.0, seed=2)[0] == data


def test_drop_ratio_one_removes_exactly_candidates():
    data = collect(random_mdp(6, 3, seed=1), TabularPolicy.uniform(6, 3), 5, 10, 0)
    remaining, anchors, n_cand = neighborhood_drop(data, 2, 0.8, 1.0, seed=2)
    mask = neighborhood_candidates(data.state_action_features(), anchors.state_action_features(), 0.8)
    assert n_cand == mask.sum()
    assert remaining == data.subset(np.flatnonzero(~mask))


def test_candidate_set_by_brute_force():
    values = [0.0, 0.5, 2.0]
    data = _box([(s, a) for s in values for a in values])
    mask = neighborhood_candidates(data.state_action_features(), np.array([[0.0, 0.0]]), 0.8)
    expected = [s in (0.0, 0.5) and a in (0.0, 0.5) for s in values for a in values]
    assert mask.tolist() == expected


def test_drop_errors():
    data = _tabular([(0, 0, 1.0, 0)], 1, 1)
    with pytest.raises(InvalidInputError):
        neighborhood_drop(data, 2)
    with pytest.raises(InvalidInputError):
        neighborhood_drop(data, 1, drop_ratio=1.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(1, 5), st.integers(0, 10_000))
def test_drop_size_and_nesting(ratio, n_anchors, seed):
    rng = np.random.default_rng(seed)
    data = _box(rng.uniform(-2, 2, size=(40, 2)))
    remaining, _, n_cand = neighborhood_drop(data, n_anchors, 0.8, ratio, seed)
    assert len(remaining) == len(data) - int(np.floor(ratio * n_cand + 0.5 + 1e-9))
    more, _, _ = neighborhood_drop(data, n_anchors, 0.8, min(1.0, ratio + 0.2), seed)
    assert set(map(float, more.s[:, 0])) <= set(map(float, remaining.s[:, 0]))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 2.0), st.floats(0.0, 2.0), st.integers(0, 10_000))
def test_candidates_monotone_in_radius(r1, extra, seed):
    rng = np.random.default_rng(seed)
    feats = rng.uniform(-3, 3, size=(50, 2))
    anchors = feats[:3]
    small = neighborhood_candidates(feats, anchors, r1)
    large = neighborhood_candidates(feats, anchors, r1 + extra)
    assert np.all(large[small])


def test_behavior_single_action_is_deterministic():
    data = _tabular([(0, 1, 0.0, 1), (1, 1, 0.0, 0), (0, 1, 0.0, 0)], 2, 3)
    np.testing.assert_array_equal(estimate_behavior_policy(data).probs, [[0, 1, 0], [0, 1, 0]])


def test_behavior_unvisited_state_uniform():
    data = _tabular([(0, 0, 0.0, 1)], 3, 2)
    np.testing.assert_array_equal(estimate_behavior_policy(data).probs[1:], np.full((2, 2), 0.5))


def test_behavior_recovers_known_policy():
    mdp, mu = random_mdp(3, 3, seed=2), random_policy(3, 3, seed=3, floor=0.3)
    data = collect(mdp, mu, 100, 100, seed=4)
    counts = visit_counts(data).sum(axis=1, keepdims=True)
    se = np.sqrt(mu.probs * (1 - mu.probs) / counts)
    assert np.all(np.abs(estimate_behavior_policy(data).probs - mu.probs) <= 3 * se)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 2)), max_size=30))
def test_behavior_rows_sum_to_one(pairs):
    data = _tabular([(s, a, 0.0, 0) for s, a in pairs], 4, 3)
    np.testing.assert_allclose(estimate_behavior_policy(data).probs.sum(axis=1), 1.0, atol=1e-12)


def test_save_load_round_trip(tmp_path):
    data = collect(random_mdp(4, 2, seed=8), TabularPolicy.uniform(4, 2), 3, 4, 1)
    save(data, tmp_path / "d.jsonl")
    assert load(tmp_path / "d.jsonl", data.space) == data
    cont = embed(data, np.random.default_rng(0).normal(size=(4, 3)), np.eye(2))
    save(cont, tmp_path / "c.jsonl")
    assert load(tmp_path / "c.jsonl") == cont


def test_save_load_empty(tmp_path):
    space = SpaceSpec.tabular(2, 2)
    save(OfflineDataset.empty(space), tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_text() == ""
    assert len(load(tmp_path / "e.jsonl", space)) == 0


def test_load_missing_reward_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"s": 0, "a": 0, "r": 1.0, "s_next": 0, "done": false}\n'
                    '{"s": 0, "a": 0, "s_next": 1, "done": false}\n')
    with pytest.raises(ParseError) as err:
        load(path)
    assert err.value.line == 2


def test_load_malformed_json(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(ParseError, match="line 1"):
        load(path)


def test_dataset_is_immutable():
    data = _tabular([(0, 0, 1.0, 0)], 1, 1)
    with pytest.raises(ValueError):
        data.r[0] = 2.0


def test_dataset_validates_indices_and_rewards():
    with pytest.raises(InvalidInputError):
        _tabular([(0, 0, 1.0, 5)], 2, 1)
    with pytest.raises(InvalidInputError):
        _tabular([(0, 0, float("nan"), 0)], 1, 1)
