import numpy as np
import pytest

from vipolab.envs import LinearRegulator, collect_continuous, evaluate_return, noisy_linear_policy


def test_reward_and_clipped_step():
    env = LinearRegulator(noise=0.0)
    s, a = np.array([[1.0], [2.9]]), np.array([[-0.5], [3.0]])
    r, s_next = env.step(s, a, np.random.default_rng(0))
    np.testing.assert_allclose(r, [-(1.0 + 0.1 * 0.25), -(2.9 ** 2 + 0.1)])
    np.testing.assert_allclose(s_next, [[0.5], [3.0]])


def test_collection_shape_and_order():
    env = LinearRegulator()
    data = collect_continuous(env, noisy_linear_policy(0.5, 0.3), 3, 4, seed=1)
    assert len(data) == 12 and data.s.shape == (12, 1)
    # episode-major: each row's successor is the next row's state within an episode
    for ep in range(3):
        rows = slice(4 * ep, 4 * ep + 3)
        np.testing.assert_array_equal(data.s_next[rows], data.s[4 * ep + 1:4 * ep + 4])
    assert not data.done.any()


def test_empty_collection():
    assert len(collect_continuous(LinearRegulator(), noisy_linear_policy(0.5, 0.3), 0, 4, seed=0)) == 0


def test_collection_is_seeded():
    env, pol = LinearRegulator(), noisy_linear_policy(0.5, 0.3)
    assert collect_continuous(env, pol, 2, 5, seed=3) == collect_continuous(env, pol, 2, 5, seed=3)


def test_zero_start_zero_action_return():
    env = LinearRegulator(noise=0.0, start_range=0.0)
    assert evaluate_return(env, noisy_linear_policy(1.0, 0.0), n_episodes=3, horizon=10) == 0.0


def test_stabilising_gain_beats_doing_nothing():
    env = LinearRegulator()
    good = evaluate_return(env, noisy_linear_policy(0.8, 0.0))
    idle = evaluate_return(env, noisy_linear_policy(0.0, 0.0))
    assert good > idle


def test_policy_actions_are_clipped():
    act = noisy_linear_policy(10.0, 0.0, scale=0.5)
    np.testing.assert_array_equal(act(np.array([[1.0], [-1.0]]), np.random.default_rng(0)), [[-0.5], [0.5]])


@pytest.mark.parametrize("n", [1, 50])
def test_return_is_bounded_by_worst_case(n):
    env = LinearRegulator()
    worst = -(env.state_bound ** 2 + env.action_cost * env.action_scale ** 2) / (1 - env.gamma)
    assert worst <= evaluate_return(env, noisy_linear_policy(0.5, 0.3), n_episodes=n, deterministic=False) <= 0
