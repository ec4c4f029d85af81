import numpy as np
import pytest

from vipolab.mdp import TabularMdp


def self_loop(reward=1.0, gamma=0.9):
    return TabularMdp(np.ones((1, 1, 1)), [[reward]], [1.0], gamma)


def two_state_chain(gamma=0.5):
    # s0 -> s1 -> s1, r = [1, 0]
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 1] = 1.0
    return TabularMdp(P, [[1.0], [0.0]], [1.0, 0.0], gamma)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
