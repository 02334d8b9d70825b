from __future__ import annotations

import numpy as np
import pytest

from estop_lab import TabularMdp, TabularPolicy


def make_chain_a(horizon: int = 2) -> TabularMdp:
    """Two states: s0 -> s1 deterministically with reward 1, s1 absorbing with
    reward 0, start at s0."""
    return TabularMdp(
        n_states=2,
        n_actions=1,
        horizon=horizon,
        rho0=[1.0, 0.0],
        transitions=[(0, 0, 1, 1.0, 1.0), (1, 0, 1, 1.0, 0.0)],
    )


def make_two_armed_bandit() -> TabularMdp:
    """One state, two actions with rewards 1 and 0, horizon 1."""
    return TabularMdp(
        n_states=1,
        n_actions=2,
        horizon=1,
        rho0=[1.0],
        transitions=[(0, 0, 0, 1.0, 1.0), (0, 1, 0, 1.0, 0.0)],
    )


@pytest.fixture
def chain_a() -> TabularMdp:
    return make_chain_a()


@pytest.fixture
def chain_policy(chain_a) -> TabularPolicy:
    return TabularPolicy.uniform(chain_a.n_states, chain_a.n_actions)


def monte_carlo_tolerance(p_hat: np.ndarray, n: int, n_sigma: float) -> np.ndarray:
    """n_sigma binomial standard errors with a floor for degenerate estimates."""
    se = np.sqrt(np.maximum(p_hat * (1.0 - p_hat), 1e-12) / n)
    return n_sigma * se + 1e-9
