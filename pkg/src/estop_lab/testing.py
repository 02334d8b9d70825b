"""Randomized instances and vectorized Monte-Carlo oracles.

These back the certification sweeps and the simulation-versus-exact checks;
they deliberately avoid the exact propagation code paths they are used to
validate (visits are counted from sampled episodes only).
"""
from __future__ import annotations

from itertools import product
from typing import Iterator

import numpy as np

from .bounds import certify_imperfect, certify_perfect, certify_stationary
from .envs import random_mdp
from .mdp import TabularMdp, TabularPolicy, as_generator
from .support import StateSet, rho0_support


def random_instance(
    rng: int | np.random.Generator,
    max_states: int = 6,
    max_actions: int = 3,
    max_horizon: int = 5,
) -> TabularMdp:
    gen = as_generator(rng)
    n_states = int(gen.integers(2, max_states + 1))
    n_actions = int(gen.integers(1, max_actions + 1))
    horizon = int(gen.integers(1, max_horizon + 1))
    sparsity = int(gen.integers(1, n_states + 1))
    n_start = int(gen.integers(1, min(2, n_states) + 1))
    return random_mdp(n_states, n_actions, horizon, sparsity, gen, n_start_states=n_start)


def random_stochastic_policy(rng: int | np.random.Generator, mdp: TabularMdp) -> TabularPolicy:
    gen = as_generator(rng)
    return TabularPolicy(gen.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states))


def random_support(rng: int | np.random.Generator, mdp: TabularMdp) -> StateSet:
    """Random kept set always covering the initial distribution."""
    gen = as_generator(rng)
    keep_prob = gen.uniform(0.2, 0.9)
    kept = set(rho0_support(mdp))
    for s in range(mdp.n_states):
        if gen.random() < keep_prob:
            kept.add(s)
    return StateSet(kept)


def random_certification_sweep(
    n_instances: int,
    seed: int,
    max_states: int = 6,
    max_actions: int = 3,
    max_horizon: int = 5,
) -> tuple[list[str], int]:
    """Certify every theorem on random (MDP, expert, support) triples.

    Returns (failure descriptions, total certificates checked).
    """
    gen = as_generator(seed)
    failures: list[str] = []
    total = 0
    for i in range(n_instances):
        mdp = random_instance(gen, max_states, max_actions, max_horizon)
        expert = random_stochastic_policy(gen, mdp)
        support = random_support(gen, mdp)
        certs = [
            certify_perfect(mdp, expert),
            certify_imperfect(mdp, expert, support),
            certify_stationary(mdp, expert, support),
        ]
        total += len(certs)
        for cert in certs:
            if not cert.holds:
                failures.append(
                    f"instance={i} theorem={cert.theorem_id} gap={cert.gap:.12f} bound={cert.bound_value:.12f}"
                )
        if certs[2].bound_value < certs[1].bound_value - 1e-9:
            failures.append(f"instance={i} ordering: stationary bound below hitting bound")
    return failures, total


# -- vectorized Monte-Carlo simulation ---------------------------------------


def _batched_categorical(cumulative_rows: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Per-row inverse-CDF draw: index where the row's cumulative first
    exceeds the uniform."""
    idx = (cumulative_rows <= uniforms[:, None]).sum(axis=1)
    return np.minimum(idx, cumulative_rows.shape[1] - 1)


def simulate_episodes(
    mdp: TabularMdp,
    policy: TabularPolicy,
    n_rollouts: int,
    rng: int | np.random.Generator,
    discount: float = 1.0,
) -> dict[str, np.ndarray]:
    """Simulate n rollouts in parallel for the full horizon.

    Terminal states self-loop with zero reward, so running every episode to
    the horizon reproduces both early-stopped returns and the padded
    window-visitation accounting. Returns a dict with:
      states: (n, H + 1) visited states;
      returns: (n,) discounted episode returns;
      visited: (n, S) whether each state was occupied at some t < H.
    """
    gen = as_generator(rng)
    S, H = mdp.n_states, mdp.horizon
    cum_p, _ = mdp._cumulative_tables()
    rho_cum = np.cumsum(mdp.rho0)
    states = np.empty((n_rollouts, H + 1), dtype=np.int64)
    states[:, 0] = np.minimum((rho_cum <= gen.random(n_rollouts)[:, None]).sum(axis=1), S - 1)
    returns = np.zeros(n_rollouts)
    visited = np.zeros((n_rollouts, S), dtype=bool)
    rows = np.arange(n_rollouts)
    for t in range(H):
        cur = states[:, t]
        visited[rows, cur] = True
        action_cum = np.cumsum(policy.action_probs(t), axis=1)[cur]
        actions = _batched_categorical(action_cum, gen.random(n_rollouts))
        nxt = _batched_categorical(cum_p[cur, actions], gen.random(n_rollouts))
        returns += (discount**t) * mdp.R[cur, actions, nxt]
        states[:, t + 1] = nxt
    return {"states": states, "returns": returns, "visited": visited}


def mc_hitting_probabilities(
    mdp: TabularMdp, policy: TabularPolicy, n_rollouts: int, rng: int | np.random.Generator
) -> np.ndarray:
    """Fraction of simulated episodes that occupy each state within the window."""
    sim = simulate_episodes(mdp, policy, n_rollouts, rng)
    return sim["visited"].mean(axis=0)


def mc_state_frequencies(
    mdp: TabularMdp, policy: TabularPolicy, t: int, n_rollouts: int, rng: int | np.random.Generator
) -> np.ndarray:
    """Empirical distribution of s_t over simulated episodes."""
    sim = simulate_episodes(mdp, policy, n_rollouts, rng)
    return np.bincount(sim["states"][:, t], minlength=mdp.n_states) / n_rollouts


def enumerate_deterministic_policies(n_states: int, n_actions: int) -> Iterator[np.ndarray]:
    """All stationary deterministic action tables (use only on tiny instances)."""
    for assignment in product(range(n_actions), repeat=n_states):
        yield np.array(assignment, dtype=int)
