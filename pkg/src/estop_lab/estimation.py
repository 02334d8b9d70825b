"""Visitation statistics from demonstrations and their exact counterparts.

Visitation quantities use the episode window t = 0..H-1 (the states an agent
occupies when it acts), matching the average state distribution. Demos that
end early because a terminal state was reached are padded as remaining in
that terminal state, which fills the same window.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import TabularMdp, TabularPolicy, Trajectory, policy_step_matrices
from .support import EStopMdp, StateSet, build_estop_mdp, rho0_support

DemoSet = Sequence[Trajectory]


@dataclass(frozen=True)
class VisitStats:
    """Empirical visitation summaries over n rollouts.

    h_hat[s]: fraction of rollouts that visit s within the episode window.
    rho_hat[s]: average visit frequency, (1/(nH)) sum_i sum_t I{tau_t = s}.
    varrho[i, s]: per-rollout visit fraction of state s.
    sample_variance[s]: unbiased sample variance of varrho[:, s] (zero when
    n < 2, flagged by `variance_defined`).
    full_horizon: True when every demo ran the full window without early
    termination, as the variance-based confidence bound requires.
    """

    n: int
    horizon: int
    h_hat: np.ndarray
    rho_hat: np.ndarray
    varrho: np.ndarray
    sample_variance: np.ndarray
    full_horizon: bool
    variance_defined: bool

    @property
    def n_states(self) -> int:
        return self.h_hat.shape[0]


def _window_states(traj: Trajectory, horizon: int) -> list[int]:
    """States occupied at t = 0..H-1, padding early-terminated demos with the
    terminal landing state."""
    states = [step.state for step in traj.steps]
    if len(states) > horizon:
        raise ValueError(f"demo has {len(states)} steps, longer than the horizon {horizon}")
    if len(states) < horizon:
        if not traj.steps:
            raise ValueError("cannot pad an empty demo")
        states = states + [traj.steps[-1].next_state] * (horizon - len(states))
    return states


def estimate_visit_stats(demos: DemoSet, horizon: int, n_states: int) -> VisitStats:
    """Exact empirical visitation formulas over the demo set."""
    n = len(demos)
    if n == 0:
        raise ValueError("need at least one demonstration")
    counts = np.zeros((n, n_states))
    hit = np.zeros((n, n_states), dtype=bool)
    full = True
    for i, traj in enumerate(demos):
        if len(traj.steps) < horizon:
            full = False
        for s in _window_states(traj, horizon):
            counts[i, s] += 1.0
            hit[i, s] = True
    varrho = counts / horizon
    h_hat = hit.mean(axis=0)
    rho_hat = varrho.mean(axis=0)
    variance_defined = n >= 2
    sample_variance = varrho.var(axis=0, ddof=1) if variance_defined else np.zeros(n_states)
    return VisitStats(
        n=n,
        horizon=horizon,
        h_hat=h_hat,
        rho_hat=rho_hat,
        varrho=varrho,
        sample_variance=sample_variance,
        full_horizon=full,
        variance_defined=variance_defined,
    )


def exact_hitting_probabilities(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """h[s] = probability that a rollout occupies s at some t in 0..H-1.

    For each target the policy-induced chain is modified to absorb at that
    state and the initial distribution is propagated across the window; the
    mass sitting at the target afterwards is the hitting probability.
    """
    S = mdp.n_states
    steps = mdp.horizon - 1
    stationary = not policy.time_dependent
    chains = None
    if stationary:
        chains = [policy_step_matrices(mdp, policy)[0]] * steps
    else:
        chains = [policy_step_matrices(mdp, policy, t)[0] for t in range(steps)]
    h = np.zeros(S)
    for target in range(S):
        q = mdp.rho0.copy()
        for chain in chains:
            absorbed = q[target]
            q = q @ chain
            q -= absorbed * chain[target]
            q[target] += absorbed
        h[target] = q[target]
    return h


def build_support_by_budget(
    scores: np.ndarray,
    budget: float,
    protect: frozenset[int] | set[int] = frozenset(),
) -> StateSet:
    """Greedily drop states in increasing score order (ties to the lower
    index), skipping protected states, while the total removed score stays
    within the budget; returns the kept set."""
    scores = np.asarray(scores, dtype=float)
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    if np.any(scores < 0):
        raise ValueError("scores must be nonnegative")
    order = np.lexsort((np.arange(scores.shape[0]), scores))
    kept = set(range(scores.shape[0]))
    removed_mass = 0.0
    for s in order:
        s = int(s)
        if s in protect:
            continue
        if removed_mass + scores[s] > budget:
            break
        removed_mass += scores[s]
        kept.discard(s)
    return StateSet(kept)


def build_support_by_fraction(
    scores: np.ndarray,
    fraction: float,
    protect: frozenset[int] | set[int] = frozenset(),
) -> StateSet:
    """Drop the floor(fraction * S) lowest-scoring states (ties to the lower
    index), skipping protected states."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[0]
    target = int(np.floor(fraction * n))
    order = np.lexsort((np.arange(n), scores))
    kept = set(range(n))
    removed = 0
    for s in order:
        if removed >= target:
            break
        s = int(s)
        if s in protect:
            continue
        kept.discard(s)
        removed += 1
    return StateSet(kept)


def learned_estop(mdp: TabularMdp, demos: DemoSet, budget: float) -> EStopMdp:
    """Demonstrations -> hitting estimates -> budgeted support -> e-stop MDP."""
    stats = estimate_visit_stats(demos, mdp.horizon, mdp.n_states)
    support = build_support_by_budget(stats.h_hat, budget, protect=rho0_support(mdp))
    return build_estop_mdp(mdp, support)
