"""Executable sub-optimality bounds: exact certificates on tabular instances,
confidence bounds from demonstration statistics, and the covering lemmas.

Certificates are computed with exact dynamic programming, never sampled
values, so `holds` is a hard assertion up to float tolerance. The theory
treats an episode as its window of H occupied states (t = 0..H-1) with the
H-1 rewards collected between them; visitation quantities (hitting
probabilities, the average state distribution) range over that same window,
which keeps the union-bound chain h(s) <= H * rho(s) exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estimation import VisitStats, exact_hitting_probabilities
from .mdp import (
    TabularMdp,
    TabularPolicy,
    average_state_distribution,
    finite_horizon_state_values,
    value_iteration,
    FiniteHorizon,
)
from .support import EStopMdp, StateSet, build_estop_mdp

CERT_TOL = 1e-9


@dataclass(frozen=True)
class GapCertificate:
    """One certified instance of a sub-optimality bound.

    j_estop_opt is the e-stop optimum's value re-evaluated in the base MDP;
    j_estop_opt_in_estop is its value inside the transformed MDP (the two
    coincide for policies that never leave the kept set).
    """

    theorem_id: str
    j_expert: float
    j_estop_opt: float
    j_estop_opt_in_estop: float
    bound_value: float
    holds: bool

    @property
    def gap(self) -> float:
        return self.j_expert - self.j_estop_opt


def episode_window(mdp: TabularMdp) -> int:
    """Number of reward steps inside the theory window (H - 1)."""
    return max(mdp.horizon - 1, 0)


def window_value(mdp: TabularMdp, policy: TabularPolicy, window: int | None = None) -> float:
    """Expected reward collected across the episode window."""
    window = episode_window(mdp) if window is None else window
    values = finite_horizon_state_values(mdp, policy, horizon=window)
    return float(mdp.rho0 @ values[0])


def window_optimal(mdp: TabularMdp, window: int | None = None) -> tuple[float, TabularPolicy]:
    """Optimal window value and a deterministic policy achieving it (backward
    induction, ties to the lowest action index)."""
    window = episode_window(mdp) if window is None else window
    S, A = mdp.n_states, mdp.n_actions
    if window == 0:
        return 0.0, TabularPolicy.uniform(S, A)
    values = np.zeros(S)
    actions = np.zeros((window, S), dtype=int)
    for t in range(window - 1, -1, -1):
        q = mdp.expected_rewards + np.einsum("saz,z->sa", mdp.P, values)
        actions[t] = np.argmax(q, axis=1)
        values = np.take_along_axis(q, actions[t][:, None], axis=1)[:, 0]
    return float(mdp.rho0 @ values), TabularPolicy.deterministic(actions, A)


def _certificate(
    theorem_id: str,
    mdp: TabularMdp,
    expert_policy: TabularPolicy,
    estop: EStopMdp,
    bound_value: float,
) -> GapCertificate:
    window = episode_window(mdp)
    j_expert = window_value(mdp, expert_policy, window)
    j_in_estop, opt_policy = window_optimal(estop.mdp, window)
    j_in_base = window_value(mdp, estop.restrict_policy(opt_policy), window)
    holds = (j_expert - j_in_base) <= bound_value + CERT_TOL
    return GapCertificate(
        theorem_id=theorem_id,
        j_expert=j_expert,
        j_estop_opt=j_in_base,
        j_estop_opt_in_estop=j_in_estop,
        bound_value=float(bound_value),
        holds=bool(holds),
    )


def certify_perfect(mdp: TabularMdp, expert_policy: TabularPolicy) -> GapCertificate:
    """Keep exactly the states the expert can hit; the e-stop optimum must
    then match or beat the expert (bound 0)."""
    h = exact_hitting_probabilities(mdp, expert_policy)
    support = StateSet(np.nonzero(h > 0)[0])
    estop = build_estop_mdp(mdp, support)
    return _certificate("perfect-support", mdp, expert_policy, estop, bound_value=0.0)


def certify_imperfect(mdp: TabularMdp, expert_policy: TabularPolicy, support: StateSet) -> GapCertificate:
    """Gap bound H * sum of the expert's hitting probabilities of removed states."""
    h = exact_hitting_probabilities(mdp, expert_policy)
    removed = np.array([s for s in range(mdp.n_states) if s not in support.kept_states], dtype=int)
    bound = mdp.horizon * float(h[removed].sum()) if removed.size else 0.0
    estop = build_estop_mdp(mdp, support)
    return _certificate("imperfect-hitting", mdp, expert_policy, estop, bound_value=bound)


def certify_stationary(mdp: TabularMdp, expert_policy: TabularPolicy, support: StateSet) -> GapCertificate:
    """Gap bound H^2 * average-state-distribution mass of the removed states."""
    rho = average_state_distribution(mdp, expert_policy)
    removed = np.array([s for s in range(mdp.n_states) if s not in support.kept_states], dtype=int)
    bound = mdp.horizon**2 * float(rho[removed].sum()) if removed.size else 0.0
    estop = build_estop_mdp(mdp, support)
    return _certificate("stationary-distribution", mdp, expert_policy, estop, bound_value=bound)


def hoeffding_guarantee(
    n: int,
    n_states: int,
    budget: float,
    eps: float,
    horizon: int | None = None,
) -> tuple[float, float]:
    """(gap_bound, failure_prob) for the budgeted empirical support build.

    failure_prob = min(1, |S| * exp(-2 eps^2 n / |S|^2)) bounds the chance the
    removed true hitting mass exceeds budget + eps. The gap bound is the
    per-horizon coefficient (budget + eps), multiplied by the horizon when one
    is supplied.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if n_states < 1:
        raise ValueError("n_states must be positive")
    failure = min(1.0, n_states * math.exp(-2.0 * eps**2 * n / n_states**2))
    coefficient = budget + eps
    gap_bound = coefficient * horizon if horizon is not None else coefficient
    return float(gap_bound), float(failure)


def bernstein_guarantee(stats: VisitStats, budget: float, delta: float, horizon: int) -> float:
    """Gap bound for the occupancy-budget support build, using the empirical
    variance of the per-rollout visit fractions:

        (budget + sqrt(2 log(2|S|/delta) / n) * sum_s sqrt(V_n(varrho(s)))
                + 7 |S| log(2|S|/delta) / (3 (n - 1))) * H^2
    """
    if stats.n < 2:
        raise ValueError("sample variance undefined for fewer than two rollouts")
    if not stats.full_horizon:
        raise ValueError("variance-based bound requires every demo to run the full horizon")
    if delta <= 0:
        raise ValueError("delta must be positive")
    log_term = math.log(2.0 * stats.n_states / delta)
    width = math.sqrt(2.0 * log_term / stats.n) * float(np.sqrt(stats.sample_variance).sum())
    width += 7.0 * stats.n_states * log_term / (3.0 * (stats.n - 1))
    return (budget + width) * horizon**2


def cumulative_training_reward(episode_end_steps: np.ndarray, episode_returns: np.ndarray, t: int) -> float:
    """Total logged reward of episodes finishing within the first t steps."""
    episode_end_steps = np.asarray(episode_end_steps)
    episode_returns = np.asarray(episode_returns)
    if episode_end_steps.size == 0 or episode_end_steps[-1] < t:
        raise ValueError(f"training log covers {0 if episode_end_steps.size == 0 else int(episode_end_steps[-1])} steps, fewer than {t}")
    mask = episode_end_steps <= t
    return float(episode_returns[mask].sum())


def regret_decomposition(
    mdp: TabularMdp,
    estop: EStopMdp,
    episode_end_steps: np.ndarray,
    episode_returns: np.ndarray,
    total_steps: int,
) -> tuple[float, float]:
    """Split the T-step regret into its two certified pieces.

    asymptotic_term: ceil(T/H) times the exact optimality gap introduced by
    the transformation (both optima computed by finite-horizon value
    iteration, the e-stop optimum re-evaluated in the base MDP).
    learning_term: expected reward of replaying the e-stop optimum for T
    steps minus the learner's logged cumulative training reward.
    """
    episodes = math.ceil(total_steps / mdp.horizon)
    j_star = float(mdp.rho0 @ value_iteration(mdp, FiniteHorizon()).values[0])
    vi_hat = value_iteration(estop.mdp, FiniteHorizon())
    j_hat_in_estop = float(estop.mdp.rho0 @ vi_hat.values[0])
    restricted = estop.restrict_policy(vi_hat.policy)
    j_hat_in_base = float(mdp.rho0 @ finite_horizon_state_values(mdp, restricted)[0])
    asymptotic_term = episodes * (j_star - j_hat_in_base)
    learning_term = episodes * j_hat_in_estop - cumulative_training_reward(
        episode_end_steps, episode_returns, total_steps
    )
    return float(asymptotic_term), float(learning_term)


def _signed_inclusion_exclusion(log_magnitudes: list[float], signs: list[float]) -> float:
    """Sum of signed exp(log_magnitudes) with the common scale factored out."""
    finite = [lm for lm in log_magnitudes if lm != -math.inf]
    if not finite:
        return 0.0
    top = max(finite)
    total = math.fsum(s * math.exp(lm - top) for lm, s in zip(log_magnitudes, signs))
    return total * math.exp(top)


def coupon_probability(m: int, n: int) -> float:
    """Probability that n uniform draws with replacement from m equally likely
    events produce every event at least once (full inclusion-exclusion sum).

    The alternating sum is exact integer arithmetic
    (sum_k (-1)^k C(m,k) (m-k)^n over m^n) whenever the integers stay small
    enough to be cheap; otherwise compensated floating-point summation, with
    logarithm-domain magnitudes once binomial coefficients would overflow.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n < m:
        return 0.0
    if n * math.log10(m) <= 5000:
        numerator = sum((-1) ** k * math.comb(m, k) * (m - k) ** n for k in range(m + 1))
        return min(max(numerator / m**n, 0.0), 1.0)
    if m <= 60:
        total = math.fsum(
            (-1.0) ** k * math.comb(m, k) * (1.0 - k / m) ** n for k in range(m + 1)
        )
    else:
        # logarithm-domain magnitudes avoid overflowing binomial coefficients
        logs, signs = [], []
        for k in range(m + 1):
            base = 1.0 - k / m
            if base <= 0.0:
                lm = -math.inf if n > 0 else _log_comb(m, k)
            else:
                lm = _log_comb(m, k) + n * math.log(base)
            logs.append(lm)
            signs.append((-1.0) ** k)
        total = _signed_inclusion_exclusion(logs, signs)
    return min(max(total, 0.0), 1.0)


def _log_comb(m: int, k: int) -> float:
    return math.lgamma(m + 1) - math.lgamma(k + 1) - math.lgamma(m - k + 1)


def cover_probability(m: int, epsilon_d: float, n: int) -> float:
    """Probability that n samples delta-cover all m support states when each
    is sampled with probability epsilon_d per draw; terms with k * epsilon_d
    beyond 1 contribute nothing. Equals coupon_probability(m, n) at
    epsilon_d = 1/m."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if n < 0:
        raise ValueError("n must be nonnegative")
    if not 0.0 < epsilon_d <= 1.0:
        raise ValueError("epsilon_d must lie in (0, 1]")
    if m <= 60:
        total = math.fsum(
            (-1.0) ** k * math.comb(m, k) * max(1.0 - k * epsilon_d, 0.0) ** n
            for k in range(m + 1)
        )
    else:
        logs, signs = [], []
        for k in range(m + 1):
            base = max(1.0 - k * epsilon_d, 0.0)
            if base == 0.0:
                lm = -math.inf if n > 0 else _log_comb(m, k)
            else:
                lm = _log_comb(m, k) + n * math.log(base)
            logs.append(lm)
            signs.append((-1.0) ** k)
        total = _signed_inclusion_exclusion(logs, signs)
    return min(max(total, 0.0), 1.0)
