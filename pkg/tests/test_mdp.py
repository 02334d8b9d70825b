from __future__ import annotations

import numpy as np
import pytest

from estop_lab import (
    ConvergenceError,
    DiscountedEpisodic,
    FiniteHorizon,
    TabularMdp,
    TabularPolicy,
    average_state_distribution,
    policy_value,
    random_mdp,
    rollout,
    state_distribution,
    state_distribution_series,
    value_iteration,
)
from estop_lab.mdp import discounted_state_values, policy_step_matrices
from estop_lab.testing import (
    enumerate_deterministic_policies,
    mc_state_frequencies,
    random_stochastic_policy,
    simulate_episodes,
)

from conftest import make_chain_a, monte_carlo_tolerance


class TestValidation:
    def test_row_sum_must_be_one(self):
        with pytest.raises(ValueError, match=r"row \(s=0, a=0\)"):
            TabularMdp(2, 1, 2, [1, 0], [(0, 0, 1, 0.5, 0.0), (1, 0, 1, 1.0, 0.0)])

    def test_reward_range(self):
        with pytest.raises(ValueError, match="reward"):
            TabularMdp(2, 1, 2, [1, 0], [(0, 0, 1, 1.0, 1.5), (1, 0, 1, 1.0, 0.0)])
        with pytest.raises(ValueError, match="reward"):
            TabularMdp(2, 1, 2, [1, 0], [(0, 0, 1, 1.0, -0.1), (1, 0, 1, 1.0, 0.0)])

    def test_rho0_checks(self):
        with pytest.raises(ValueError, match="rho0"):
            TabularMdp(2, 1, 2, [0.7, 0.2], [(0, 0, 1, 1.0, 0.0), (1, 0, 1, 1.0, 0.0)])
        with pytest.raises(ValueError, match="negative"):
            TabularMdp(2, 1, 2, [1.5, -0.5], [(0, 0, 1, 1.0, 0.0), (1, 0, 1, 1.0, 0.0)])

    def test_duplicate_entries_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            TabularMdp(2, 1, 2, [1, 0], [(0, 0, 1, 0.5, 0.0), (0, 0, 1, 0.5, 0.0), (1, 0, 1, 1.0, 0.0)])

    def test_terminal_state_contract(self):
        with pytest.raises(ValueError, match="terminal"):
            TabularMdp(
                2, 1, 2, [1, 0],
                [(0, 0, 1, 1.0, 1.0), (1, 0, 0, 1.0, 0.0)],
                terminal_states=[1],
            )
        with pytest.raises(ValueError, match="terminal"):
            TabularMdp(
                2, 1, 2, [1, 0],
                [(0, 0, 1, 1.0, 1.0), (1, 0, 1, 1.0, 1.0)],
                terminal_states=[1],
            )

    def test_policy_distribution_checks(self):
        with pytest.raises(ValueError, match="sum to 1"):
            TabularPolicy(np.array([[0.5, 0.4], [0.5, 0.5]]))
        with pytest.raises(ValueError, match="nonnegative"):
            TabularPolicy(np.array([[1.5, -0.5], [0.5, 0.5]]))

    def test_dimension_mismatch_raises(self, chain_a):
        wrong = TabularPolicy.uniform(3, 1)
        with pytest.raises(ValueError, match="policy"):
            state_distribution(chain_a, wrong, 1)


class TestStateDistribution:
    def test_t0_is_rho0(self):
        mdp = random_mdp(5, 2, 6, sparsity=3, rng=7)
        policy = random_stochastic_policy(3, mdp)
        assert np.array_equal(state_distribution(mdp, policy, 0), mdp.rho0)

    def test_chain_deterministic_step(self, chain_a, chain_policy):
        assert np.allclose(state_distribution(chain_a, chain_policy, 1), [0.0, 1.0], atol=1e-15)

    def test_sums_to_one_for_all_t(self):
        mdp = random_mdp(6, 3, 8, sparsity=3, rng=11)
        policy = random_stochastic_policy(5, mdp)
        series = state_distribution_series(mdp, policy, mdp.horizon)
        assert np.allclose(series.sum(axis=1), 1.0, atol=1e-10)

    def test_matches_monte_carlo_frequencies(self):
        # oracle: empirical occupancy of s_3 over one million simulated episodes
        mdp = random_mdp(5, 2, 5, sparsity=3, rng=2)
        policy = random_stochastic_policy(9, mdp)
        exact = state_distribution(mdp, policy, 3)
        n = 1_000_000
        freq = mc_state_frequencies(mdp, policy, 3, n, rng=123)
        assert np.all(np.abs(freq - exact) <= monte_carlo_tolerance(freq, n, 3.5))


class TestAverageStateDistribution:
    def test_chain_a(self, chain_a, chain_policy):
        assert np.allclose(average_state_distribution(chain_a, chain_policy), [0.5, 0.5], atol=1e-15)

    def test_horizon_one_is_rho0(self):
        mdp = random_mdp(4, 2, 1, sparsity=2, rng=5)
        policy = random_stochastic_policy(1, mdp)
        assert np.array_equal(average_state_distribution(mdp, policy), mdp.rho0)

    def test_composes_from_per_step_distributions(self):
        mdp = random_mdp(5, 2, 6, sparsity=3, rng=21)
        policy = random_stochastic_policy(22, mdp)
        per_t = [state_distribution(mdp, policy, t) for t in range(mdp.horizon)]
        assert np.allclose(average_state_distribution(mdp, policy), np.mean(per_t, axis=0), atol=1e-12)


class TestPolicyValue:
    def test_chain_a_finite_horizon(self, chain_a, chain_policy):
        assert policy_value(chain_a, chain_policy, FiniteHorizon()) == pytest.approx(1.0, abs=1e-12)

    def test_zero_rewards_give_zero(self):
        mdp = TabularMdp(2, 1, 3, [1, 0], [(0, 0, 1, 1.0, 0.0), (1, 0, 0, 1.0, 0.0)])
        policy = TabularPolicy.uniform(2, 1)
        assert policy_value(mdp, policy, FiniteHorizon()) == 0.0
        assert policy_value(mdp, policy, DiscountedEpisodic(0.9)) == 0.0

    def test_finite_horizon_matches_monte_carlo(self):
        mdp = random_mdp(6, 2, 5, sparsity=3, rng=31)
        policy = random_stochastic_policy(32, mdp)
        exact = policy_value(mdp, policy, FiniteHorizon())
        n = 1_000_000
        sim = simulate_episodes(mdp, policy, n, rng=33)
        se = sim["returns"].std(ddof=1) / np.sqrt(n)
        assert abs(sim["returns"].mean() - exact) <= 3 * se + 1e-9

    def test_discounted_matches_linear_solve_oracle(self):
        # oracle: closed-form policy evaluation via a dense linear solve
        mdp = random_mdp(6, 3, 10, sparsity=4, rng=41)
        policy = random_stochastic_policy(42, mdp)
        gamma = 0.9
        chain, step_reward = policy_step_matrices(mdp, policy)
        v_solve = np.linalg.solve(np.eye(mdp.n_states) - gamma * chain, step_reward)
        mode = DiscountedEpisodic(gamma, tol=1e-10)
        assert np.allclose(discounted_state_values(mdp, policy, mode), v_solve, atol=1e-8)
        assert policy_value(mdp, policy, mode) == pytest.approx(float(mdp.rho0 @ v_solve), abs=1e-8)

    def test_non_convergence_reports_residual(self):
        mdp = random_mdp(4, 2, 5, sparsity=2, rng=51)
        policy = random_stochastic_policy(52, mdp)
        with pytest.raises(ConvergenceError) as exc_info:
            policy_value(mdp, policy, DiscountedEpisodic(0.999, tol=1e-12, max_sweeps=3))
        assert exc_info.value.residual > 0
        assert exc_info.value.sweeps == 3


class TestRollout:
    def test_chain_a_trajectory(self, chain_a, chain_policy):
        traj = rollout(chain_a, chain_policy, 0)
        assert traj.states == [0, 1, 1]
        assert traj.rewards == [1.0, 0.0]
        assert traj.termination_cause == "horizon"
        assert not traj.terminated_early

    def test_horizon_one_single_step(self):
        mdp = random_mdp(3, 2, 1, sparsity=2, rng=61)
        traj = rollout(mdp, random_stochastic_policy(62, mdp), 7)
        assert len(traj) == 1

    def test_seed_determinism(self):
        mdp = random_mdp(6, 3, 12, sparsity=3, rng=71)
        policy = random_stochastic_policy(72, mdp)
        assert rollout(mdp, policy, 99) == rollout(mdp, policy, 99)

    def test_stops_at_terminal_state(self):
        mdp = TabularMdp(
            2, 1, 5, [1, 0],
            [(0, 0, 1, 1.0, 1.0), (1, 0, 1, 1.0, 0.0)],
            terminal_states=[1],
        )
        traj = rollout(mdp, TabularPolicy.uniform(2, 1), 0)
        assert len(traj) == 1
        assert traj.terminated_early
        assert traj.termination_cause == "terminal_state"

    def test_rewards_stay_in_unit_interval(self):
        for seed in range(5):
            mdp = random_mdp(5, 2, 8, sparsity=3, rng=100 + seed)
            policy = random_stochastic_policy(200 + seed, mdp)
            traj = rollout(mdp, policy, seed)
            assert all(0.0 <= r <= 1.0 for r in traj.rewards)


class TestValueIteration:
    def test_chain_a_finite_horizon_values(self, chain_a):
        result = value_iteration(chain_a, FiniteHorizon())
        assert np.allclose(result.values[0], [1.0, 0.0], atol=1e-15)
        assert result.sweeps == 2
        assert result.policy.time_dependent

    def test_flop_accounting_rule(self):
        # 10 sweeps on |S|=64, |A|=4 cost 4 * 64^2 * 4 FLOPs apiece
        assert 10 * (4 * 64 * 64 * 4) == 655_360
        mdp = random_mdp(8, 2, 4, sparsity=3, rng=81)
        result = value_iteration(mdp, DiscountedEpisodic(0.9))
        assert result.flop_count == result.sweeps * 4 * 8 * 8 * 2

    def test_matches_brute_force_policy_enumeration(self):
        # oracle: exhaustive search over all deterministic stationary policies
        mdp = random_mdp(6, 3, 4, sparsity=3, rng=91)
        mode = DiscountedEpisodic(0.9, tol=1e-9)
        result = value_iteration(mdp, mode, tol=1e-9)
        vi_value = float(mdp.rho0 @ result.values)
        best = -np.inf
        for actions in enumerate_deterministic_policies(6, 3):
            value = policy_value(mdp, TabularPolicy.deterministic(actions, 3), mode)
            best = max(best, value)
        assert vi_value >= best - 1e-6
        greedy_value = policy_value(mdp, result.policy, mode)
        assert greedy_value == pytest.approx(best, abs=1e-6)

    def test_tie_break_prefers_lowest_action(self):
        mdp = TabularMdp(
            1, 3, 3, [1.0],
            [(0, 0, 0, 1.0, 0.5), (0, 1, 0, 1.0, 0.5), (0, 2, 0, 1.0, 0.5)],
        )
        result = value_iteration(mdp, DiscountedEpisodic(0.5))
        assert np.argmax(result.policy.probs[0]) == 0
