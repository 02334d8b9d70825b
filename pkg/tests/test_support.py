from __future__ import annotations

import itertools

import numpy as np
import pytest

from estop_lab import (
    ContinuousBox,
    FiniteHorizon,
    StateSet,
    TabularMdp,
    TabularPolicy,
    TimeIndexedSets,
    VisitCountBudget,
    box_from_trajectories,
    build_estop_mdp,
    compact_estop_mdp,
    estop_rollout,
    estop_step_filter,
    filtered_rollout,
    policy_value,
    random_mdp,
    rollout,
    value_iteration,
)
from estop_lab.bounds import window_value
from estop_lab.estimation import exact_hitting_probabilities
from estop_lab.support import rho0_support, time_indexed_from_policy, visit_budget_from_demo_counts
from estop_lab.testing import enumerate_deterministic_policies, random_stochastic_policy, random_support

from conftest import make_chain_a


class TestBuildEstopMdp:
    def test_full_support_is_identity_plus_stub(self):
        mdp = random_mdp(5, 2, 6, sparsity=3, rng=1)
        estop = build_estop_mdp(mdp, StateSet(range(5)))
        assert estop.mdp.n_states == 6
        assert estop.term_index == 5
        kept_entries = [e for e in estop.mdp.transition_entries() if e[0] != 5]
        assert kept_entries == list(mdp.transition_entries())
        for policy_seed in range(3):
            policy = random_stochastic_policy(policy_seed, mdp)
            lifted = estop.lift_policy(policy)
            assert policy_value(estop.mdp, lifted, FiniteHorizon()) == pytest.approx(
                policy_value(mdp, policy, FiniteHorizon()), abs=1e-12
            )

    def test_chain_a_keep_start_only(self):
        chain = make_chain_a()
        estop = build_estop_mdp(chain, StateSet({0}))
        assert estop.mdp.successors(0, 0) == [(2, 1.0, 0.0)]
        lifted = estop.lift_policy(TabularPolicy.uniform(2, 1))
        assert policy_value(estop.mdp, lifted, FiniteHorizon()) == 0.0

    def test_rejects_support_missing_initial_states(self):
        mdp = random_mdp(4, 2, 3, sparsity=2, rng=3)
        start = next(iter(rho0_support(mdp)))
        with pytest.raises(ValueError, match="initial distribution"):
            build_estop_mdp(mdp, StateSet(set(range(4)) - {start}))

    def test_rows_stochastic_and_reward_mass_zeroed(self):
        for seed in range(8):
            mdp = random_mdp(6, 2, 5, sparsity=4, rng=20 + seed)
            support = random_support(seed, mdp)
            estop = build_estop_mdp(mdp, support)
            assert np.allclose(estop.mdp.P.sum(axis=2), 1.0, atol=1e-12)
            removed = set(range(6)) - support.kept_states
            for s, a, s2, p, r in estop.mdp.transition_entries():
                if s2 == estop.term_index or s2 in removed:
                    assert r == 0.0

    def test_pessimism_for_every_policy(self):
        # every deterministic policy is worth no more in the transform
        mdp = random_mdp(4, 2, 4, sparsity=3, rng=40)
        support = random_support(7, mdp)
        estop = build_estop_mdp(mdp, support)
        for actions in enumerate_deterministic_policies(4, 2):
            policy = TabularPolicy.deterministic(actions, 2)
            j_base = policy_value(mdp, policy, FiniteHorizon())
            j_estop = policy_value(estop.mdp, estop.lift_policy(policy), FiniteHorizon())
            assert j_estop <= j_base + 1e-12

    def test_expert_preservation_when_support_covers_hits(self):
        for seed in range(6):
            mdp = random_mdp(5, 2, 4, sparsity=2, rng=60 + seed)
            expert = random_stochastic_policy(70 + seed, mdp)
            h = exact_hitting_probabilities(mdp, expert)
            estop = build_estop_mdp(mdp, StateSet(np.nonzero(h > 0)[0]))
            j_base = window_value(mdp, expert)
            j_estop = window_value(estop.mdp, estop.lift_policy(expert))
            assert j_estop == pytest.approx(j_base, abs=1e-12)

    def test_monotone_value_in_nested_supports(self):
        mdp = random_mdp(6, 2, 5, sparsity=3, rng=80)
        start = rho0_support(mdp)
        order = [s for s in range(6) if s not in start]
        previous = -np.inf
        for keep_extra in range(len(order) + 1):
            kept = set(start) | set(order[:keep_extra])
            estop = build_estop_mdp(mdp, StateSet(kept))
            result = value_iteration(estop.mdp, FiniteHorizon())
            value = float(estop.mdp.rho0 @ result.values[0])
            assert value >= previous - 1e-12
            previous = value

    def test_compact_preserves_solution(self):
        mdp = random_mdp(7, 2, 6, sparsity=3, rng=90)
        support = random_support(13, mdp)
        estop = build_estop_mdp(mdp, support)
        compact = compact_estop_mdp(estop)
        assert compact.mdp.n_states == len(support.kept_states) + 1
        full = value_iteration(estop.mdp, FiniteHorizon())
        small = value_iteration(compact.mdp, FiniteHorizon())
        j_full = float(estop.mdp.rho0 @ full.values[0])
        j_small = float(compact.mdp.rho0 @ small.values[0])
        assert j_small == pytest.approx(j_full, abs=1e-12)


class TestStepFilter:
    def test_state_set_membership(self):
        support = StateSet({0, 2})
        assert not estop_step_filter(support, 0, 0)
        assert estop_step_filter(support, 3, 1)

    def test_time_indexed_uses_per_step_sets(self):
        support = TimeIndexedSets([{0}, {1}, {0, 1}])
        assert not estop_step_filter(support, 0, 0)
        assert estop_step_filter(support, 1, 0)
        with pytest.raises(ValueError, match="beyond"):
            estop_step_filter(support, 3, 0)

    def test_visit_budget_fires_on_second_visit(self):
        support = VisitCountBudget([1, 2])
        assert not estop_step_filter(support, 0, 0, visit_counts=[0, 0])
        assert estop_step_filter(support, 1, 0, visit_counts=[1, 0])

    def test_box_bound_violation(self):
        box = ContinuousBox([-1.0, -8.0], [1.0, 8.0])
        assert not estop_step_filter(box, 0, np.array([0.5, 1.0]))
        assert estop_step_filter(box, 0, np.array([0.5, 9.0]))


class TestFilteredRollout:
    def test_generous_budget_reproduces_plain_rollout(self):
        mdp = random_mdp(5, 2, 8, sparsity=3, rng=100)
        policy = random_stochastic_policy(101, mdp)
        budget = VisitCountBudget([mdp.horizon] * 5)
        for seed in range(10):
            plain = rollout(mdp, policy, seed)
            filtered = filtered_rollout(mdp, policy, budget, seed)
            assert plain == filtered

    def test_estop_rollout_relabels_stop_state_landings(self):
        chain = make_chain_a()
        estop = build_estop_mdp(chain, StateSet({0}))
        traj = estop_rollout(estop, estop.lift_policy(TabularPolicy.uniform(2, 1)), 0)
        assert traj.termination_cause == "estop"
        assert traj.terminated_early
        assert traj.steps[-1].next_state == estop.term_index
        assert traj.steps[-1].reward == 0.0

    def test_membership_exit_zeroes_final_reward(self):
        chain = make_chain_a()
        traj = filtered_rollout(chain, TabularPolicy.uniform(2, 1), StateSet({0}), 0)
        assert traj.termination_cause == "estop"
        assert traj.rewards == [0.0]

    def test_visit_budget_matches_product_mdp_construction(self):
        # oracle 1: explicit product MDP over (state, visit counts)
        # oracle 2: exhaustive path enumeration of the filtered episode
        mdp = random_mdp(3, 1, 3, sparsity=2, rng=110)
        policy = TabularPolicy.uniform(3, 1)
        budgets = (2, 1, 1)
        support = VisitCountBudget(budgets)

        capped = [b + 1 for b in budgets]
        product_states = list(itertools.product(range(3), *[range(c + 1) for c in capped]))
        index = {ps: i for i, ps in enumerate(product_states)}
        entries = []
        dead = len(product_states)  # absorbing overflow state
        for ps in product_states:
            s, counts = ps[0], list(ps[1:])
            i = index[ps]
            if counts[s] + 1 > budgets[s]:
                entries.append((i, 0, dead, 1.0, 0.0))
                continue
            counts[s] += 1
            for s2, p, r in mdp.successors(s, 0):
                nxt = (s2, *[min(c, capped[j]) for j, c in enumerate(counts)])
                entries.append((i, 0, index[nxt], p, r))
        entries.append((dead, 0, dead, 1.0, 0.0))
        rho0 = np.zeros(len(product_states) + 1)
        for s in range(3):
            if mdp.rho0[s] > 0:
                rho0[index[(s, 0, 0, 0)]] = mdp.rho0[s]
        product = TabularMdp(len(product_states) + 1, 1, 3, rho0, entries)
        j_product = policy_value(product, TabularPolicy.uniform(product.n_states, 1), FiniteHorizon())

        # path enumeration under the rollout-loop semantics
        j_paths = 0.0
        chain_p = mdp.P[:, 0, :]
        for path in itertools.product(range(3), repeat=4):
            prob = mdp.rho0[path[0]]
            for t in range(3):
                prob *= chain_p[path[t], path[t + 1]]
            if prob == 0:
                continue
            counts = [0, 0, 0]
            reward = 0.0
            for t in range(3):
                if counts[path[t]] + 1 > budgets[path[t]]:
                    break
                counts[path[t]] += 1
                reward += mdp.R[path[t], 0, path[t + 1]]
            j_paths += prob * reward

        assert j_product == pytest.approx(j_paths, abs=1e-12)

        sims = [filtered_rollout(mdp, policy, support, seed) for seed in range(20000)]
        mc = np.mean([t.total_reward for t in sims])
        se = np.std([t.total_reward for t in sims], ddof=1) / np.sqrt(len(sims))
        assert abs(mc - j_paths) <= 4 * se + 1e-6


class TestBoxes:
    def test_degenerate_box_from_constant_demo(self):
        box = box_from_trajectories([np.array([[1.5, -2.0]] * 4)], margin_fraction=0.0)
        assert np.array_equal(box.lo, [1.5, -2.0])
        assert np.array_equal(box.hi, [1.5, -2.0])

    def test_zero_margin_contains_every_demo_state(self):
        rng = np.random.default_rng(0)
        demos = [rng.normal(size=(30, 3)) for _ in range(5)]
        box = box_from_trajectories(demos, margin_fraction=0.0)
        for demo in demos:
            for state in demo:
                assert state in box

    def test_margin_widens_by_fraction_of_extent(self):
        demos = [np.array([[-2.0], [1.0]]), np.array([[3.0], [0.0]])]
        box = box_from_trajectories(demos, margin_fraction=0.1)
        assert box.lo[0] == pytest.approx(-2.5)
        assert box.hi[0] == pytest.approx(3.5)

    def test_empty_demo_set_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            box_from_trajectories([])

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ValueError, match="lower bounds"):
            ContinuousBox([1.0], [0.0])


class TestDerivedSupports:
    def test_time_indexed_threshold_zero_keeps_reachable(self):
        chain = make_chain_a()
        sets = time_indexed_from_policy(chain, TabularPolicy.uniform(2, 1), eps=0.0)
        assert sets.sets[0] == {0}
        assert sets.sets[1] == {1}
        assert sets.sets[2] == {1}

    def test_budget_from_demo_counts_is_max(self):
        counts = np.array([[2, 0, 1], [1, 3, 1]])
        budget = visit_budget_from_demo_counts(counts)
        assert budget.budgets == (2, 3, 1)
