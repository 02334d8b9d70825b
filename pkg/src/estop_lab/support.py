"""Support sets and the e-stop MDP transformation.

An e-stop MDP redirects every transition that would leave the kept set into
an appended absorbing state with zero reward. Removed states stay in the
index space as unreachable zero-reward stubs so state identities agree
between the base and transformed processes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .mdp import (
    TabularMdp,
    TabularPolicy,
    Trajectory,
    TrajectoryStep,
    as_generator,
    _sample_index,
)


@dataclass(frozen=True)
class StateSet:
    """Episodes may continue only inside `kept_states`."""

    kept_states: frozenset[int]

    def __init__(self, kept_states):
        object.__setattr__(self, "kept_states", frozenset(int(s) for s in kept_states))

    def __contains__(self, state: int) -> bool:
        return int(state) in self.kept_states


@dataclass(frozen=True)
class TimeIndexedSets:
    """One kept set per timestep t = 0..len(sets)-1."""

    sets: tuple[frozenset[int], ...]

    def __init__(self, sets):
        object.__setattr__(self, "sets", tuple(frozenset(int(s) for s in group) for group in sets))


@dataclass(frozen=True)
class VisitCountBudget:
    """Terminate when a visit would push count(s) above budgets[s]."""

    budgets: tuple[int, ...]

    def __init__(self, budgets):
        budgets = tuple(int(b) for b in budgets)
        if any(b < 0 for b in budgets):
            raise ValueError("visit budgets must be nonnegative")
        object.__setattr__(self, "budgets", budgets)


@dataclass(frozen=True)
class ContinuousBox:
    """Axis-aligned box in a continuous state space."""

    lo: np.ndarray
    hi: np.ndarray

    def __init__(self, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != hi.shape:
            raise ValueError(f"bound shapes differ: {lo.shape} vs {hi.shape}")
        if np.any(lo > hi):
            raise ValueError("lower bounds must not exceed upper bounds")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def __contains__(self, state) -> bool:
        state = np.asarray(state, dtype=float)
        return bool(np.all(state >= self.lo) and np.all(state <= self.hi))


SupportSet = Union[StateSet, TimeIndexedSets, VisitCountBudget, ContinuousBox]


def rho0_support(mdp: TabularMdp) -> frozenset[int]:
    return frozenset(int(s) for s in np.nonzero(mdp.rho0)[0])


def estop_step_filter(
    support: SupportSet,
    t: int,
    state,
    visit_counts: Mapping[int, int] | Sequence[int] | None = None,
) -> bool:
    """True when the e-stop fires for this visit.

    StateSet and TimeIndexedSets test membership of the visited state;
    ContinuousBox tests the coordinates; VisitCountBudget fires when this
    visit would make count(state) exceed the budget (the caller supplies the
    counts accumulated *before* this visit).
    """
    if isinstance(support, StateSet):
        return int(state) not in support.kept_states
    if isinstance(support, TimeIndexedSets):
        if t >= len(support.sets):
            raise ValueError(f"timestep {t} beyond the {len(support.sets)} time-indexed sets")
        return int(state) not in support.sets[t]
    if isinstance(support, VisitCountBudget):
        if visit_counts is None:
            raise ValueError("VisitCountBudget needs the visit counts so far")
        state = int(state)
        return visit_counts[state] + 1 > support.budgets[state]
    if isinstance(support, ContinuousBox):
        return state not in support
    raise TypeError(f"unknown support set type {type(support)!r}")


@dataclass(frozen=True)
class EStopMdp:
    """Base MDP plus its e-stop transform; the absorbing stop state is the
    last index of `mdp`. Original state indices are preserved."""

    base: TabularMdp
    mdp: TabularMdp
    support: StateSet

    @property
    def term_index(self) -> int:
        return self.mdp.n_states - 1

    def lift_policy(self, policy: TabularPolicy) -> TabularPolicy:
        """Extend a base-MDP policy to the transformed index space (the action
        taken at the stop state is irrelevant; uniform is used)."""
        pad_shape = list(policy.probs.shape)
        pad_shape[-2] = 1
        pad = np.full(pad_shape, 1.0 / policy.n_actions)
        return TabularPolicy(np.concatenate([policy.probs, pad], axis=-2), policy.time_dependent)

    def restrict_policy(self, policy: TabularPolicy) -> TabularPolicy:
        """Drop the stop-state row, giving a policy on the base index space."""
        return TabularPolicy(policy.probs[..., : self.base.n_states, :], policy.time_dependent)


def build_estop_mdp(mdp: TabularMdp, support: StateSet) -> EStopMdp:
    """Transform `mdp` so that leaving the kept set jumps to an absorbing
    zero-reward stop state. The kept set must cover the initial distribution."""
    kept = support.kept_states
    if not kept <= set(range(mdp.n_states)):
        raise ValueError("kept set references states outside the MDP")
    missing = rho0_support(mdp) - kept
    if missing:
        raise ValueError(f"kept set must cover the initial distribution; missing states {sorted(missing)}")

    term = mdp.n_states
    n_states = mdp.n_states + 1
    kept_mask = np.zeros(mdp.n_states, dtype=bool)
    kept_mask[list(kept)] = True

    entries: list[tuple[int, int, int, float, float]] = []
    removed_terminals = []
    for s in range(mdp.n_states):
        if not kept_mask[s]:
            removed_terminals.append(s)
            for a in range(mdp.n_actions):
                entries.append((s, a, s, 1.0, 0.0))
            continue
        for a in range(mdp.n_actions):
            leak = 0.0
            for s2, p, r in mdp.successors(s, a):
                if kept_mask[s2]:
                    entries.append((s, a, s2, p, r))
                else:
                    leak += p
            if leak > 0:
                entries.append((s, a, term, leak, 0.0))
    for a in range(mdp.n_actions):
        entries.append((term, a, term, 1.0, 0.0))

    rho0 = np.append(mdp.rho0, 0.0)
    terminals = (set(mdp.terminal_states) & kept) | set(removed_terminals) | {term}
    transformed = TabularMdp(n_states, mdp.n_actions, mdp.horizon, rho0, entries, terminal_states=terminals)
    return EStopMdp(base=mdp, mdp=transformed, support=StateSet(kept))


@dataclass(frozen=True)
class CompactEStop:
    """E-stop transform re-indexed onto kept states plus the stop state (the
    last index); `kept` holds the original indices, sorted ascending."""

    base: TabularMdp
    mdp: TabularMdp
    kept: np.ndarray

    @property
    def term_index(self) -> int:
        return self.mdp.n_states - 1

    def expand_actions(self, actions: np.ndarray, default_action: int = 0) -> np.ndarray:
        """Lift a (compact-S,) action table back to the base index space;
        removed states take the default action."""
        full = np.full(self.base.n_states, default_action, dtype=int)
        full[self.kept] = np.asarray(actions, dtype=int)[:-1]
        return full


def compact_estop_mdp(estop: EStopMdp) -> CompactEStop:
    """Re-index the transform onto kept states plus the stop state, dropping
    unreachable stubs."""
    kept_sorted = np.array(sorted(estop.support.kept_states), dtype=int)
    new_index = {int(s): i for i, s in enumerate(kept_sorted)}
    term_old = estop.term_index
    term_new = len(kept_sorted)
    entries = []
    for s in kept_sorted:
        for a in range(estop.mdp.n_actions):
            for s2, p, r in estop.mdp.successors(int(s), a):
                target = term_new if s2 == term_old else new_index[s2]
                entries.append((new_index[int(s)], a, target, p, r))
    for a in range(estop.mdp.n_actions):
        entries.append((term_new, a, term_new, 1.0, 0.0))
    rho0 = np.append(estop.base.rho0[kept_sorted], 0.0)
    terminals = {new_index[s] for s in estop.base.terminal_states if s in estop.support.kept_states} | {term_new}
    small = TabularMdp(
        term_new + 1, estop.mdp.n_actions, estop.mdp.horizon, rho0, entries, terminal_states=terminals
    )
    return CompactEStop(base=estop.base, mdp=small, kept=kept_sorted)


def estop_rollout(estop: EStopMdp, policy: TabularPolicy, rng) -> Trajectory:
    """Episode in the transformed MDP; landing in the stop state is labelled
    with the estop termination cause."""
    from .mdp import rollout as plain_rollout

    traj = plain_rollout(estop.mdp, policy, rng)
    if traj.steps and traj.steps[-1].next_state == estop.term_index:
        return Trajectory(traj.steps, terminated_early=True, termination_cause="estop")
    return traj


def filtered_rollout(
    mdp: TabularMdp,
    policy: TabularPolicy,
    support: SupportSet,
    rng,
) -> Trajectory:
    """Episode in the base MDP with the e-stop filter applied online.

    Draws the same random sequence as a plain rollout, so a support that never
    fires reproduces the unfiltered trajectory for the same seed. Membership
    supports are checked on every landing state (the start is covered by
    construction); the visit-count budget is checked each time the agent is
    about to act.
    """
    gen = as_generator(rng)
    cum_p, rewards = mdp._cumulative_tables()
    counting = isinstance(support, VisitCountBudget)
    counts = np.zeros(mdp.n_states, dtype=int) if counting else None

    state = _sample_index(np.cumsum(mdp.rho0), gen.random())
    steps: list[TrajectoryStep] = []
    cause = "horizon"
    for t in range(mdp.horizon):
        if counting:
            if estop_step_filter(support, t, state, counts):
                cause = "estop"
                break
            counts[state] += 1
        action = _sample_index(np.cumsum(policy.action_probs(t)[state]), gen.random())
        nxt = _sample_index(cum_p[state, action], gen.random())
        reward = float(rewards[state, action, nxt])
        if not counting and estop_step_filter(support, t + 1, nxt, None):
            steps.append(TrajectoryStep(t, state, action, 0.0, nxt))
            cause = "estop"
            break
        steps.append(TrajectoryStep(t, state, action, reward, nxt))
        state = nxt
        if mdp.is_terminal(state) and t + 1 < mdp.horizon:
            cause = "terminal_state"
            break
    early = len(steps) < mdp.horizon or cause == "estop"
    return Trajectory(tuple(steps), terminated_early=early, termination_cause=cause)


def box_from_trajectories(demo_states: Sequence[np.ndarray], margin_fraction: float = 0.0) -> ContinuousBox:
    """Per-dimension min/max over all demo states, widened symmetrically by
    margin_fraction of each dimension's extent."""
    if len(demo_states) == 0:
        raise ValueError("need at least one demonstration")
    stacked = np.concatenate([np.atleast_2d(np.asarray(d, dtype=float)) for d in demo_states], axis=0)
    if not np.all(np.isfinite(stacked)):
        raise ValueError("demonstrations contain non-finite states")
    lo = stacked.min(axis=0)
    hi = stacked.max(axis=0)
    widen = margin_fraction * (hi - lo)
    return ContinuousBox(lo - widen, hi + widen)


def time_indexed_from_policy(mdp: TabularMdp, policy: TabularPolicy, eps: float = 0.0) -> TimeIndexedSets:
    """Kept set per timestep: states whose occupancy probability exceeds eps
    (the threshold defaults to 0, keeping every reachable state)."""
    from .mdp import state_distribution_series

    series = state_distribution_series(mdp, policy, mdp.horizon)
    sets = [frozenset(np.nonzero(row > eps)[0].tolist()) for row in series]
    return TimeIndexedSets(sets)


def visit_budget_from_time_indexed(sets: TimeIndexedSets, n_states: int) -> VisitCountBudget:
    """Budget f(s) = number of timesteps whose kept set contains s."""
    budgets = np.zeros(n_states, dtype=int)
    for group in sets.sets:
        for s in group:
            budgets[s] += 1
    return VisitCountBudget(budgets)


def visit_budget_from_demo_counts(per_demo_counts: np.ndarray) -> VisitCountBudget:
    """Budget f(s) = the maximum number of visits to s in any single demo."""
    per_demo_counts = np.asarray(per_demo_counts)
    if per_demo_counts.ndim != 2:
        raise ValueError("expected an (n_demos, n_states) visit-count matrix")
    return VisitCountBudget(per_demo_counts.max(axis=0))
