"""Finite tabular episodic MDPs: representation, simulation, exact evaluation.

States and actions are integer indices. An episode lasts at most `horizon`
transitions: states s_0..s_H are visited and the reward r_t = R(s_t, a_t,
s_{t+1}) is collected for t = 0..H-1. Terminal states are zero-reward
self-loops so forward recursions over the full horizon stay well-defined.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np

PROB_ATOL = 1e-12

TerminationCause = Literal["horizon", "terminal_state", "estop"]


class ConvergenceError(RuntimeError):
    """An iterative solver failed to reach tolerance within its sweep cap."""

    def __init__(self, message: str, residual: float, sweeps: int):
        super().__init__(f"{message}: residual {residual:.3e} after {sweeps} sweeps")
        self.residual = residual
        self.sweeps = sweeps


@dataclass(frozen=True)
class FiniteHorizon:
    """Undiscounted evaluation over exactly `mdp.horizon` transitions."""


@dataclass(frozen=True)
class DiscountedEpisodic:
    """Discounted evaluation (episodes still cap at the MDP horizon when simulated)."""

    gamma: float
    tol: float = 1e-6
    max_sweeps: int = 100_000

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.gamma}")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")


EvalMode = FiniteHorizon | DiscountedEpisodic


def as_generator(rng: int | np.random.Generator) -> np.random.Generator:
    """Accept either a seed or a ready Generator; no hidden global state."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class TabularMdp:
    """Episodic MDP over finite state/action sets with sparse transition entries.

    Parameters
    ----------
    transitions:
        Iterable of (s, a, s2, p, r) entries. Probabilities of each (s, a)
        row must sum to 1; rewards must lie in [0, 1]. Duplicate (s, a, s2)
        keys are rejected; zero-probability entries are dropped.
    terminal_states:
        States that must carry a single self-transition with reward 0.
    """

    def __init__(
        self,
        n_states: int,
        n_actions: int,
        horizon: int,
        rho0: Sequence[float] | np.ndarray,
        transitions: Iterable[tuple[int, int, int, float, float]],
        terminal_states: Iterable[int] = (),
    ):
        if n_states < 1 or n_actions < 1:
            raise ValueError("n_states and n_actions must be positive")
        if horizon < 1:
            raise ValueError("horizon must be a positive integer")
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        self.horizon = int(horizon)

        rho0 = np.asarray(rho0, dtype=float)
        if rho0.shape != (self.n_states,):
            raise ValueError(f"rho0 must have shape ({self.n_states},), got {rho0.shape}")
        if np.any(rho0 < 0):
            raise ValueError("rho0 has negative entries")
        if abs(rho0.sum() - 1.0) > PROB_ATOL:
            raise ValueError(f"rho0 sums to {rho0.sum()!r}, expected 1 within {PROB_ATOL}")
        self.rho0 = _readonly(rho0)

        P = np.zeros((self.n_states, self.n_actions, self.n_states))
        R = np.zeros((self.n_states, self.n_actions, self.n_states))
        seen: set[tuple[int, int, int]] = set()
        entries: list[tuple[int, int, int, float, float]] = []
        for idx, (s, a, s2, p, r) in enumerate(transitions):
            key = (int(s), int(a), int(s2))
            if not (0 <= key[0] < n_states and 0 <= key[2] < n_states):
                raise ValueError(f"transitions[{idx}]: state index out of range in {key}")
            if not 0 <= key[1] < n_actions:
                raise ValueError(f"transitions[{idx}]: action index out of range in {key}")
            if key in seen:
                raise ValueError(f"transitions[{idx}]: duplicate entry for (s,a,s2)={key}")
            seen.add(key)
            p = float(p)
            r = float(r)
            if p < 0:
                raise ValueError(f"transitions[{idx}]: negative probability {p}")
            if p == 0.0:
                continue
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"transitions[{idx}]: reward {r} outside [0, 1]")
            P[key] = p
            R[key] = r
            entries.append((*key, p, r))

        row_sums = P.sum(axis=2)
        bad = np.argwhere(np.abs(row_sums - 1.0) > PROB_ATOL)
        if bad.size:
            s, a = map(int, bad[0])
            raise ValueError(
                f"transition row (s={s}, a={a}) sums to {row_sums[s, a]!r}, expected 1 within {PROB_ATOL}"
            )

        self.terminal_states = frozenset(int(s) for s in terminal_states)
        for s in self.terminal_states:
            if not 0 <= s < n_states:
                raise ValueError(f"terminal state {s} out of range")
            for a in range(n_actions):
                if P[s, a, s] != 1.0:
                    raise ValueError(f"terminal state {s} must self-loop with probability 1 (action {a})")
                if R[s, a, s] != 0.0:
                    raise ValueError(f"terminal state {s} must have zero self-loop reward (action {a})")

        entries.sort()
        self._entries = tuple(entries)
        self.P = _readonly(P)
        self.R = _readonly(R)
        self.expected_rewards = _readonly(np.einsum("saz,saz->sa", P, R))
        self._is_terminal = np.zeros(self.n_states, dtype=bool)
        self._is_terminal[list(self.terminal_states)] = True
        self._sampling_tables: tuple[np.ndarray, np.ndarray] | None = None

    # -- accessors ---------------------------------------------------------

    def transition_entries(self) -> tuple[tuple[int, int, int, float, float], ...]:
        """Canonical sorted (s, a, s2, p, r) entries (zero-probability free)."""
        return self._entries

    def successors(self, s: int, a: int) -> list[tuple[int, float, float]]:
        """Sparse row: list of (next_state, probability, reward)."""
        (idx,) = np.nonzero(self.P[s, a])
        return [(int(s2), float(self.P[s, a, s2]), float(self.R[s, a, s2])) for s2 in idx]

    def is_terminal(self, s: int) -> bool:
        return bool(self._is_terminal[s])

    def _cumulative_tables(self) -> tuple[np.ndarray, np.ndarray]:
        # (S,A,S) cumulative probabilities for inverse-CDF sampling, built once.
        if self._sampling_tables is None:
            cum = np.cumsum(self.P, axis=2)
            cum[..., -1] = 1.0
            self._sampling_tables = (_readonly(cum), self.R)
        return self._sampling_tables

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return (
            f"TabularMdp(n_states={self.n_states}, n_actions={self.n_actions}, "
            f"horizon={self.horizon}, terminals={sorted(self.terminal_states)})"
        )


class TabularPolicy:
    """Stationary (S, A) or time-dependent (H, S, A) action distributions."""

    def __init__(self, probs: np.ndarray, time_dependent: bool = False):
        probs = np.asarray(probs, dtype=float)
        expected_ndim = 3 if time_dependent else 2
        if probs.ndim != expected_ndim:
            raise ValueError(f"expected a {expected_ndim}-d probability table, got shape {probs.shape}")
        if np.any(probs < 0):
            raise ValueError("action probabilities must be nonnegative")
        sums = probs.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > PROB_ATOL):
            raise ValueError("every action distribution must sum to 1")
        self.time_dependent = bool(time_dependent)
        self.probs = _readonly(probs)

    @classmethod
    def stationary(cls, probs: np.ndarray) -> "TabularPolicy":
        return cls(probs, time_dependent=False)

    @classmethod
    def time_varying(cls, probs: np.ndarray) -> "TabularPolicy":
        return cls(probs, time_dependent=True)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: np.ndarray, n_actions: int) -> "TabularPolicy":
        """One-hot policy from an action index table of shape (S,) or (H, S)."""
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros(actions.shape + (n_actions,))
        np.put_along_axis(probs, actions[..., None], 1.0, axis=-1)
        return cls(probs, time_dependent=actions.ndim == 2)

    @property
    def n_states(self) -> int:
        return self.probs.shape[-2]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[-1]

    def action_probs(self, t: int) -> np.ndarray:
        """The (S, A) table in force at timestep t."""
        if not self.time_dependent:
            return self.probs
        if not 0 <= t < self.probs.shape[0]:
            raise ValueError(f"policy not defined at timestep {t}")
        return self.probs[t]


@dataclass(frozen=True)
class TrajectoryStep:
    t: int
    state: int
    action: int
    reward: float
    next_state: int


@dataclass(frozen=True)
class Trajectory:
    """One episode: ordered transition steps plus how the episode ended."""

    steps: tuple[TrajectoryStep, ...]
    terminated_early: bool
    termination_cause: TerminationCause

    def __post_init__(self):
        for i, step in enumerate(self.steps):
            if step.t != i:
                raise ValueError(f"step {i} has timestep {step.t}; expected consecutive from 0")
            if i and step.state != self.steps[i - 1].next_state:
                raise ValueError(f"step {i} starts at {step.state}, previous landed at {self.steps[i - 1].next_state}")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def states(self) -> list[int]:
        """All visited states s_0..s_L including the final landing state."""
        if not self.steps:
            return []
        return [s.state for s in self.steps] + [self.steps[-1].next_state]

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.steps]

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    @property
    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))


def _check_compatible(mdp: TabularMdp, policy: TabularPolicy, horizon: int | None = None) -> None:
    if policy.n_states != mdp.n_states or policy.n_actions != mdp.n_actions:
        raise ValueError(
            f"policy table is {policy.probs.shape[-2:]}, MDP expects "
            f"({mdp.n_states}, {mdp.n_actions})"
        )
    if policy.time_dependent and policy.probs.shape[0] < (horizon if horizon is not None else mdp.horizon):
        raise ValueError("time-dependent policy is not defined for every timestep of the horizon")


def policy_step_matrices(mdp: TabularMdp, policy: TabularPolicy, t: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Policy-induced chain P_pi (S, S) and expected step reward r_pi (S,) at time t."""
    probs = policy.action_probs(t)
    chain = np.einsum("sa,saz->sz", probs, mdp.P)
    step_reward = np.einsum("sa,sa->s", probs, mdp.expected_rewards)
    return chain, step_reward


def state_distribution(mdp: TabularMdp, policy: TabularPolicy, t: int) -> np.ndarray:
    """Distribution of s_t under the policy, by exact forward recursion."""
    if not 0 <= t <= mdp.horizon:
        raise ValueError(f"timestep {t} outside [0, {mdp.horizon}]")
    _check_compatible(mdp, policy, horizon=t)
    rho = mdp.rho0.copy()
    for u in range(t):
        chain, _ = policy_step_matrices(mdp, policy, u)
        rho = rho @ chain
    return rho


def state_distribution_series(mdp: TabularMdp, policy: TabularPolicy, t_max: int) -> np.ndarray:
    """Stacked distributions rho^0..rho^{t_max}, shape (t_max + 1, S)."""
    if not 0 <= t_max <= mdp.horizon:
        raise ValueError(f"timestep {t_max} outside [0, {mdp.horizon}]")
    _check_compatible(mdp, policy, horizon=t_max)
    out = np.empty((t_max + 1, mdp.n_states))
    rho = mdp.rho0.copy()
    out[0] = rho
    for u in range(t_max):
        chain, _ = policy_step_matrices(mdp, policy, u)
        rho = rho @ chain
        out[u + 1] = rho
    return out

def average_state_distribution(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """Time-average (1/H) * sum_{t<H} rho^t of the per-step state distributions."""
    series = state_distribution_series(mdp, policy, mdp.horizon - 1)
    return series.mean(axis=0)


def finite_horizon_state_values(mdp: TabularMdp, policy: TabularPolicy, horizon: int | None = None) -> np.ndarray:
    """Undiscounted value-to-go table of shape (horizon + 1, S); row t is V_t."""
    horizon = mdp.horizon if horizon is None else int(horizon)
    if not 0 <= horizon <= mdp.horizon:
        raise ValueError(f"horizon {horizon} outside [0, {mdp.horizon}]")
    _check_compatible(mdp, policy, horizon=horizon)
    values = np.zeros((horizon + 1, mdp.n_states))
    for t in range(horizon - 1, -1, -1):
        chain, step_reward = policy_step_matrices(mdp, policy, t)
        values[t] = step_reward + chain @ values[t + 1]
    return values


def discounted_state_values(mdp: TabularMdp, policy: TabularPolicy, mode: DiscountedEpisodic) -> np.ndarray:
    """Iterative policy evaluation to the mode's tolerance (sup-norm residual)."""
    _check_compatible(mdp, policy, horizon=1)
    if policy.time_dependent:
        raise ValueError("discounted evaluation requires a stationary policy")
    chain, step_reward = policy_step_matrices(mdp, policy)
    values = np.zeros(mdp.n_states)
    residual = np.inf
    for sweep in range(1, mode.max_sweeps + 1):
        updated = step_reward + mode.gamma * (chain @ values)
        residual = float(np.max(np.abs(updated - values)))
        values = updated
        if residual < mode.tol:
            return values
    raise ConvergenceError("iterative policy evaluation did not converge", residual, mode.max_sweeps)


def policy_value(mdp: TabularMdp, policy: TabularPolicy, mode: EvalMode) -> float:
    """Expected episode return J(pi) under the evaluation mode.

    FiniteHorizon runs the exact backward dynamic program over the episode;
    DiscountedEpisodic runs iterative policy evaluation to tolerance and
    returns the rho0-weighted fixed point.
    """
    if isinstance(mode, FiniteHorizon):
        values = finite_horizon_state_values(mdp, policy)
        return float(mdp.rho0 @ values[0])
    return float(mdp.rho0 @ discounted_state_values(mdp, policy, mode))


def _sample_index(cumulative: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(cumulative, u, side="right"))
    return min(idx, len(cumulative) - 1)


def rollout(mdp: TabularMdp, policy: TabularPolicy, rng: int | np.random.Generator) -> Trajectory:
    """Sample one episode; deterministic given the seed. Stops at the horizon
    or upon landing in a terminal state."""
    _check_compatible(mdp, policy)
    gen = as_generator(rng)
    cum_p, rewards = mdp._cumulative_tables()
    state = _sample_index(np.cumsum(mdp.rho0), gen.random())
    steps: list[TrajectoryStep] = []
    cause: TerminationCause = "horizon"
    for t in range(mdp.horizon):
        action_cum = np.cumsum(policy.action_probs(t)[state])
        action = _sample_index(action_cum, gen.random())
        nxt = _sample_index(cum_p[state, action], gen.random())
        steps.append(TrajectoryStep(t, state, action, float(rewards[state, action, nxt]), nxt))
        state = nxt
        if mdp.is_terminal(state) and t + 1 < mdp.horizon:
            cause = "terminal_state"
            break
    return Trajectory(tuple(steps), terminated_early=len(steps) < mdp.horizon, termination_cause=cause)


@dataclass(frozen=True)
class ValueIterationResult:
    """Optimal values plus the greedy policy and the solver's cost accounting.

    `values` has shape (S,) in discounted mode and (H + 1, S) in finite-horizon
    mode (row t is the optimal value-to-go at timestep t; row H is zero).
    `flop_count` follows the 4*|S|^2*|A| per-sweep accounting rule.
    """

    values: np.ndarray
    policy: TabularPolicy
    sweeps: int
    flop_count: int
    residual: float


def value_iteration(mdp: TabularMdp, mode: EvalMode, tol: float = 1e-6) -> ValueIterationResult:
    """Bellman-optimal values and the greedy policy (ties to the lowest action)."""
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    S, A = mdp.n_states, mdp.n_actions
    flops_per_sweep = 4 * S * S * A
    if isinstance(mode, FiniteHorizon):
        H = mdp.horizon
        values = np.zeros((H + 1, S))
        actions = np.zeros((H, S), dtype=int)
        for t in range(H - 1, -1, -1):
            q = mdp.expected_rewards + np.einsum("saz,z->sa", mdp.P, values[t + 1])
            actions[t] = np.argmax(q, axis=1)
            values[t] = np.take_along_axis(q, actions[t][:, None], axis=1)[:, 0]
        policy = TabularPolicy.deterministic(actions, A)
        return ValueIterationResult(values, policy, sweeps=H, flop_count=H * flops_per_sweep, residual=0.0)

    values = np.zeros(S)
    residual = np.inf
    sweeps = 0
    for sweeps in range(1, mode.max_sweeps + 1):
        q = mdp.expected_rewards + mode.gamma * np.einsum("saz,z->sa", mdp.P, values)
        updated = q.max(axis=1)
        residual = float(np.max(np.abs(updated - values)))
        values = updated
        if residual < tol:
            break
    else:
        raise ConvergenceError("value iteration did not converge", residual, mode.max_sweeps)
    q = mdp.expected_rewards + mode.gamma * np.einsum("saz,z->sa", mdp.P, values)
    policy = TabularPolicy.deterministic(np.argmax(q, axis=1), A)
    return ValueIterationResult(values, policy, sweeps=sweeps, flop_count=sweeps * flops_per_sweep, residual=residual)
