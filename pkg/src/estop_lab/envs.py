"""Concrete environments: slippery FrozenLake variants, random MDPs, a pendulum.

The FrozenLake here differs from the classic gym layout rule in one way: hole
tiles are not terminal. A hole keeps the agent in place with probability
1 - hole_escape_prob and otherwise lets the usual slip dynamics act, which
makes holes low-value but non-terminating detours.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import TabularMdp, as_generator

# Classic layouts (start upper-left, goal lower-right).
MAP_4X4 = ("SFFF", "FHFH", "FFFH", "HFFG")
MAP_8X8 = (
    "SFFFFFFF",
    "FFFFFFFF",
    "FFFHFFFF",
    "FFFFFHFF",
    "FFFHFFFF",
    "FHHFFFHF",
    "FHFFHFHF",
    "FFFHFFFG",
)
NAMED_MAPS = {"classic4x4": MAP_4X4, "classic8x8": MAP_8X8}

LEFT, DOWN, RIGHT, UP = 0, 1, 2, 3
_MOVES = {LEFT: (0, -1), DOWN: (1, 0), RIGHT: (0, 1), UP: (-1, 0)}


def load_map(path: str | Path) -> tuple[str, ...]:
    """Read a plain-text grid of S/F/H/G characters, one row per line."""
    rows = tuple(line.strip() for line in Path(path).read_text().splitlines() if line.strip())
    if not rows:
        raise ValueError(f"map file {path} is empty")
    return rows


@dataclass(frozen=True)
class FrozenLakeSpec:
    """Gridworld over {S, F, H, G} with 1/3 slip onto the two perpendicular moves."""

    grid: tuple[str, ...] = MAP_8X8
    hole_escape_prob: float = 0.01
    goal_terminal: bool = True
    horizon: int = 200
    discount: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        widths = {len(row) for row in self.grid}
        if len(widths) != 1:
            raise ValueError("map rows must all have the same width")
        flat = "".join(self.grid)
        bad = set(flat) - set("SFHG")
        if bad:
            raise ValueError(f"map contains invalid characters: {sorted(bad)}")
        if flat.count("S") != 1:
            raise ValueError("map must contain exactly one start tile 'S'")
        if "G" not in flat:
            raise ValueError("map must contain at least one goal tile 'G'")
        if not 0.0 <= self.hole_escape_prob <= 1.0:
            raise ValueError("hole_escape_prob must lie in [0, 1]")

    @property
    def n_rows(self) -> int:
        return len(self.grid)

    @property
    def n_cols(self) -> int:
        return len(self.grid[0])

    def tile(self, state: int) -> str:
        return self.grid[state // self.n_cols][state % self.n_cols]


def _slip_targets(spec: FrozenLakeSpec, state: int, action: int) -> list[int]:
    """The three equally likely landing cells (intended + both perpendiculars),
    clamped in place at the grid edge."""
    row, col = divmod(state, spec.n_cols)
    cells = []
    for realized in ((action - 1) % 4, action, (action + 1) % 4):
        dr, dc = _MOVES[realized]
        r2 = min(max(row + dr, 0), spec.n_rows - 1)
        c2 = min(max(col + dc, 0), spec.n_cols - 1)
        cells.append(r2 * spec.n_cols + c2)
    return cells


def build_frozenlake(spec: FrozenLakeSpec) -> TabularMdp:
    """Tabular MDP for the map: reward 1 on any transition into a goal tile,
    0 elsewhere; holes self-loop except with probability hole_escape_prob."""
    n_states = spec.n_rows * spec.n_cols
    n_actions = 4
    goal_states = {s for s in range(n_states) if spec.tile(s) == "G"}
    terminals = goal_states if spec.goal_terminal else set()

    def reward_into(s2: int) -> float:
        return 1.0 if s2 in goal_states else 0.0

    entries: list[tuple[int, int, int, float, float]] = []
    for s in range(n_states):
        tile = spec.tile(s)
        for a in range(n_actions):
            row: dict[int, float] = {}
            if s in terminals:
                row[s] = 1.0
            elif tile == "H":
                row[s] = row.get(s, 0.0) + (1.0 - spec.hole_escape_prob)
                if spec.hole_escape_prob > 0:
                    for s2 in _slip_targets(spec, s, a):
                        row[s2] = row.get(s2, 0.0) + spec.hole_escape_prob / 3.0
            else:
                for s2 in _slip_targets(spec, s, a):
                    row[s2] = row.get(s2, 0.0) + 1.0 / 3.0
            for s2, p in sorted(row.items()):
                r = 0.0 if s in terminals else reward_into(s2)
                entries.append((s, a, s2, p, r))

    start = "".join(spec.grid).index("S")
    rho0 = np.zeros(n_states)
    rho0[start] = 1.0
    return TabularMdp(n_states, n_actions, spec.horizon, rho0, entries, terminal_states=terminals)


def random_mdp(
    n_states: int,
    n_actions: int,
    horizon: int,
    sparsity: int | None = None,
    rng: int | np.random.Generator = 0,
    n_start_states: int = 1,
) -> TabularMdp:
    """Random valid instance for property sweeps: Dirichlet rows restricted to
    `sparsity` successors, uniform rewards in [0, 1], rho0 on a small support."""
    if n_states < 2:
        raise ValueError("need at least 2 states")
    gen = as_generator(rng)
    sparsity = n_states if sparsity is None else int(sparsity)
    sparsity = max(1, min(sparsity, n_states))
    entries = []
    for s in range(n_states):
        for a in range(n_actions):
            succ = gen.choice(n_states, size=sparsity, replace=False)
            if sparsity == 1:
                probs = np.ones(1)
            else:
                probs = gen.dirichlet(np.ones(sparsity))
            for s2, p in zip(succ, probs):
                if p > 0:
                    entries.append((s, a, int(s2), float(p), float(gen.uniform(0.0, 1.0))))
    n_start = max(1, min(n_start_states, n_states))
    starts = gen.choice(n_states, size=n_start, replace=False)
    weights = gen.dirichlet(np.ones(n_start)) if n_start > 1 else np.ones(1)
    rho0 = np.zeros(n_states)
    rho0[starts] = weights
    rho0 /= rho0.sum()
    return TabularMdp(n_states, n_actions, horizon, rho0, entries)


@dataclass(frozen=True)
class PendulumSpec:
    """Torque-limited pendulum; state (angle, angular velocity), upright at pi.

    Dynamics: theta_ddot = (g/length) * sin(theta) + u / (mass * length^2),
    integrated with one semi-implicit Euler step of size dt and the velocity
    clamped to [-v_max, v_max]. The reward is a quadratic cost in the angle
    error from upright (mod 2*pi), the velocity and the torque, rescaled to
    [0, 1] so that premature termination forfeits reward.
    """

    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.8
    u_max: float = 2.0
    v_max: float = 8.0
    dt: float = 0.05
    episode_length: int = 200
    start_angle_spread: float = 0.8
    start_velocity_spread: float = 1.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.u_max < 0:
            raise ValueError("u_max must be nonnegative")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")

    @property
    def upright(self) -> float:
        return math.pi

    @property
    def max_cost(self) -> float:
        return math.pi**2 + 0.1 * self.v_max**2 + 0.001 * self.u_max**2


def angle_error(spec: PendulumSpec, theta: float) -> float:
    """Signed offset of theta from upright, wrapped into [-pi, pi)."""
    return (theta - spec.upright + math.pi) % (2.0 * math.pi) - math.pi


def pendulum_reward(spec: PendulumSpec, state: np.ndarray, u: float) -> float:
    err = angle_error(spec, float(state[0]))
    cost = err**2 + 0.1 * float(state[1]) ** 2 + 0.001 * u**2
    return 1.0 - cost / spec.max_cost


def pendulum_step(spec: PendulumSpec, state: np.ndarray, action: float) -> tuple[np.ndarray, float]:
    """One deterministic integration step; returns (next_state, reward)."""
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise ValueError(f"non-finite pendulum state {state}")
    u = float(np.clip(action, -spec.u_max, spec.u_max))
    theta, omega = float(state[0]), float(state[1])
    accel = (spec.gravity / spec.length) * math.sin(theta) + u / (spec.mass * spec.length**2)
    omega = omega + spec.dt * accel
    omega = float(np.clip(omega, -spec.v_max, spec.v_max))
    theta = theta + spec.dt * omega
    nxt = np.array([theta, omega])
    return nxt, pendulum_reward(spec, nxt, u)


def pendulum_reset(spec: PendulumSpec, rng: int | np.random.Generator) -> np.ndarray:
    """Random semi-upright start: angle near upright, modest velocity."""
    gen = as_generator(rng)
    theta = spec.upright + gen.uniform(-spec.start_angle_spread, spec.start_angle_spread)
    omega = gen.uniform(-spec.start_velocity_spread, spec.start_velocity_spread)
    return np.array([theta, omega])


def pendulum_energy(spec: PendulumSpec, state: np.ndarray) -> float:
    """Conserved quantity of the passive (u = 0, unclamped) dynamics."""
    theta, omega = float(state[0]), float(state[1])
    return 0.5 * omega**2 + (spec.gravity / spec.length) * math.cos(theta)
