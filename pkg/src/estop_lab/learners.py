"""Learning algorithms that run unchanged on a base MDP or its e-stop variant:
tabular Q-learning, one-step actor-critic, and cross-entropy policy search
for the pendulum.

Every learner is strictly sequential and draws all randomness from one seeded
generator, so identical (instance, config, seed) triples reproduce curves
bit-for-bit. Evaluation points come from exact policy evaluation of the
current greedy policy, reported both on the training instance and on the full
base environment (trained policies are portable to the unrestricted MDP).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .envs import PendulumSpec
from .mdp import (
    DiscountedEpisodic,
    TabularMdp,
    TabularPolicy,
    as_generator,
    policy_value,
    _sample_index,
)
from .support import CompactEStop, ContinuousBox, EStopMdp


@dataclass(frozen=True)
class LearnerConfig:
    algorithm: str = "q_learning"
    alpha: float = 0.1
    beta: float = 0.05
    epsilon: float = 0.1
    epsilon_final: float = 0.01
    gamma: float = 0.99
    episodes: int = 2000
    eval_every_episodes: int = 10
    seed: int = 0
    # cross-entropy search
    population: int = 32
    elite_fraction: float = 0.25
    iterations: int = 30
    init_weight_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.eval_every_episodes < 1:
            raise ValueError("eval_every_episodes must be positive")


@dataclass(frozen=True)
class LearningCurve:
    """Evaluated returns against cumulative environment steps for one trial.

    eval_return scores the policy on the instance it was trained on;
    eval_return_full scores the same policy in the full base environment.
    The per-episode training log (end step, return) backs regret accounting.
    """

    seed: int
    states_seen: np.ndarray
    eval_return: np.ndarray
    eval_return_full: np.ndarray
    episode_end_steps: np.ndarray
    episode_returns: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.states_seen) <= 0):
            raise ValueError("states_seen must be strictly increasing")


TrainingInstance = TabularMdp | EStopMdp | CompactEStop


def _training_views(
    instance: TrainingInstance,
) -> tuple[TabularMdp, TabularMdp, Callable[[np.ndarray], TabularPolicy], bool]:
    """(train_mdp, base_mdp, action_table -> base policy, is_transformed)."""
    if isinstance(instance, TabularMdp):
        to_base = lambda actions: TabularPolicy.deterministic(actions, instance.n_actions)
        return instance, instance, to_base, False
    if isinstance(instance, EStopMdp):
        base = instance.base

        def to_base(actions: np.ndarray) -> TabularPolicy:
            return TabularPolicy.deterministic(actions[: base.n_states], base.n_actions)

        return instance.mdp, base, to_base, True
    if isinstance(instance, CompactEStop):
        base = instance.base

        def to_base(actions: np.ndarray) -> TabularPolicy:
            return TabularPolicy.deterministic(instance.expand_actions(actions), base.n_actions)

        return instance.mdp, base, to_base, True
    raise TypeError(f"cannot train on {type(instance)!r}")


class _CurveRecorder:
    def __init__(self, seed: int):
        self.seed = seed
        self.xs: list[int] = []
        self.ys: list[float] = []
        self.ys_full: list[float] = []
        self.episode_end_steps: list[int] = []
        self.episode_returns: list[float] = []

    def record_eval(self, steps: int, value: float, value_full: float) -> None:
        if self.xs and steps == self.xs[-1]:
            # evaluation cadence can land twice on the same step count (e.g.
            # final episode aligned with the cadence); keep the later value
            self.ys[-1] = value
            self.ys_full[-1] = value_full
            return
        self.xs.append(steps)
        self.ys.append(value)
        self.ys_full.append(value_full)

    def finish(self) -> LearningCurve:
        return LearningCurve(
            seed=self.seed,
            states_seen=np.asarray(self.xs, dtype=float),
            eval_return=np.asarray(self.ys, dtype=float),
            eval_return_full=np.asarray(self.ys_full, dtype=float),
            episode_end_steps=np.asarray(self.episode_end_steps, dtype=float),
            episode_returns=np.asarray(self.episode_returns, dtype=float),
        )


def _epsilon_at(config: LearnerConfig, episode: int) -> float:
    """Linear decay from epsilon to epsilon_final across the episode budget."""
    if config.episodes <= 1:
        return config.epsilon
    frac = episode / (config.episodes - 1)
    return config.epsilon + (config.epsilon_final - config.epsilon) * frac


@dataclass
class QStepEvent:
    """One environment transition taken by the Q-learning loop."""

    episode: int
    t: int
    state: int
    action: int
    reward: float
    next_state: int
    removed_flag: bool
    episode_end: bool
    cause: str  # horizon | terminal_state | estop


class QLearningLoop:
    """Stepwise one-step Q-learning with epsilon-greedy behaviour.

    Supports an online e-stop: transitions landing in a state of `blocked`
    yield zero reward, bootstrap a zero target (the blocked state acts as the
    absorbing stop state) and end the episode. The blocked set may grow
    between steps; all randomness flows through one generator, so two loops
    with the same seed and the same blocked-set history step identically.
    """

    def __init__(self, mdp: TabularMdp, config: LearnerConfig, blocked: set[int] | None = None):
        self.mdp = mdp
        self.config = config
        self.gen = as_generator(config.seed)
        self.blocked: set[int] = blocked if blocked is not None else set()
        self.q = np.zeros((mdp.n_states, mdp.n_actions))
        self._cum_p, self._rewards = mdp._cumulative_tables()
        self._rho_cum = np.cumsum(mdp.rho0)
        self.episode = 0
        self.steps_seen = 0
        self.t = 0
        self.state: int | None = None
        self.episode_return = 0.0
        self.episode_states: list[int] = []

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.q, axis=1)

    def abort_episode(self) -> None:
        """End the current episode before the next transition (no reward)."""
        if self.state is not None:
            self.episode += 1
            self.state = None

    def _reset(self) -> None:
        self.state = _sample_index(self._rho_cum, self.gen.random())
        self.t = 0
        self.episode_return = 0.0
        self.episode_states = [self.state]

    def step(self) -> QStepEvent:
        if self.state is None:
            self._reset()
        eps = _epsilon_at(self.config, self.episode)
        state = self.state
        if self.gen.random() < eps:
            action = int(self.gen.integers(self.mdp.n_actions))
        else:
            action = int(np.argmax(self.q[state]))
        nxt = _sample_index(self._cum_p[state, action], self.gen.random())
        removed = nxt in self.blocked
        reward = 0.0 if removed else float(self._rewards[state, action, nxt])
        target = reward + (0.0 if removed else self.config.gamma * float(self.q[nxt].max()))
        self.q[state, action] += self.config.alpha * (target - self.q[state, action])
        self.steps_seen += 1
        self.episode_return += reward
        self.t += 1
        self.episode_states.append(nxt)
        t_taken = self.t - 1
        if removed:
            cause = "estop"
            episode_end = True
        elif self.mdp.is_terminal(nxt) and self.t < self.mdp.horizon:
            cause = "terminal_state"
            episode_end = True
        elif self.t >= self.mdp.horizon:
            cause = "horizon"
            episode_end = True
        else:
            cause = ""
            episode_end = False
        event = QStepEvent(
            episode=self.episode,
            t=t_taken,
            state=state,
            action=action,
            reward=reward,
            next_state=nxt,
            removed_flag=removed,
            episode_end=episode_end,
            cause=cause,
        )
        if episode_end:
            self.episode += 1
            self.state = None
        else:
            self.state = nxt
        return event


def q_learning(instance: TrainingInstance, config: LearnerConfig) -> tuple[np.ndarray, LearningCurve]:
    """One-step Q-learning with epsilon-greedy behaviour and exact-evaluation
    checkpoints every eval_every_episodes episodes."""
    train, base, to_base, transformed = _training_views(instance)
    loop = QLearningLoop(train, config)
    mode = DiscountedEpisodic(config.gamma)
    rec = _CurveRecorder(config.seed)

    def evaluate(steps: int) -> None:
        actions = loop.greedy_actions()
        greedy = TabularPolicy.deterministic(actions, train.n_actions)
        value = policy_value(train, greedy, mode)
        value_full = policy_value(base, to_base(actions), mode) if transformed else value
        rec.record_eval(steps, value, value_full)

    evaluate(0)
    while loop.episode < config.episodes:
        event = loop.step()
        if event.episode_end:
            rec.episode_end_steps.append(loop.steps_seen)
            rec.episode_returns.append(loop.episode_return)
            finished = event.episode + 1
            if finished % config.eval_every_episodes == 0 or finished == config.episodes:
                evaluate(loop.steps_seen)
    return loop.q, rec.finish()


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def actor_critic(
    instance: TrainingInstance, config: LearnerConfig
) -> tuple[np.ndarray, np.ndarray, LearningCurve]:
    """One-step actor-critic: softmax policy over tabular preferences with a
    tabular value-function critic; returns (preferences, values, curve)."""
    train, base, to_base, transformed = _training_views(instance)
    gen = as_generator(config.seed)
    cum_p, rewards = train._cumulative_tables()
    rho_cum = np.cumsum(train.rho0)
    prefs = np.zeros((train.n_states, train.n_actions))
    values = np.zeros(train.n_states)
    mode = DiscountedEpisodic(config.gamma)
    rec = _CurveRecorder(config.seed)

    def evaluate(steps: int) -> None:
        actions = np.argmax(prefs, axis=1)
        greedy = TabularPolicy.deterministic(actions, train.n_actions)
        value = policy_value(train, greedy, mode)
        value_full = policy_value(base, to_base(actions), mode) if transformed else value
        rec.record_eval(steps, value, value_full)

    steps_seen = 0
    evaluate(steps_seen)
    for episode in range(config.episodes):
        state = _sample_index(rho_cum, gen.random())
        discount_correction = 1.0
        episode_return = 0.0
        for _ in range(train.horizon):
            probs = _softmax(prefs[state])
            action = _sample_index(np.cumsum(probs), gen.random())
            nxt = _sample_index(cum_p[state, action], gen.random())
            reward = float(rewards[state, action, nxt])
            td_error = reward + config.gamma * values[nxt] - values[state]
            values[state] += config.alpha * td_error
            grad = -probs
            grad[action] += 1.0
            prefs[state] += config.beta * discount_correction * td_error * grad
            discount_correction *= config.gamma
            steps_seen += 1
            episode_return += reward
            state = nxt
            if train.is_terminal(state):
                break
        rec.episode_end_steps.append(steps_seen)
        rec.episode_returns.append(episode_return)
        if (episode + 1) % config.eval_every_episodes == 0 or episode + 1 == config.episodes:
            evaluate(steps_seen)
    return prefs, values, rec.finish()


# -- cross-entropy search on the pendulum ----------------------------------


def pendulum_features(spec: PendulumSpec, states: np.ndarray) -> np.ndarray:
    """Feedback features (angle error from upright, angular velocity)."""
    states = np.atleast_2d(states)
    err = (states[:, 0] - spec.upright + np.pi) % (2.0 * np.pi) - np.pi
    return np.stack([err, states[:, 1]], axis=1)


def pendulum_policy_action(spec: PendulumSpec, weights: np.ndarray, state: np.ndarray) -> float:
    feats = pendulum_features(spec, state)[0]
    return float(np.clip(feats @ weights, -spec.u_max, spec.u_max))


def _batch_pendulum_episodes(
    spec: PendulumSpec,
    weight_rows: np.ndarray,
    starts: np.ndarray,
    support: ContinuousBox | None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run one episode per weight row; returns (returns, steps_used, final_abs_err).

    With a support box, an episode stops accruing reward and steps as soon as
    its state leaves the box (the e-stop fires on the landing state).
    """
    n = weight_rows.shape[0]
    theta = starts[:, 0].copy()
    omega = starts[:, 1].copy()
    active = np.ones(n, dtype=bool)
    returns = np.zeros(n)
    steps_used = np.zeros(n, dtype=int)
    g_over_l = spec.gravity / spec.length
    inertia = spec.mass * spec.length**2
    for _ in range(spec.episode_length):
        if not active.any():
            break
        err = (theta - spec.upright + np.pi) % (2.0 * np.pi) - np.pi
        u = np.clip(err * weight_rows[:, 0] + omega * weight_rows[:, 1], -spec.u_max, spec.u_max)
        accel = g_over_l * np.sin(theta) + u / inertia
        omega_next = np.clip(omega + spec.dt * accel, -spec.v_max, spec.v_max)
        theta_next = theta + spec.dt * omega_next
        err_next = (theta_next - spec.upright + np.pi) % (2.0 * np.pi) - np.pi
        cost = err_next**2 + 0.1 * omega_next**2 + 0.001 * u**2
        reward = 1.0 - cost / spec.max_cost
        theta = np.where(active, theta_next, theta)
        omega = np.where(active, omega_next, omega)
        returns += np.where(active, reward, 0.0)
        steps_used += active
        if support is not None:
            inside = (
                (theta >= support.lo[0])
                & (theta <= support.hi[0])
                & (omega >= support.lo[1])
                & (omega <= support.hi[1])
            )
            # the exit transition itself yields no reward
            exited = active & ~inside
            returns -= np.where(exited, reward, 0.0)
            active = active & inside
    final_err = np.abs((theta - spec.upright + np.pi) % (2.0 * np.pi) - np.pi)
    return returns, steps_used, final_err


def evaluate_pendulum_policy(
    spec: PendulumSpec, weights: np.ndarray, starts: np.ndarray
) -> tuple[float, float]:
    """Deterministic full-environment evaluation from fixed starts; returns
    (mean return, mean |angle error| over the last 50 steps)."""
    n = starts.shape[0]
    theta = starts[:, 0].copy()
    omega = starts[:, 1].copy()
    total = np.zeros(n)
    tail_window = min(50, spec.episode_length)
    tail_err = np.zeros(n)
    for step in range(spec.episode_length):
        err = (theta - spec.upright + np.pi) % (2.0 * np.pi) - np.pi
        u = np.clip(err * weights[0] + omega * weights[1], -spec.u_max, spec.u_max)
        accel = (spec.gravity / spec.length) * np.sin(theta) + u / (spec.mass * spec.length**2)
        omega = np.clip(omega + spec.dt * accel, -spec.v_max, spec.v_max)
        theta = theta + spec.dt * omega
        err_next = np.abs((theta - spec.upright + np.pi) % (2.0 * np.pi) - np.pi)
        cost = err_next**2 + 0.1 * omega**2 + 0.001 * u**2
        total += 1.0 - cost / spec.max_cost
        if step >= spec.episode_length - tail_window:
            tail_err += err_next
    return float(total.mean()), float(tail_err.mean() / tail_window)


def cross_entropy_search(
    spec: PendulumSpec,
    support: ContinuousBox | None,
    config: LearnerConfig,
    n_eval_starts: int = 8,
) -> tuple[np.ndarray, LearningCurve]:
    """Elite refitting of a diagonal Gaussian over linear feedback gains.

    Each iteration samples `population` weight vectors, rolls out one episode
    apiece (optionally truncated by the support box), and refits the sampler
    to the elite fraction. The running mean policy is evaluated after every
    iteration in the full environment from a fixed set of starts.
    """
    gen = as_generator(config.seed)
    eval_gen = as_generator(np.random.SeedSequence((config.seed, 0xE57A9)))
    eval_starts = np.stack(
        [
            spec.upright + eval_gen.uniform(-spec.start_angle_spread, spec.start_angle_spread, n_eval_starts),
            eval_gen.uniform(-spec.start_velocity_spread, spec.start_velocity_spread, n_eval_starts),
        ],
        axis=1,
    )
    mean = np.zeros(2)
    std = np.full(2, config.init_weight_scale * 4.0)
    n_elite = max(1, int(round(config.elite_fraction * config.population)))
    rec = _CurveRecorder(config.seed)
    steps_seen = 0

    ret0, _ = evaluate_pendulum_policy(spec, mean, eval_starts)
    rec.record_eval(0, ret0, ret0)
    for _ in range(config.iterations):
        weight_rows = mean + std * gen.standard_normal((config.population, 2))
        starts = np.stack(
            [
                spec.upright + gen.uniform(-spec.start_angle_spread, spec.start_angle_spread, config.population),
                gen.uniform(-spec.start_velocity_spread, spec.start_velocity_spread, config.population),
            ],
            axis=1,
        )
        returns, steps_used, _ = _batch_pendulum_episodes(spec, weight_rows, starts, support)
        order = np.argsort(-returns, kind="stable")
        elite = weight_rows[order[:n_elite]]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), 1e-6)
        rec.episode_end_steps.extend((steps_seen + np.cumsum(steps_used)).tolist())
        rec.episode_returns.extend(returns.tolist())
        steps_seen += int(steps_used.sum())
        ret, _ = evaluate_pendulum_policy(spec, mean, eval_starts)
        rec.record_eval(steps_seen, ret, ret)
    return mean, rec.finish()
