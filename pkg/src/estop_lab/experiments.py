"""Experiment protocols: value-iteration sweeps over removal fractions,
multi-seed learning comparisons on the base and e-stop environments, and
ablations over expert quality and demo count.

All outputs are plain CSV tables carrying the config hash; a config rerun
with the same seeds reproduces them byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from .envs import NAMED_MAPS, FrozenLakeSpec, build_frozenlake, load_map
from .estimation import (
    build_support_by_budget,
    build_support_by_fraction,
    estimate_visit_stats,
)
from .fileio import _format_float, load_demos
from .learners import LearnerConfig, LearningCurve, actor_critic, q_learning
from .mdp import (
    DiscountedEpisodic,
    TabularMdp,
    TabularPolicy,
    as_generator,
    average_state_distribution,
    policy_value,
    rollout,
    value_iteration,
)
from .support import CompactEStop, StateSet, build_estop_mdp, compact_estop_mdp, rho0_support


class ConfigError(ValueError):
    """The experiment configuration is malformed."""


class InfeasibleError(RuntimeError):
    """The configured instance cannot produce a usable result."""


@dataclass(frozen=True)
class EnvironmentConfig:
    kind: str = "frozenlake"
    map: str = "classic8x8"
    hole_escape_prob: float = 0.01
    horizon: int = 200

    def build(self) -> TabularMdp:
        if self.kind != "frozenlake":
            raise ConfigError(f"unknown environment kind {self.kind!r}")
        if self.map in NAMED_MAPS:
            grid = NAMED_MAPS[self.map]
        elif Path(self.map).exists():
            grid = load_map(self.map)
        else:
            raise ConfigError(f"unknown map {self.map!r} (not a named map or a readable file)")
        spec = FrozenLakeSpec(grid=grid, hole_escape_prob=self.hole_escape_prob, horizon=self.horizon)
        return build_frozenlake(spec)


@dataclass(frozen=True)
class ExpertConfig:
    source: str = "vi-optimal"  # vi-optimal | noisy-q | demo-file
    sigma: float = 0.0
    demo_path: str = ""
    seed: int = 0


@dataclass(frozen=True)
class RemovalConfig:
    rule: str = "fraction-h-hat"  # budget | fraction-h-hat | fraction-rho-hat
    fraction: float = 0.5
    budget: float = 0.0
    sweep_step: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError("removal fraction must lie in [0, 1]")
        if self.budget < 0:
            raise ConfigError("removal budget must be nonnegative")


@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentConfig = EnvironmentConfig()
    expert: ExpertConfig = ExpertConfig()
    removal: RemovalConfig = RemovalConfig()
    learner: LearnerConfig = LearnerConfig()
    n_demos: int = 1000
    demo_seed: int = 9000
    trials: tuple[int, ...] = tuple(range(20))
    output_dir: str = "estop-lab-out"
    grid_step: int = 1000
    sigma_grid: tuple[float, ...] = (0.0, 0.1, 0.3, 1.0, 3.0)
    demo_count_grid: tuple[int, ...] = (10, 30, 100, 300, 1000)

    def __post_init__(self):
        if not self.trials:
            raise ConfigError("trials must be a nonempty seed list")
        if self.n_demos < 1:
            raise ConfigError("n_demos must be positive")
        if self.grid_step < 1:
            raise ConfigError("grid_step must be positive")


_SECTION_TYPES = {
    "environment": EnvironmentConfig,
    "expert": ExpertConfig,
    "removal": RemovalConfig,
    "learner": LearnerConfig,
}


def config_from_dict(doc: dict) -> ExperimentConfig:
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            cls = _SECTION_TYPES[key]
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a table/object")
            allowed = set(cls.__dataclass_fields__)
            unknown = set(value) - allowed
            if unknown:
                raise ConfigError(f"section {key!r} has unknown keys {sorted(unknown)}")
            try:
                kwargs[key] = cls(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"section {key!r}: {exc}") from None
        elif key in ExperimentConfig.__dataclass_fields__:
            if key in ("trials", "sigma_grid", "demo_count_grid"):
                value = tuple(value)
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a TOML or JSON experiment config."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() in (".toml", ".tml"):
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc)


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def worker_count() -> int:
    """Worker pool size, capped by the ESTOP_LAB_THREADS environment variable."""
    cap = os.environ.get("ESTOP_LAB_THREADS")
    available = os.cpu_count() or 1
    if cap is not None:
        try:
            return max(1, min(int(cap), available))
        except ValueError:
            raise ConfigError(f"ESTOP_LAB_THREADS={cap!r} is not an integer") from None
    return available


# -- expert and support construction ----------------------------------------


def solve_expert(mdp: TabularMdp, expert_cfg: ExpertConfig, gamma: float) -> TabularPolicy:
    mode = DiscountedEpisodic(gamma)
    result = value_iteration(mdp, mode)
    if expert_cfg.source == "vi-optimal":
        return result.policy
    if expert_cfg.source == "noisy-q":
        q = mdp.expected_rewards + gamma * np.einsum("saz,z->sa", mdp.P, result.values)
        gen = as_generator(expert_cfg.seed)
        noisy = q + expert_cfg.sigma * gen.standard_normal(q.shape)
        return TabularPolicy.deterministic(np.argmax(noisy, axis=1), mdp.n_actions)
    raise ConfigError(f"unknown expert source {expert_cfg.source!r}")


def collect_demos(mdp: TabularMdp, expert: TabularPolicy, n: int, seed: int) -> list:
    gen = as_generator(seed)
    return [rollout(mdp, expert, gen) for _ in range(n)]


def support_from_demos(mdp: TabularMdp, demos, removal: RemovalConfig) -> StateSet:
    stats = estimate_visit_stats(demos, mdp.horizon, mdp.n_states)
    protect = rho0_support(mdp)
    if removal.rule == "budget":
        return build_support_by_budget(stats.h_hat, removal.budget, protect)
    if removal.rule == "fraction-h-hat":
        return build_support_by_fraction(stats.h_hat, removal.fraction, protect)
    if removal.rule == "fraction-rho-hat":
        return build_support_by_fraction(stats.rho_hat, removal.fraction, protect)
    raise ConfigError(f"unknown removal rule {removal.rule!r}")


def expert_demos_for_config(config: ExperimentConfig, mdp: TabularMdp) -> tuple[TabularPolicy | None, list]:
    if config.expert.source == "demo-file":
        if not config.expert.demo_path:
            raise ConfigError("expert.source=demo-file requires expert.demo_path")
        return None, load_demos(config.expert.demo_path)
    expert = solve_expert(mdp, config.expert, config.learner.gamma)
    return expert, collect_demos(mdp, expert, config.n_demos, config.demo_seed)


# -- value-iteration sweep ----------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    n_removed: int
    n_kept: int
    value_estop: float
    value_full_env: float
    sweeps: int
    flops: int
    feasible: bool


def run_vi_sweep(config: ExperimentConfig) -> list[SweepRow]:
    """Progressively remove low-occupancy states and re-solve; stops at the
    first fraction with no feasible path to reward (value 0)."""
    mdp = config.environment.build()
    gamma = config.learner.gamma
    expert = solve_expert(mdp, replace(config.expert, source="vi-optimal"), gamma)
    rho = average_state_distribution(mdp, expert)
    protect = rho0_support(mdp)
    mode = DiscountedEpisodic(gamma)
    rows: list[SweepRow] = []
    fraction = 0.0
    while fraction <= 1.0 + 1e-12:
        support = build_support_by_fraction(rho, min(fraction, 1.0), protect)
        compact = compact_estop_mdp(build_estop_mdp(mdp, support))
        result = value_iteration(compact.mdp, mode)
        value_estop = float(compact.mdp.rho0 @ result.values)
        base_policy = TabularPolicy.deterministic(
            compact.expand_actions(np.argmax(
                compact.mdp.expected_rewards + gamma * np.einsum("saz,z->sa", compact.mdp.P, result.values),
                axis=1,
            )),
            mdp.n_actions,
        )
        value_full = policy_value(mdp, base_policy, mode)
        feasible = value_estop > 1e-12
        rows.append(
            SweepRow(
                fraction=round(fraction, 10),
                n_removed=mdp.n_states - len(support.kept_states),
                n_kept=len(support.kept_states),
                value_estop=value_estop,
                value_full_env=value_full,
                sweeps=result.sweeps,
                flops=result.flop_count,
                feasible=feasible,
            )
        )
        if not feasible:
            break
        fraction += config.removal.sweep_step
    return rows


def sweep_to_csv(rows: Sequence[SweepRow], config: ExperimentConfig) -> str:
    lines = [f"# config_hash={config_hash(config)}"]
    lines.append("fraction,n_removed,n_kept,value_estop,value_full_env,sweeps,flops,feasible")
    for row in rows:
        lines.append(
            ",".join(
                [
                    _format_float(row.fraction),
                    str(row.n_removed),
                    str(row.n_kept),
                    _format_float(row.value_estop),
                    _format_float(row.value_full_env),
                    str(row.sweeps),
                    str(row.flops),
                    str(int(row.feasible)),
                ]
            )
        )
    return "\n".join(lines) + "\n"


# -- learning-curve aggregation ----------------------------------------------


@dataclass(frozen=True)
class AggregateCurve:
    """Per-grid-point statistics across trials (only trials covering an x
    contribute there, with linear interpolation inside each trial)."""

    xs: np.ndarray
    median: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    low: np.ndarray
    high: np.ndarray
    n_covering: np.ndarray

    def states_to_reach(self, level: float) -> float | None:
        """First grid x whose median meets `level` times the final median."""
        if self.xs.size == 0:
            return None
        target = level * self.median[-1]
        hit = np.nonzero(self.median >= target - 1e-12)[0]
        return float(self.xs[hit[0]]) if hit.size else None


def aggregate_curves(
    curves: Sequence[LearningCurve], grid_step: int = 1000, use_full_env_values: bool = True
) -> AggregateCurve:
    if not curves:
        raise ValueError("need at least one curve")
    max_x = max(float(c.states_seen[-1]) for c in curves)
    grid = np.arange(0.0, max_x + grid_step, grid_step)
    grid = grid[grid <= max_x + 1e-9]
    columns = []
    for x in grid:
        vals = []
        for c in curves:
            if c.states_seen[0] <= x <= c.states_seen[-1]:
                ys = c.eval_return_full if use_full_env_values else c.eval_return
                vals.append(float(np.interp(x, c.states_seen, ys)))
        columns.append(vals)
    keep = [i for i, vals in enumerate(columns) if vals]
    xs = grid[keep]
    stats = [columns[i] for i in keep]
    return AggregateCurve(
        xs=xs,
        median=np.array([float(np.median(v)) for v in stats]),
        mean=np.array([float(np.mean(v)) for v in stats]),
        std=np.array([float(np.std(v)) for v in stats]),
        low=np.array([float(np.min(v)) for v in stats]),
        high=np.array([float(np.max(v)) for v in stats]),
        n_covering=np.array([len(v) for v in stats]),
    )


def aggregate_to_csv(agg: AggregateCurve, config: ExperimentConfig) -> str:
    lines = [f"# config_hash={config_hash(config)}"]
    lines.append("states_seen,median,mean,std,min,max,n_trials")
    for i in range(agg.xs.size):
        lines.append(
            ",".join(
                [
                    _format_float(agg.xs[i]),
                    _format_float(agg.median[i]),
                    _format_float(agg.mean[i]),
                    _format_float(agg.std[i]),
                    _format_float(agg.low[i]),
                    _format_float(agg.high[i]),
                    str(int(agg.n_covering[i])),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def raw_curves_to_csv(curves: Sequence[LearningCurve], config: ExperimentConfig) -> str:
    lines = [f"# config_hash={config_hash(config)}"]
    lines.append("states_seen,eval_return,seed")
    for curve in curves:
        for x, y in zip(curve.states_seen, curve.eval_return_full):
            lines.append(f"{_format_float(x)},{_format_float(y)},{curve.seed}")
    return "\n".join(lines) + "\n"


# -- the learning experiment ---------------------------------------------------


def _run_trial(instance, learner_cfg: LearnerConfig, seed: int) -> LearningCurve:
    cfg = replace(learner_cfg, seed=seed)
    if cfg.algorithm == "q_learning":
        return q_learning(instance, cfg)[1]
    if cfg.algorithm == "actor_critic":
        return actor_critic(instance, cfg)[2]
    raise ConfigError(f"unknown tabular learner {cfg.algorithm!r}")


@dataclass(frozen=True)
class LearningExperimentResult:
    config: ExperimentConfig
    estop_curves: tuple[LearningCurve, ...]
    full_curves: tuple[LearningCurve, ...]
    estop_aggregate: AggregateCurve
    full_aggregate: AggregateCurve
    value_optimal: float
    value_estop_optimal: float
    value_estop_optimal_in_base: float
    n_kept: int
    failures: tuple[str, ...]

    def speedup_ratio(self, level: float = 0.9) -> float | None:
        """How many times fewer states the e-stop run needs to reach `level`
        of its own asymptote, compared to the full run."""
        estop_x = self.estop_aggregate.states_to_reach(level)
        full_x = self.full_aggregate.states_to_reach(level)
        if estop_x is None or full_x is None or estop_x <= 0:
            return None
        return full_x / estop_x


def run_learning_experiment(config: ExperimentConfig) -> LearningExperimentResult:
    """Train the configured learner on the full MDP and its learned e-stop
    variant across every trial seed and aggregate both curve families."""
    mdp = config.environment.build()
    expert, demos = expert_demos_for_config(config, mdp)
    support = support_from_demos(mdp, demos, config.removal)
    compact = compact_estop_mdp(build_estop_mdp(mdp, support))
    gamma = config.learner.gamma
    mode = DiscountedEpisodic(gamma)

    vi_full = value_iteration(mdp, mode)
    value_optimal = float(mdp.rho0 @ vi_full.values)
    vi_estop = value_iteration(compact.mdp, mode)
    value_estop_optimal = float(compact.mdp.rho0 @ vi_estop.values)
    estop_actions = np.argmax(
        compact.mdp.expected_rewards + gamma * np.einsum("saz,z->sa", compact.mdp.P, vi_estop.values), axis=1
    )
    value_estop_in_base = policy_value(
        mdp, TabularPolicy.deterministic(compact.expand_actions(estop_actions), mdp.n_actions), mode
    )

    jobs = [("estop", compact, seed) for seed in config.trials]
    jobs += [("full", mdp, seed) for seed in config.trials]
    n_jobs = min(worker_count(), len(jobs))

    def run_one(arm, instance, seed):
        try:
            return arm, seed, _run_trial(instance, config.learner, seed), None
        except Exception as exc:  # noqa: BLE001 - failures are recorded, not fatal
            return arm, seed, None, f"{arm} trial seed={seed}: {exc}"

    if n_jobs > 1:
        results = Parallel(n_jobs=n_jobs)(delayed(run_one)(*job) for job in jobs)
    else:
        results = [run_one(*job) for job in jobs]

    estop_curves, full_curves, failures = [], [], []
    for arm, seed, curve, failure in results:
        if failure is not None:
            failures.append(failure)
        elif arm == "estop":
            estop_curves.append(curve)
        else:
            full_curves.append(curve)
    if len(estop_curves) < (len(config.trials) + 1) // 2 or len(full_curves) < (len(config.trials) + 1) // 2:
        raise InfeasibleError(f"more than half the trials failed: {failures}")

    return LearningExperimentResult(
        config=config,
        estop_curves=tuple(estop_curves),
        full_curves=tuple(full_curves),
        estop_aggregate=aggregate_curves(estop_curves, config.grid_step),
        full_aggregate=aggregate_curves(full_curves, config.grid_step),
        value_optimal=value_optimal,
        value_estop_optimal=value_estop_optimal,
        value_estop_optimal_in_base=value_estop_in_base,
        n_kept=len(support.kept_states),
        failures=tuple(failures),
    )


def write_learning_outputs(result: LearningExperimentResult, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    files = {
        "estop_curves.csv": raw_curves_to_csv(result.estop_curves, cfg),
        "full_curves.csv": raw_curves_to_csv(result.full_curves, cfg),
        "estop_aggregate.csv": aggregate_to_csv(result.estop_aggregate, cfg),
        "full_aggregate.csv": aggregate_to_csv(result.full_aggregate, cfg),
        "summary.csv": _summary_csv(result),
    }
    written = []
    for name, text in files.items():
        path = out / name
        path.write_text(text)
        written.append(path)
    return written


def _summary_csv(result: LearningExperimentResult) -> str:
    ratio = result.speedup_ratio()
    lines = [f"# config_hash={config_hash(result.config)}"]
    lines.append("key,value")
    rows = [
        ("value_optimal", _format_float(result.value_optimal)),
        ("value_estop_optimal", _format_float(result.value_estop_optimal)),
        ("value_estop_optimal_in_base", _format_float(result.value_estop_optimal_in_base)),
        ("n_kept", str(result.n_kept)),
        ("speedup_ratio_90", _format_float(ratio) if ratio is not None else "nan"),
        ("n_failures", str(len(result.failures))),
    ]
    lines.extend(f"{k},{v}" for k, v in rows)
    return "\n".join(lines) + "\n"


# -- ablations -----------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    parameter: float
    value_estop: float
    value_estop_in_base: float
    n_kept: int


def run_ablation(config: ExperimentConfig, kind: str) -> list[AblationRow]:
    """Exact e-stop optimum as a function of expert noise or demo count."""
    mdp = config.environment.build()
    gamma = config.learner.gamma
    mode = DiscountedEpisodic(gamma)
    rows: list[AblationRow] = []

    def solve_support(support: StateSet) -> tuple[float, float, int]:
        compact = compact_estop_mdp(build_estop_mdp(mdp, support))
        result = value_iteration(compact.mdp, mode)
        value_estop = float(compact.mdp.rho0 @ result.values)
        actions = np.argmax(
            compact.mdp.expected_rewards + gamma * np.einsum("saz,z->sa", compact.mdp.P, result.values), axis=1
        )
        in_base = policy_value(
            mdp, TabularPolicy.deterministic(compact.expand_actions(actions), mdp.n_actions), mode
        )
        return value_estop, in_base, len(support.kept_states)

    if kind == "expert-noise":
        for i, sigma in enumerate(config.sigma_grid):
            expert_cfg = replace(config.expert, source="noisy-q", sigma=sigma, seed=config.expert.seed + i)
            expert = solve_expert(mdp, expert_cfg, gamma)
            demos = collect_demos(mdp, expert, config.n_demos, config.demo_seed)
            support = support_from_demos(mdp, demos, config.removal)
            rows.append(AblationRow(sigma, *solve_support(support)))
        return rows
    if kind == "demo-count":
        expert = solve_expert(mdp, replace(config.expert, source="vi-optimal"), gamma)
        all_demos = collect_demos(mdp, expert, max(config.demo_count_grid), config.demo_seed)
        for n in config.demo_count_grid:
            support = support_from_demos(mdp, all_demos[:n], config.removal)
            rows.append(AblationRow(float(n), *solve_support(support)))
        return rows
    raise ConfigError(f"unknown ablation kind {kind!r}")


def ablation_to_csv(rows: Sequence[AblationRow], config: ExperimentConfig, kind: str) -> str:
    lines = [f"# config_hash={config_hash(config)}"]
    lines.append(f"{'sigma' if kind == 'expert-noise' else 'n_demos'},value_estop,value_estop_in_base,n_kept")
    for row in rows:
        lines.append(
            ",".join(
                [
                    _format_float(row.parameter),
                    _format_float(row.value_estop),
                    _format_float(row.value_estop_in_base),
                    str(row.n_kept),
                ]
            )
        )
    return "\n".join(lines) + "\n"
