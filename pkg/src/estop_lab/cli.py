"""Command-line front end.

Exit codes: 0 on success, 2 for configuration errors, 3 for infeasible
instances (e.g. a support that cannot host the initial distribution).
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import bounds as bounds_mod
from .envs import NAMED_MAPS, FrozenLakeSpec, build_frozenlake, load_map, random_mdp
from .estimation import estimate_visit_stats, learned_estop, build_support_by_fraction
from .experiments import (
    ConfigError,
    InfeasibleError,
    ablation_to_csv,
    aggregate_to_csv,
    config_hash,
    load_config,
    run_ablation,
    run_learning_experiment,
    run_vi_sweep,
    sweep_to_csv,
    write_learning_outputs,
)
from .fileio import (
    FormatError,
    load_demos,
    load_mdp,
    load_policy,
    save_demos,
    save_mdp,
    save_policy,
    save_support,
    support_to_dict,
    certificates_to_jsonl,
)
from .mdp import DiscountedEpisodic, FiniteHorizon, TabularPolicy, as_generator, rollout, value_iteration
from .support import StateSet, build_estop_mdp, rho0_support


class CliError(click.ClickException):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def _config_error(message: str) -> CliError:
    return CliError(message, exit_code=2)


def _infeasible(message: str) -> CliError:
    return CliError(message, exit_code=3)


def _wrap_errors(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, FormatError) as exc:
        raise _config_error(str(exc)) from None
    except InfeasibleError as exc:
        raise _infeasible(str(exc)) from None


@click.group()
def main():
    """Build e-stop MDP variants, learn on them, and certify their bounds."""


# -- mdp ---------------------------------------------------------------------


@main.group()
def mdp():
    """Create and inspect MDP documents."""


@mdp.command("build-frozenlake")
@click.option("--map", "map_name", default="classic8x8", show_default=True, help="Named map or a map file path.")
@click.option("--hole-escape", default=0.01, show_default=True)
@click.option("--horizon", default=200, show_default=True)
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False))
def build_frozenlake_cmd(map_name, hole_escape, horizon, out):
    """Write the tabular MDP for a FrozenLake map."""
    if map_name in NAMED_MAPS:
        grid = NAMED_MAPS[map_name]
    elif Path(map_name).exists():
        grid = load_map(map_name)
    else:
        raise _config_error(f"unknown map {map_name!r}")
    try:
        spec = FrozenLakeSpec(grid=grid, hole_escape_prob=hole_escape, horizon=horizon)
        save_mdp(build_frozenlake(spec), out)
    except ValueError as exc:
        raise _config_error(str(exc)) from None
    click.echo(f"wrote {out}")


@mdp.command("random")
@click.option("--states", default=6, show_default=True)
@click.option("--actions", default=3, show_default=True)
@click.option("--horizon", default=5, show_default=True)
@click.option("--sparsity", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False))
def random_mdp_cmd(states, actions, horizon, sparsity, seed, out):
    """Generate a random valid instance (property-test fodder)."""
    save_mdp(random_mdp(states, actions, horizon, sparsity, seed), out)
    click.echo(f"wrote {out}")


# -- expert -------------------------------------------------------------------


@main.group()
def expert():
    """Solve for expert policies."""


@expert.command("solve")
@click.option("--mdp", "mdp_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", "mode_name", default="discounted", type=click.Choice(["discounted", "finite-horizon"]), show_default=True)
@click.option("--gamma", default=0.99, show_default=True)
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False))
def expert_solve(mdp_path, mode_name, gamma, out):
    """Value-iteration optimum of an MDP document."""
    instance = _wrap_errors(load_mdp, mdp_path)
    mode = DiscountedEpisodic(gamma) if mode_name == "discounted" else FiniteHorizon()
    result = value_iteration(instance, mode)
    save_policy(result.policy, out)
    values = result.values if result.values.ndim == 1 else result.values[0]
    click.echo(f"wrote {out} (start value {float(instance.rho0 @ values):.6f}, sweeps {result.sweeps})")


# -- demos --------------------------------------------------------------------


@main.group()
def demos():
    """Produce and summarize demonstration rollouts."""


@demos.command("rollout")
@click.option("--mdp", "mdp_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--policy", "policy_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False))
def demos_rollout(mdp_path, policy_path, n, seed, out):
    """Sample n expert episodes into a JSON-lines demo file."""
    instance = _wrap_errors(load_mdp, mdp_path)
    policy = _wrap_errors(load_policy, policy_path)
    gen = as_generator(seed)
    save_demos((rollout(instance, policy, gen) for _ in range(n)), out)
    click.echo(f"wrote {out} ({n} rollouts)")


# -- estop --------------------------------------------------------------------


@main.group()
def estop():
    """Construct e-stop supports and transformed MDPs."""


@estop.command("learn")
@click.option("--mdp", "mdp_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--demos", "demos_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--xi", default=None, type=float, help="Hitting-probability removal budget.")
@click.option("--fraction", default=None, type=float, help="Remove this fraction of lowest-hitting states.")
@click.option("--support-out", required=True, type=click.Path(dir_okay=False))
@click.option("--mdp-out", default=None, type=click.Path(dir_okay=False), help="Also write the transformed MDP.")
def estop_learn(mdp_path, demos_path, xi, fraction, support_out, mdp_out):
    """Budgeted support construction from state-only demonstrations."""
    if (xi is None) == (fraction is None):
        raise _config_error("provide exactly one of --xi or --fraction")
    instance = _wrap_errors(load_mdp, mdp_path)
    demo_set = _wrap_errors(load_demos, demos_path)
    try:
        if xi is not None:
            transformed = learned_estop(instance, demo_set, xi)
            support = transformed.support
        else:
            stats = estimate_visit_stats(demo_set, instance.horizon, instance.n_states)
            support = build_support_by_fraction(stats.h_hat, fraction, rho0_support(instance))
            transformed = build_estop_mdp(instance, support)
    except ValueError as exc:
        raise _infeasible(str(exc)) from None
    save_support(support, support_out)
    if mdp_out:
        save_mdp(transformed.mdp, mdp_out)
    click.echo(f"kept {len(support.kept_states)}/{instance.n_states} states")


# -- run ----------------------------------------------------------------------


@main.group()
def run():
    """Run configured experiments (TOML or JSON config files)."""


@run.command("vi-sweep")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "-o", default=None, type=click.Path(dir_okay=False))
def run_vi_sweep_cmd(config_path, out):
    """Value of the e-stop optimum as the removal fraction grows."""
    config = _wrap_errors(load_config, config_path)
    rows = _wrap_errors(run_vi_sweep, config)
    text = sweep_to_csv(rows, config)
    if out:
        Path(out).write_text(text)
        click.echo(f"wrote {out} ({len(rows)} rows)")
    else:
        click.echo(text, nl=False)


@run.command("learn")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def run_learn_cmd(config_path):
    """Multi-seed learning comparison on the base and e-stop environments."""
    config = _wrap_errors(load_config, config_path)
    result = _wrap_errors(run_learning_experiment, config)
    written = write_learning_outputs(result, config.output_dir)
    ratio = result.speedup_ratio()
    click.echo(f"config {config_hash(config)}: speedup ratio {ratio if ratio is not None else 'n/a'}")
    for path in written:
        click.echo(f"wrote {path}")


@run.command("ablation")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--kind", required=True, type=click.Choice(["expert-noise", "demo-count"]))
@click.option("--out", "-o", default=None, type=click.Path(dir_okay=False))
def run_ablation_cmd(config_path, kind, out):
    """Exact e-stop optimum across expert noise or demo-count grids."""
    config = _wrap_errors(load_config, config_path)
    rows = _wrap_errors(run_ablation, config, kind)
    text = ablation_to_csv(rows, config, kind)
    if out:
        Path(out).write_text(text)
        click.echo(f"wrote {out} ({len(rows)} rows)")
    else:
        click.echo(text, nl=False)


# -- bounds ---------------------------------------------------------------------


@main.group()
def bounds():
    """Certify sub-optimality bounds."""


@bounds.command("certify")
@click.option("--mdp", "mdp_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--expert", "expert_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--support", "support_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "-o", default=None, type=click.Path(dir_okay=False))
def bounds_certify(mdp_path, expert_path, support_path, out):
    """Certificates for one instance: perfect support, plus the hitting and
    occupancy bounds when a support document is supplied."""
    instance = _wrap_errors(load_mdp, mdp_path)
    policy = _wrap_errors(load_policy, expert_path)
    certs = [bounds_mod.certify_perfect(instance, policy)]
    if support_path:
        from .fileio import load_support

        support = _wrap_errors(load_support, support_path)
        if not isinstance(support, StateSet):
            raise _config_error("certification needs a state_set support document")
        try:
            certs.append(bounds_mod.certify_imperfect(instance, policy, support))
            certs.append(bounds_mod.certify_stationary(instance, policy, support))
        except ValueError as exc:
            raise _infeasible(str(exc)) from None
    text = certificates_to_jsonl(certs)
    if out:
        Path(out).write_text(text)
        click.echo(f"wrote {out}")
    else:
        click.echo(text, nl=False)
    if not all(c.holds for c in certs):
        raise _infeasible("a certificate failed to hold")


@bounds.command("sweep")
@click.option("--instances", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--max-states", default=6, show_default=True)
@click.option("--max-actions", default=3, show_default=True)
@click.option("--max-horizon", default=5, show_default=True)
def bounds_sweep(instances, seed, max_states, max_actions, max_horizon):
    """Randomized certificate sweep; exits nonzero if any instance fails."""
    from .testing import random_certification_sweep

    failures, total = random_certification_sweep(
        instances, seed, max_states=max_states, max_actions=max_actions, max_horizon=max_horizon
    )
    click.echo(f"{total - len(failures)}/{total} certificates hold")
    if failures:
        for line in failures[:10]:
            click.echo(f"FAIL {line}")
        raise _infeasible(f"{len(failures)} certificates failed")


# -- coupon ----------------------------------------------------------------------


@main.command("coupon")
@click.option("--m", "m", required=True, type=int)
@click.option("--n", "n", required=True, type=int)
def coupon_cmd(m, n):
    """Probability that n uniform draws among m events cover every event."""
    try:
        click.echo(json.dumps({"m": m, "n": n, "probability": bounds_mod.coupon_probability(m, n)}))
    except ValueError as exc:
        raise _config_error(str(exc)) from None


# -- serve -------------------------------------------------------------------------


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True)
def serve_cmd(host, port):
    """Start the live supervisor service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":  # pragma: no cover
    main()
