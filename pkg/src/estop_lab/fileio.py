"""Document formats: MDPs and policies as JSON, demos as JSON lines, support
sets as JSON, curves and visitation statistics as CSV.

Loaders validate every structural invariant and point at the offending entry
(`transitions[17]: ...`) so malformed files fail loudly.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .estimation import VisitStats
from .learners import LearningCurve
from .mdp import TabularMdp, TabularPolicy, Trajectory, TrajectoryStep
from .support import ContinuousBox, StateSet, SupportSet, TimeIndexedSets, VisitCountBudget


class FormatError(ValueError):
    """A document failed structural validation."""


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise FormatError(f"{where}: missing field {key!r}")
    return doc[key]


# -- MDP documents ----------------------------------------------------------


def mdp_to_dict(mdp: TabularMdp) -> dict:
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "horizon": mdp.horizon,
        "rho0": mdp.rho0.tolist(),
        "terminals": sorted(mdp.terminal_states),
        "transitions": [
            {"s": s, "a": a, "s2": s2, "p": p, "r": r} for s, a, s2, p, r in mdp.transition_entries()
        ],
    }


def mdp_from_dict(doc: dict) -> TabularMdp:
    where = "mdp document"
    entries = []
    raw = _require(doc, "transitions", where)
    for i, item in enumerate(raw):
        loc = f"transitions[{i}]"
        if not isinstance(item, dict):
            raise FormatError(f"{loc}: expected an object, got {type(item).__name__}")
        try:
            entries.append(
                (int(item["s"]), int(item["a"]), int(item["s2"]), float(item["p"]), float(item["r"]))
            )
        except KeyError as exc:
            raise FormatError(f"{loc}: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{loc}: {exc}") from None
    try:
        return TabularMdp(
            n_states=int(_require(doc, "n_states", where)),
            n_actions=int(_require(doc, "n_actions", where)),
            horizon=int(_require(doc, "horizon", where)),
            rho0=_require(doc, "rho0", where),
            transitions=entries,
            terminal_states=doc.get("terminals", ()),
        )
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_mdp(mdp: TabularMdp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp), indent=1) + "\n")


def load_mdp(path: str | Path) -> TabularMdp:
    return mdp_from_dict(json.loads(Path(path).read_text()))


# -- policy documents -------------------------------------------------------


def policy_to_dict(policy: TabularPolicy) -> dict:
    return {
        "mode": "time_dependent" if policy.time_dependent else "stationary",
        "probs": policy.probs.tolist(),
    }


def policy_from_dict(doc: dict) -> TabularPolicy:
    mode = _require(doc, "mode", "policy document")
    if mode not in ("stationary", "time_dependent"):
        raise FormatError(f"policy document: unknown mode {mode!r}")
    try:
        return TabularPolicy(np.asarray(_require(doc, "probs", "policy document"), dtype=float),
                             time_dependent=mode == "time_dependent")
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_policy(policy: TabularPolicy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(policy)) + "\n")


def load_policy(path: str | Path) -> TabularPolicy:
    return policy_from_dict(json.loads(Path(path).read_text()))


# -- support-set documents --------------------------------------------------


def support_to_dict(support: SupportSet) -> dict:
    if isinstance(support, StateSet):
        return {"variant": "state_set", "kept_states": sorted(support.kept_states)}
    if isinstance(support, TimeIndexedSets):
        return {"variant": "time_indexed", "sets": [sorted(group) for group in support.sets]}
    if isinstance(support, VisitCountBudget):
        return {"variant": "visit_count", "budgets": list(support.budgets)}
    if isinstance(support, ContinuousBox):
        return {"variant": "box", "lo": support.lo.tolist(), "hi": support.hi.tolist()}
    raise TypeError(f"unknown support set type {type(support)!r}")


def support_from_dict(doc: dict) -> SupportSet:
    variant = _require(doc, "variant", "support document")
    try:
        if variant == "state_set":
            return StateSet(_require(doc, "kept_states", "support document"))
        if variant == "time_indexed":
            return TimeIndexedSets(_require(doc, "sets", "support document"))
        if variant == "visit_count":
            return VisitCountBudget(_require(doc, "budgets", "support document"))
        if variant == "box":
            return ContinuousBox(_require(doc, "lo", "support document"), _require(doc, "hi", "support document"))
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    raise FormatError(f"support document: unknown variant {variant!r}")


def save_support(support: SupportSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(support_to_dict(support)) + "\n")


def load_support(path: str | Path) -> SupportSet:
    return support_from_dict(json.loads(Path(path).read_text()))


# -- demonstration files (JSON lines) ---------------------------------------


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {
        "states": traj.states,
        "actions": traj.actions,
        "rewards": traj.rewards,
        "cause": traj.termination_cause,
    }


def trajectory_from_dict(doc: dict, where: str = "demo") -> Trajectory:
    states = _require(doc, "states", where)
    actions = _require(doc, "actions", where)
    rewards = _require(doc, "rewards", where)
    if len(states) != len(actions) + 1 or len(actions) != len(rewards):
        raise FormatError(
            f"{where}: lengths must satisfy len(states) == len(actions)+1 == len(rewards)+1, "
            f"got {len(states)}/{len(actions)}/{len(rewards)}"
        )
    steps = tuple(
        TrajectoryStep(t, int(states[t]), int(actions[t]), float(rewards[t]), int(states[t + 1]))
        for t in range(len(actions))
    )
    cause = doc.get("cause", "horizon")
    if cause not in ("horizon", "terminal_state", "estop"):
        raise FormatError(f"{where}: unknown termination cause {cause!r}")
    return Trajectory(steps, terminated_early=cause != "horizon", termination_cause=cause)


def save_demos(demos: Iterable[Trajectory], path: str | Path) -> None:
    with open(path, "w") as fh:
        for traj in demos:
            fh.write(json.dumps(trajectory_to_dict(traj)) + "\n")


def load_demos(path: str | Path) -> list[Trajectory]:
    demos = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            demos.append(trajectory_from_dict(json.loads(line), where=f"{path}:{lineno}"))
    return demos


# -- CSV exports -------------------------------------------------------------


def _format_float(x: float) -> str:
    return np.format_float_positional(float(x), unique=True, trim="0")


def visit_stats_to_csv(stats: VisitStats) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["state", "h_hat", "rho_hat", "var_varrho"])
    for s in range(stats.n_states):
        writer.writerow(
            [s, _format_float(stats.h_hat[s]), _format_float(stats.rho_hat[s]), _format_float(stats.sample_variance[s])]
        )
    return buf.getvalue()


def curve_to_csv(curves: Sequence[LearningCurve], use_full_env_values: bool = True) -> str:
    """`states_seen,eval_return,seed` rows for one or more trials."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["states_seen", "eval_return", "seed"])
    for curve in curves:
        ys = curve.eval_return_full if use_full_env_values else curve.eval_return
        for x, y in zip(curve.states_seen, ys):
            writer.writerow([_format_float(x), _format_float(y), curve.seed])
    return buf.getvalue()


def certificates_to_jsonl(certs, instance_seeds=None) -> str:
    lines = []
    for i, cert in enumerate(certs):
        doc = {
            "theorem": cert.theorem_id,
            "gap": cert.gap,
            "bound": cert.bound_value,
            "holds": cert.holds,
        }
        if instance_seeds is not None:
            doc["instance_seed"] = instance_seeds[i]
        lines.append(json.dumps(doc))
    return "\n".join(lines) + ("\n" if lines else "")
