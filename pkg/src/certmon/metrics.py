"""Evaluation metrics: per-trajectory time fractions and violation counts.

All rates are discrete-time approximations over the observed points of a
trajectory: the safety rate is the fraction of points outside the unsafe
set, the barrier rate the fraction with a nonnegative certificate, the
non-decreasing rate the fraction of eligible consecutive pairs satisfying
the barrier rate condition, and the decreasing rate the fraction of
non-goal pairs along which a Lyapunov certificate strictly decreases.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .certificates import CertCondition
from .envs import BlackBoxEnv, Trajectory, rollout


@dataclass
class EvalReport:
    sr: float
    br: float
    ndr: float
    dr: float | None
    rollouts: int
    per_trajectory: list[dict] = field(default_factory=list)
    violation_counts: dict[str, int] = field(default_factory=dict)


def safety_rate(traj: Trajectory, env: BlackBoxEnv) -> float:
    """Fraction of observed time points outside the unsafe set."""
    unsafe = sum(env.in_unsafe(s) for s in traj.states)
    return 1.0 - unsafe / len(traj)


def _barrier_values(traj: Trajectory, fn) -> np.ndarray:
    if traj.observations is None:
        raise ValueError("trajectory has no recorded observations")
    return fn.value_batch(np.asarray(traj.observations))


def barrier_rate(traj: Trajectory, B) -> float:
    """Fraction of time points inside the invariant set (B >= 0)."""
    return float(np.mean(_barrier_values(traj, B) >= 0.0))


def nondec_stats(traj: Trajectory, B) -> tuple[int, int]:
    """(satisfied, eligible) consecutive pairs for the rate condition;
    pairs whose first point has B < 0 are out of the condition's domain."""
    b = _barrier_values(traj, B)
    gaps = np.diff(np.asarray(traj.times))
    rate = np.diff(b) / gaps
    eligible = b[:-1] >= 0.0
    satisfied = eligible & (rate + b[:-1] >= 0.0)
    return int(np.sum(satisfied)), int(np.sum(eligible))


def nondec_rate(traj: Trajectory, B) -> float:
    """Satisfied fraction of eligible pairs; vacuously 1.0 when no pair is
    eligible (use nondec_stats to detect emptiness)."""
    if len(traj) < 2:
        raise ValueError("need at least two points")
    satisfied, eligible = nondec_stats(traj, B)
    return satisfied / eligible if eligible else 1.0


def decreasing_stats(traj: Trajectory, V, env: BlackBoxEnv) -> tuple[int, int]:
    v = _barrier_values(traj, V)
    gaps = np.diff(np.asarray(traj.times))
    rate = np.diff(v) / gaps
    non_goal = np.array([not env.in_goal(s) for s in traj.states[:-1]])
    satisfied = non_goal & (rate < 0.0)
    return int(np.sum(satisfied)), int(np.sum(non_goal))


def decreasing_rate(traj: Trajectory, V, env: BlackBoxEnv) -> float:
    """Fraction of non-goal consecutive pairs with strictly decreasing V."""
    if len(traj) < 2:
        raise ValueError("need at least two points")
    satisfied, eligible = decreasing_stats(traj, V, env)
    return satisfied / eligible if eligible else 1.0


def count_condition_violations(traj: Trajectory, env: BlackBoxEnv,
                               B=None, V=None,
                               zero_tol: float = 1e-3) -> dict[str, int]:
    """Per-condition violation counts over all observed states; every
    condition that fails at a state is counted (no priority shadowing)."""
    counts = {kind.value: 0 for kind in CertCondition
              if kind is not CertCondition.NONE}
    times = np.asarray(traj.times)
    b = _barrier_values(traj, B) if B is not None else None
    v = _barrier_values(traj, V) if V is not None else None
    for i, state in enumerate(traj.states):
        unsafe = env.in_unsafe(state)
        if unsafe:
            counts[CertCondition.PROPERTY_UNSAFE.value] += 1
        if b is not None:
            if env.in_initial(state) and b[i] < 0:
                counts[CertCondition.INIT.value] += 1
            if b[i] < 0:
                counts[CertCondition.SAFETY.value] += 1
            if i + 1 < len(traj) and b[i] >= 0:
                rate = (b[i + 1] - b[i]) / (times[i + 1] - times[i])
                if rate + b[i] < 0:
                    counts[CertCondition.NON_DECREASING.value] += 1
        if v is not None:
            at_goal = env.in_goal(state)
            if at_goal and abs(v[i]) > zero_tol:
                counts[CertCondition.ZERO_AT_GOAL.value] += 1
            if v[i] < 0:
                counts[CertCondition.POSITIVITY.value] += 1
            if i + 1 < len(traj) and not at_goal and v[i] > 0:
                rate = (v[i + 1] - v[i]) / (times[i + 1] - times[i])
                if rate >= 0:
                    counts[CertCondition.DECREASING.value] += 1
    return counts


def evaluate(env: BlackBoxEnv, policy, barrier=None, lyapunov=None,
             rollouts: int = 50, rng: np.random.Generator | None = None,
             n_steps: int | None = None) -> EvalReport:
    """Metrics averaged over fresh full-horizon rollouts from sampled
    initial states; aggregates are exact means of per-trajectory values."""
    if rollouts < 1:
        raise ValueError("need at least one rollout")
    if rng is None:
        rng = np.random.default_rng(0)
    totals = {kind.value: 0 for kind in CertCondition
              if kind is not CertCondition.NONE}
    rows = []
    for x0 in env.sample_initial_states(rollouts, rng):
        traj = rollout(env.clone(), policy, x0, n_steps)
        row = {"sr": safety_rate(traj, env)}
        if barrier is not None:
            row["br"] = barrier_rate(traj, barrier)
            satisfied, eligible = nondec_stats(traj, barrier)
            row["ndr"] = satisfied / eligible if eligible else 1.0
            row["ndr_eligible_pairs"] = eligible
        if lyapunov is not None:
            row["dr"] = decreasing_rate(traj, lyapunov, env)
        for kind, n in count_condition_violations(traj, env, barrier,
                                                  lyapunov).items():
            totals[kind] += n
        rows.append(row)

    def mean_of(key):
        vals = [r[key] for r in rows if key in r]
        return float(np.mean(vals)) if vals else None

    return EvalReport(
        sr=mean_of("sr"),
        br=mean_of("br") if barrier is not None else None,
        ndr=mean_of("ndr") if barrier is not None else None,
        dr=mean_of("dr") if lyapunov is not None else None,
        rollouts=rollouts,
        per_trajectory=rows,
        violation_counts=totals,
    )


EVAL_CSV_FIELDS = ["SR", "BR", "NDR", "DR", "rollouts"]


def eval_report_to_dict(report: EvalReport) -> dict:
    return {
        "SR": report.sr, "BR": report.br, "NDR": report.ndr, "DR": report.dr,
        "rollouts": report.rollouts,
        "violation_counts": dict(report.violation_counts),
        "per_trajectory": report.per_trajectory,
    }


def write_eval_csv(report: EvalReport, path) -> None:
    """One aggregate row: rates, rollout count, then per-kind violation
    totals in a stable column order."""
    kinds = sorted(report.violation_counts)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_CSV_FIELDS + [f"violations_{k}" for k in kinds])
        writer.writerow(
            [_fmt(report.sr), _fmt(report.br), _fmt(report.ndr),
             _fmt(report.dr), report.rollouts]
            + [report.violation_counts[k] for k in kinds])


def write_eval_json(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(eval_report_to_dict(report), fh, indent=2, sort_keys=True)


def _fmt(x):
    return "" if x is None else repr(float(x))
