"""Configuration, seeding and the command-line experiment pipeline.

Commands: `train` (initialize and train networks), `repair` (monitor and
retrain existing models), `eval` (metrics over fresh rollouts),
`predpm-trace` (per-step predictive assessments along one rollout) and
`threshold-sweep` (warning percentage as one threshold varies).

All randomness flows from a single master seed through labeled
counter-based streams, so enlarging one budget never perturbs the draws
of another component. Every command writes a manifest with the config
hash, seed and library versions next to its outputs.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .certificates import BarrierFn, LyapunovFn, PolicyFn
from .envs import BlackBoxEnv, ObstacleTrack, make_env, rollout
from .metrics import evaluate, write_eval_csv, write_eval_json
from .monitors import (
    PredThresholds,
    SurrogateCfg,
    predpm_assess,
    predpm_verdict,
)
from .nn import load_mlp, save_mlp
from .repair import RepairConfig, repair_loop
from .training import TrainConfig, train_joint

SCHEMA_VERSION = 1

ENV_OVERRIDE_KEYS = {
    "k_nearest", "h_int", "monitor_dt", "horizon_steps", "goal_radius",
    "agent_radius", "goal_center", "obstacles",
}

CONFIG_KEYS = {
    "env": {"name", "overrides"},
    "network": {"hidden_dims", "cert_hidden_dims"},
    "train": {"epochs", "batch_size", "policy_lr", "cert_lr",
              "rollout_budget", "sample_budget", "with_lyapunov",
              "goal_sample_budget", "policy_warmup_epochs",
              "proximal_weight", "loss_margin"},
    "repair": {"rollout_count", "n_steps", "monitor", "problem", "max_rounds",
               "retrain_epochs", "retrain_batch_size", "eval_rollouts",
               "replay_ratio", "cert_polish_epochs", "retrain_policy_lr",
               "retrain_cert_lr", "retrain_proximal_weight",
               "retrain_policy_warmup_epochs"},
    "predpm": {"a_max", "pred_dt", "pred_steps", "opt_iters", "opt_lr",
               "restarts", "thresholds"},
    "eval_rollouts": None,
    "profile": None,
    "out_dir": None,
    "seed": None,
}

PROFILES = {
    # horizon/rollout scale; the paper-scale profile mirrors the benchmark
    # budgets, the desk profile keeps runs in CI territory
    "desk": {"horizon": {"drone2d": 200, "ship2d": 200}, "repair_rollouts": 200},
    "paper": {"horizon": {"drone2d": 1200, "ship2d": 2000},
              "repair_rollouts": 1000},
}


class ConfigError(ValueError):
    pass


def derive_seed(master: int, *labels) -> int:
    """Stable 64-bit stream key for (master, labels...)."""
    text = f"{master}|" + "|".join(str(x) for x in labels)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(master: int, *labels) -> np.random.Generator:
    """Independent counter-based stream for one pipeline component."""
    return np.random.Generator(np.random.Philox(key=derive_seed(master, *labels)))


def _check_keys(section: str, data: dict, allowed: set) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def validate_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("config", raw, set(CONFIG_KEYS))
    for section, allowed in CONFIG_KEYS.items():
        if allowed is None or section not in raw:
            continue
        if not isinstance(raw[section], dict):
            raise ConfigError(f"section {section!r} must be an object")
        _check_keys(section, raw[section], allowed)
    env = raw.get("env", {})
    overrides = env.get("overrides", {})
    _check_keys("env.overrides", overrides, ENV_OVERRIDE_KEYS)
    profile = raw.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    return raw


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return validate_config(raw)


def build_env(config: dict) -> BlackBoxEnv:
    env_cfg = config.get("env", {})
    name = env_cfg.get("name", "drone2d")
    overrides = dict(env_cfg.get("overrides", {}))
    if "obstacles" in overrides:
        overrides["obstacles"] = [
            ObstacleTrack(np.asarray(o["waypoints"], dtype=float),
                          float(o["period"]), float(o["radius"]))
            for o in overrides["obstacles"]
        ]
    profile = PROFILES[config.get("profile", "desk")]
    overrides.setdefault("horizon_steps", profile["horizon"].get(name, 200))
    try:
        return make_env(name, **overrides)
    except Exception as exc:
        raise ConfigError(f"cannot build environment: {exc}") from None


def build_train_config(config: dict) -> TrainConfig:
    t = dict(config.get("train", {}))
    net = config.get("network", {})
    hidden = tuple(net.get("hidden_dims", (64, 64)))
    cert_hidden = net.get("cert_hidden_dims")
    if cert_hidden is not None:
        cert_hidden = tuple(cert_hidden)
    try:
        return TrainConfig(seed=int(config.get("seed", 0)),
                           hidden_dims=hidden, cert_hidden_dims=cert_hidden,
                           **t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train section: {exc}") from None


def build_surrogate_cfg(config: dict, env: BlackBoxEnv) -> SurrogateCfg:
    p = dict(config.get("predpm", {}))
    p.pop("thresholds", None)
    p.setdefault("a_max", float(np.max(np.abs(env.action_high))))
    try:
        return SurrogateCfg(**p)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad predpm section: {exc}") from None


def build_thresholds(config: dict, override: str | None = None) -> PredThresholds:
    if override is not None:
        parts = override.split(",")
        if len(parts) != 3:
            raise ConfigError("--thresholds must be 'u,s,n'")
        vals = [float(x) for x in parts]
    else:
        vals = config.get("predpm", {}).get("thresholds", [0.0, 0.0, 0.0])
        if len(vals) != 3:
            raise ConfigError("predpm.thresholds must have three entries")
    return PredThresholds(*[float(v) for v in vals])


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(out_dir: Path, config: dict, command: str,
                   extra: dict | None = None) -> None:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": config_hash(config),
        "seed": config.get("seed", 0),
        "versions": {
            "certmon": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        manifest.update(extra)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _out_dir(config, args) -> Path:
    out = Path(getattr(args, "out_dir", None) or config.get("out_dir", "runs/out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


TRAIN_CURVE_FIELDS = ["epoch", "L_Init", "L_Safe", "L_Non-dec", "L_G", "L_D",
                      "total"]


def write_training_curve(curve: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_CURVE_FIELDS)
        for row in curve:
            writer.writerow([row["epoch"], repr(row["init"]), repr(row["safe"]),
                             repr(row["nondec"]), repr(row["goal"]),
                             repr(row["decrease"]), repr(row["total"])])


REPAIR_REPORT_FIELDS = ["round", "flags_total", "flags_by_cause", "SR", "BR",
                        "NDR", "DR", "wall_time"]


def write_repair_report(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPAIR_REPORT_FIELDS)
        for row in rows:
            causes = ";".join(f"{k}={v}"
                              for k, v in sorted(row["flags_by_cause"].items()))
            writer.writerow([
                row["round"], row["flags_total"], causes,
                _cell(row["SR"]), _cell(row["BR"]), _cell(row["NDR"]),
                _cell(row["DR"]), repr(float(row["wall_time"])),
            ])


def _cell(x):
    return "" if x is None else repr(float(x))


def save_models(out_dir: Path, policy: PolicyFn, barrier: BarrierFn | None,
                lyapunov: LyapunovFn | None) -> None:
    save_mlp(policy.net, out_dir / "policy.json", role="policy")
    if barrier is not None:
        save_mlp(barrier.net, out_dir / "barrier.json", role="barrier")
    if lyapunov is not None:
        save_mlp(lyapunov.net, out_dir / "lyapunov.json", role="lyapunov")


def load_models(models_dir, env: BlackBoxEnv):
    models_dir = Path(models_dir)
    net, role = load_mlp(models_dir / "policy.json")
    if role not in (None, "policy"):
        raise ConfigError(f"policy.json carries role {role!r}")
    policy = PolicyFn(net, env.action_low, env.action_high)
    barrier = lyapunov = None
    if (models_dir / "barrier.json").exists():
        bnet, _ = load_mlp(models_dir / "barrier.json")
        barrier = BarrierFn(bnet)
    if (models_dir / "lyapunov.json").exists():
        lnet, _ = load_mlp(models_dir / "lyapunov.json")
        lyapunov = LyapunovFn(lnet)
    return policy, barrier, lyapunov


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cli_train(args) -> int:
    config = load_config(args.config)
    env = build_env(config)
    train_cfg = build_train_config(config)
    rng = derive_rng(train_cfg.seed, "train")
    result = train_joint(env, train_cfg, rng)
    out = _out_dir(config, args)
    save_models(out, result.policy, result.barrier, result.lyapunov)
    write_training_curve(result.curve, out / "training_curve.csv")
    write_manifest(out, config, "train",
                   {"warning": result.warning,
                    "warning_reason": result.warning_reason})
    if result.warning:
        print(f"warning: {result.warning_reason}", file=sys.stderr)
    print(f"trained models written to {out}")
    return 0


def build_repair_config(config: dict, args, env: BlackBoxEnv) -> RepairConfig:
    section = dict(config.get("repair", {}))
    profile = PROFILES[config.get("profile", "desk")]
    monitor = (args.monitor or section.get("monitor", "certpm")).replace("-", "_")
    problem = (args.problem or section.get("problem", "joint")).replace("-", "_")
    rounds = args.rounds if args.rounds is not None else section.get("max_rounds", 1)
    if rounds is not None and rounds < 1:
        raise ConfigError("--rounds must be >= 1")
    retrain = TrainConfig(
        epochs=int(section.get("retrain_epochs", 14)),
        batch_size=int(section.get("retrain_batch_size", 256)),
        policy_lr=float(section.get("retrain_policy_lr", 1e-3)),
        cert_lr=float(section.get("retrain_cert_lr", 1e-3)),
        policy_warmup_epochs=int(section.get("retrain_policy_warmup_epochs", 8)),
        proximal_weight=float(section.get("retrain_proximal_weight", 2.0)),
        hidden_dims=tuple(config.get("network", {}).get("hidden_dims", (64, 64))),
        seed=int(config.get("seed", 0)),
    )
    try:
        return RepairConfig(
            rollout_count=int(section.get("rollout_count",
                                          profile["repair_rollouts"])),
            n_steps=section.get("n_steps"),
            monitor=monitor,
            problem=problem,
            max_rounds=int(rounds),
            retrain=retrain,
            predpm_thresholds=build_thresholds(config, args.thresholds),
            predpm_surrogate=build_surrogate_cfg(config, env),
            eval_rollouts=int(section.get("eval_rollouts",
                                          config.get("eval_rollouts", 50))),
            seed=int(config.get("seed", 0)),
            replay_ratio=float(section.get("replay_ratio", 3.0)),
            cert_polish_epochs=int(section.get("cert_polish_epochs", 12)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cli_repair(args) -> int:
    config = load_config(args.config)
    env = build_env(config)
    cfg = build_repair_config(config, args, env)
    policy, barrier, lyapunov = load_models(args.models, env)
    if cfg.monitor == "certpm_stability" and lyapunov is None:
        raise ConfigError("stability repair needs lyapunov.json in the model dir")
    if cfg.monitor in ("certpm", "predpm") and barrier is None:
        raise ConfigError("safety repair needs barrier.json in the model dir")
    rng = derive_rng(cfg.seed, "repair")
    policy, barrier, lyapunov, rows = repair_loop(env, policy, barrier,
                                                  lyapunov, cfg, rng)
    out = _out_dir(config, args)
    save_models(out, policy, barrier, lyapunov)
    write_repair_report(rows, out / "repair_report.csv")
    write_manifest(out, config, "repair",
                   {"monitor": cfg.monitor, "problem": cfg.problem,
                    "rounds_executed": len(rows)})
    print(f"repair finished after {len(rows)} round(s); outputs in {out}")
    return 0


def cli_eval(args) -> int:
    config = load_config(args.config)
    env = build_env(config)
    policy, barrier, lyapunov = load_models(args.models, env)
    rollouts = args.rollouts or int(config.get("eval_rollouts", 50))
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    rng = derive_rng(seed, "eval")
    report = evaluate(env, policy, barrier, lyapunov, rollouts=rollouts, rng=rng)
    out = _out_dir(config, args)
    write_eval_csv(report, out / "eval_metrics.csv")
    write_eval_json(report, out / "eval_metrics.json")
    write_manifest(out, config, "eval",
                   {"rollouts": rollouts, "eval_seed": seed})
    print(f"SR={report.sr:.4f}"
          + (f" BR={report.br:.4f} NDR={report.ndr:.4f}" if barrier else "")
          + (f" DR={report.dr:.4f}" if lyapunov else ""))
    return 0


PREDPM_TRACE_FIELDS = ["t", "v_U", "v_S", "v_N", "flagged"]


def cli_predpm_trace(args) -> int:
    config = load_config(args.config)
    env = build_env(config)
    policy, barrier, _ = load_models(args.models, env)
    if barrier is None:
        raise ConfigError("predpm-trace needs barrier.json in the model dir")
    surrogate = build_surrogate_cfg(config, env)
    thresholds = build_thresholds(config, args.thresholds)
    seed = args.rollout_seed if args.rollout_seed is not None \
        else int(config.get("seed", 0))
    x0 = env.sample_initial_states(1, derive_rng(seed, "trace-init"))[0]
    traj = rollout(env.clone(), policy, x0)
    assess_rng = derive_rng(seed, "trace-assess")
    out_path = Path(args.out) if args.out else _out_dir(config, args) / "predpm_trace.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDPM_TRACE_FIELDS)
        for t, state in zip(traj.times, traj.states):
            a = predpm_assess(state, env.velocity_of(state), barrier, env,
                              surrogate, assess_rng)
            writer.writerow([repr(float(t)),
                             repr(a.time_to_unsafe),
                             repr(a.time_to_barrier_violation),
                             repr(a.time_to_nondec_violation),
                             int(predpm_verdict(a, thresholds))])
    out_dir = out_path.parent
    write_manifest(out_dir, config, "predpm-trace", {"rollout_seed": seed})
    print(f"trace with {len(traj)} rows written to {out_path}")
    return 0


SWEEP_FIELDS = ["axis", "threshold", "warnings", "observations", "warning_pct"]


def parse_grid(spec: str) -> list[tuple[str, list[float]]]:
    """Grid spec 'u=-2,-1,0;s=0,1' -> [(axis, values)], axes in u/s/n."""
    grid = []
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad grid entry {part!r}")
        axis, _, values = part.partition("=")
        axis = axis.strip()
        if axis not in ("u", "s", "n"):
            raise ConfigError(f"grid axis must be u, s or n, got {axis!r}")
        try:
            vals = sorted(float(v) for v in values.split(","))
        except ValueError:
            raise ConfigError(f"bad grid values in {part!r}") from None
        grid.append((axis, vals))
    if not grid:
        raise ConfigError("empty grid spec")
    return grid


def cli_threshold_sweep(args) -> int:
    config = load_config(args.config)
    env = build_env(config)
    policy, barrier, _ = load_models(args.models, env)
    if barrier is None:
        raise ConfigError("threshold-sweep needs barrier.json in the model dir")
    surrogate = build_surrogate_cfg(config, env)
    grid = parse_grid(args.grid)
    seed = int(config.get("seed", 0))
    rollouts = args.rollouts or 1

    assessments = []
    assess_rng = derive_rng(seed, "sweep-assess")
    init_rng = derive_rng(seed, "sweep-init")
    for x0 in env.sample_initial_states(rollouts, init_rng):
        traj = rollout(env.clone(), policy, x0)
        for state in traj.states:
            assessments.append(predpm_assess(state, env.velocity_of(state),
                                             barrier, env, surrogate,
                                             assess_rng))

    out = _out_dir(config, args)
    out_path = Path(args.out) if args.out else out / "threshold_sweep.csv"
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_FIELDS)
        for axis, values in grid:
            for val in values:
                th = PredThresholds(
                    unsafe=val if axis == "u" else 0.0,
                    barrier=val if axis == "s" else 0.0,
                    nondec=val if axis == "n" else 0.0)
                warn = sum(predpm_verdict(a, th) for a in assessments)
                writer.writerow([axis, repr(val), warn, len(assessments),
                                 repr(warn / len(assessments))])
    write_manifest(out, config, "threshold-sweep", {"rollouts": rollouts})
    print(f"sweep written to {out_path}")
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="certmon",
        description="Train, monitor and repair neural control policies with "
                    "certificate functions on black-box simulated dynamics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out-dir", default=None,
                       help="output directory (overrides config)")

    p_train = sub.add_parser("train", help="train policy + certificate(s)")
    add_common(p_train)
    p_train.set_defaults(func=cli_train)

    p_rep = sub.add_parser("repair", help="monitor rollouts and retrain")
    add_common(p_rep)
    p_rep.add_argument("--models", required=True, help="directory with model JSON")
    p_rep.add_argument("--monitor", default=None,
                       choices=["certpm", "predpm", "baseline",
                                "certpm-stability"])
    p_rep.add_argument("--thresholds", default=None,
                       help="predpm thresholds 'u,s,n'")
    p_rep.add_argument("--problem", default=None,
                       choices=["joint", "cert-only"])
    p_rep.add_argument("--rounds", type=int, default=None)
    p_rep.set_defaults(func=cli_repair)

    p_eval = sub.add_parser("eval", help="metrics over fresh rollouts")
    add_common(p_eval)
    p_eval.add_argument("--models", required=True)
    p_eval.add_argument("--rollouts", type=int, default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.set_defaults(func=cli_eval)

    p_tr = sub.add_parser("predpm-trace",
                          help="per-step predictive assessments of one rollout")
    add_common(p_tr)
    p_tr.add_argument("--models", required=True)
    p_tr.add_argument("--rollout-seed", type=int, default=None)
    p_tr.add_argument("--thresholds", default=None)
    p_tr.add_argument("--out", default=None, help="trace CSV path")
    p_tr.set_defaults(func=cli_predpm_trace)

    p_sw = sub.add_parser("threshold-sweep",
                          help="warning percentage across threshold grid")
    add_common(p_sw)
    p_sw.add_argument("--models", required=True)
    p_sw.add_argument("--grid", required=True,
                      help="e.g. 'u=-2,-1,0,1,2' or 'u=0,1;s=0,1;n=-5,0'")
    p_sw.add_argument("--rollouts", type=int, default=None)
    p_sw.add_argument("--out", default=None)
    p_sw.set_defaults(func=cli_threshold_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
