"""Monitoring-based repair: roll out, harvest flagged states, retrain.

One repair round monitors a batch of rollouts, collects every state the
monitor flags together with its one-step successor observation, partitions
the flagged states into the per-condition retraining sets, and retrains
the networks on those sets merged with an equal-size replay sample of the
original training distribution (repair data alone loses the global shape
of the certificate). The loop repeats until a round's rollouts produce no
flags or the round budget runs out.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .certificates import CertCondition
from .envs import BlackBoxEnv, SystemState, Trajectory, rollout
from .metrics import evaluate
from .monitors import (
    BaselineMonitor,
    CertPMSafetyMonitor,
    CertPMStabilityMonitor,
    PredPMMonitor,
    PredThresholds,
    SurrogateCfg,
)
from .training import (
    BarrierDataset,
    LyapunovDataset,
    TrainConfig,
    fit,
    states_kinematics,
)

MONITOR_KINDS = ("certpm", "certpm_stability", "predpm", "baseline")


@dataclass
class RepairConfig:
    rollout_count: int = 200
    n_steps: int | None = None
    monitor: str = "certpm"
    problem: str = "joint"
    max_rounds: int = 3
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=14, policy_warmup_epochs=8, proximal_weight=2.0, cert_lr=1e-3))
    predpm_thresholds: PredThresholds = field(default_factory=PredThresholds)
    predpm_surrogate: SurrogateCfg | None = None
    eval_rollouts: int = 50
    seed: int = 0
    # how much fresh original-distribution data accompanies each repair
    # set (multiples of the repair set size)
    replay_ratio: float = 3.0
    # certificate-only epochs at the end of a joint round, run on replay
    # drawn under the freshly repaired policy so the certificate tracks
    # the new closed-loop behavior
    cert_polish_epochs: int = 12

    def __post_init__(self):
        if self.rollout_count < 0:
            raise ValueError("rollout count must be nonnegative")
        if self.max_rounds < 1:
            raise ValueError("need at least one round")
        if self.monitor not in MONITOR_KINDS:
            raise ValueError(f"unknown monitor {self.monitor!r}")
        if self.replay_ratio < 0:
            raise ValueError("replay ratio must be nonnegative")
        if self.problem not in ("joint", "cert_only"):
            raise ValueError(f"unknown problem {self.problem!r}")


@dataclass
class ViolationRecord:
    state: SystemState
    obs: np.ndarray
    next_obs: np.ndarray
    action: np.ndarray
    cause_kind: CertCondition


@dataclass
class ViolationSet:
    entries: list[ViolationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def cause_counts(self) -> dict[str, int]:
        return dict(Counter(e.cause_kind.value for e in self.entries))


def build_monitor(cfg: RepairConfig, env: BlackBoxEnv, barrier=None,
                  lyapunov=None):
    if cfg.monitor == "certpm":
        return CertPMSafetyMonitor(barrier)
    if cfg.monitor == "certpm_stability":
        return CertPMStabilityMonitor(lyapunov)
    if cfg.monitor == "baseline":
        return BaselineMonitor()
    surrogate = cfg.predpm_surrogate or SurrogateCfg(
        a_max=float(np.max(np.abs(env.action_high))))
    return PredPMMonitor(barrier, surrogate, cfg.predpm_thresholds,
                         seed=cfg.seed)


def collect_violations(env: BlackBoxEnv, policy, monitor, cfg: RepairConfig,
                       rng: np.random.Generator) -> ViolationSet:
    """Monitor `rollout_count` rollouts; every flagged prefix contributes
    its newest state, recorded with the successor observation and action
    captured on the following step of the same rollout."""
    n_steps = cfg.n_steps if cfg.n_steps is not None else env.horizon_steps
    dt = env.monitor_dt
    out = ViolationSet()
    for x0 in env.sample_initial_states(cfg.rollout_count, rng):
        sandbox = env.clone()
        sandbox.reset(x0)
        state = sandbox.current_state()
        times, states, observations = [0.0], [state], [sandbox.observe(state)]
        pending: ViolationRecord | None = None
        for n in range(n_steps + 1):
            prefix = Trajectory(list(times), list(states), list(observations))
            verdict = monitor.verdict(prefix, sandbox)
            if verdict.flagged:
                pending = ViolationRecord(states[-1], observations[-1],
                                          None, None, verdict.cause.kind)
            if n == n_steps:
                if pending is not None:
                    # capture the final flagged state's successor
                    action = policy.act(observations[-1])
                    nxt = sandbox.step(action, dt)
                    pending.action = np.asarray(action, dtype=np.float64)
                    pending.next_obs = sandbox.observe(nxt)
                    out.entries.append(pending)
                    pending = None
                break
            action = policy.act(observations[-1])
            state = sandbox.step(action, dt)
            times.append((n + 1) * dt)
            states.append(state)
            observations.append(sandbox.observe(state))
            if pending is not None:
                pending.action = np.asarray(action, dtype=np.float64)
                pending.next_obs = observations[-1]
                out.entries.append(pending)
                pending = None
    return out


def _obs_matrix(rows, obs_dim):
    return np.array(rows) if rows else np.zeros((0, obs_dim))


def partition_barrier_data(violations: ViolationSet, env: BlackBoxEnv,
                           B, dt: float | None = None) -> BarrierDataset:
    """Flagged states split into the three (overlapping) retraining sets:
    members of the initial set, members of the unsafe set, and states with
    a nonnegative certificate. A predictively flagged state with B < 0
    that lands in no set is treated as early safety-condition evidence."""
    if dt is None:
        dt = env.monitor_dt
    init_rows, safe_rows = [], []
    nd_obs, nd_next, nd_act, nd_states = [], [], [], []
    for e in violations.entries:
        in_init = env.in_initial(e.state)
        in_unsafe = env.in_unsafe(e.state)
        b_val = B.value(e.obs)
        if in_init:
            init_rows.append(e.obs)
        if in_unsafe:
            safe_rows.append(e.obs)
        if b_val >= 0:
            nd_obs.append(e.obs)
            nd_next.append(e.next_obs)
            nd_act.append(e.action)
            nd_states.append(e.state)
        elif not in_init and not in_unsafe and e.cause_kind is CertCondition.NONE:
            safe_rows.append(e.obs)
    obs_dim = env.obs_dim
    nd_obs = _obs_matrix(nd_obs, obs_dim)
    return BarrierDataset(
        _obs_matrix(init_rows, obs_dim), _obs_matrix(safe_rows, obs_dim),
        nd_obs, _obs_matrix(nd_next, obs_dim), dt,
        nondec_actions=(np.array(nd_act) if len(nd_act)
                        else np.zeros((0, env.action_dim))),
        nondec_dirs=np.zeros((len(nd_obs), env.action_dim)),
        nondec_kin=states_kinematics(env, nd_states))


def partition_lyapunov_data(violations: ViolationSet, env: BlackBoxEnv,
                            dt: float | None = None) -> LyapunovDataset:
    """Flagged states split by goal membership."""
    if dt is None:
        dt = env.monitor_dt
    goal_rows, dec_obs, dec_next, dec_act, dec_states = [], [], [], [], []
    for e in violations.entries:
        if env.in_goal(e.state):
            goal_rows.append(e.obs)
        else:
            dec_obs.append(e.obs)
            dec_next.append(e.next_obs)
            dec_act.append(e.action)
            dec_states.append(e.state)
    obs_dim = env.obs_dim
    dec_obs = _obs_matrix(dec_obs, obs_dim)
    return LyapunovDataset(
        _obs_matrix(goal_rows, obs_dim), dec_obs,
        _obs_matrix(dec_next, obs_dim), dt,
        dec_actions=(np.array(dec_act) if len(dec_act)
                     else np.zeros((0, env.action_dim))),
        dec_dirs=np.zeros((len(dec_obs), env.action_dim)),
        dec_kin=states_kinematics(env, dec_states))


def _states_with_successors(env, states, policy, dt):
    sandbox = env.clone()
    obs_rows, next_rows, act_rows = [], [], []
    for s in states:
        sandbox.reset(s, override=True)
        obs = sandbox.observe(s)
        action = policy.act(obs)
        nxt = sandbox.step(action, dt)
        obs_rows.append(obs)
        next_rows.append(sandbox.observe(nxt))
        act_rows.append(np.asarray(action, dtype=np.float64))
    return obs_rows, next_rows, act_rows, states_kinematics(env, list(states))


def _rate_pairs_like_training(env, policy, count, rng, dt):
    """Rate pairs drawn like the original training data: half uniform
    state-space samples, half consecutive pairs of on-policy rollouts."""
    n_uniform = count // 2
    obs_rows, next_rows, act_rows, kin = _states_with_successors(
        env, env.sample_states(n_uniform, rng), policy, dt)
    kin.steer[:] = 0.0
    pair_states = None
    needed = count - n_uniform
    horizon = max(1, env.horizon_steps)
    states_acc = []
    while needed > 0:
        x0 = env.sample_initial_states(1, rng)[0]
        traj = rollout(env.clone(), policy, x0, min(horizon, needed), dt)
        obs_rows.extend(traj.observations[:-1])
        next_rows.extend(traj.observations[1:])
        act_rows.extend(traj.actions)
        states_acc.extend(traj.states[:-1])
        needed -= len(traj.actions)
    kin = kin.merged_with(states_kinematics(env, states_acc, steer=False))
    return obs_rows, next_rows, act_rows, kin


def replay_barrier_data(env: BlackBoxEnv, policy,
                        sizes: tuple[int, int, int],
                        rng: np.random.Generator,
                        dt: float | None = None) -> BarrierDataset:
    """Fresh draws from the original training distribution, sized to match
    the repair sets one-for-one."""
    if dt is None:
        dt = env.monitor_dt
    ni, ns, nn = sizes
    sandbox = env.clone()
    init_rows = [sandbox.observe(s)
                 for s in env.sample_initial_states(ni, rng)]
    safe_rows = [sandbox.observe(s) for s in env.sample_unsafe_states(ns, rng)]
    nd_obs, nd_next, nd_act, nd_kin = _rate_pairs_like_training(
        env, policy, nn, rng, dt)
    obs_dim = env.obs_dim
    nd_obs = _obs_matrix(nd_obs, obs_dim)
    return BarrierDataset(
        _obs_matrix(init_rows, obs_dim), _obs_matrix(safe_rows, obs_dim),
        nd_obs, _obs_matrix(nd_next, obs_dim), dt,
        nondec_actions=(np.array(nd_act) if nd_act
                        else np.zeros((0, env.action_dim))),
        nondec_dirs=np.zeros((len(nd_obs), env.action_dim)),
        nondec_kin=nd_kin)


def replay_lyapunov_data(env: BlackBoxEnv, policy, sizes: tuple[int, int],
                         rng: np.random.Generator,
                         dt: float | None = None) -> LyapunovDataset:
    if dt is None:
        dt = env.monitor_dt
    ng, nd = sizes
    sandbox = env.clone()
    goal_rows = [sandbox.observe(s) for s in env.sample_goal_states(ng, rng)]
    dec_obs, dec_next, dec_act, dec_kin = _rate_pairs_like_training(
        env, policy, nd, rng, dt)
    obs_dim = env.obs_dim
    dec_obs = _obs_matrix(dec_obs, obs_dim)
    return LyapunovDataset(
        _obs_matrix(goal_rows, obs_dim), dec_obs,
        _obs_matrix(dec_next, obs_dim), dt,
        dec_actions=(np.array(dec_act) if dec_act
                     else np.zeros((0, env.action_dim))),
        dec_dirs=np.zeros((len(dec_obs), env.action_dim)),
        dec_kin=dec_kin)


def _polish_certificate(env, policy, barrier, violations, cfg,
                        replay_rng, fit_rng):
    """Certificate-only epochs against replay drawn under the repaired
    policy, so the certificate reflects the new closed-loop behavior. The
    policy parameters stay untouched."""
    base = partition_barrier_data(violations, env, barrier)
    sizes = tuple(int(cfg.replay_ratio * n) for n in base.sizes())
    replay = replay_barrier_data(env, policy, sizes, replay_rng)
    data = base.merged_with(replay)
    polish_cfg = TrainConfig(
        epochs=cfg.cert_polish_epochs,
        batch_size=cfg.retrain.batch_size,
        cert_lr=cfg.retrain.cert_lr,
        policy_lr=cfg.retrain.policy_lr,
        hidden_dims=cfg.retrain.hidden_dims,
        seed=cfg.retrain.seed,
        loss_margin=cfg.retrain.loss_margin,
        policy_warmup_epochs=0,
    )
    fit(policy, barrier, None, data, None, polish_cfg, fit_rng,
        train_policy=False, env=env)


@dataclass
class RepairOutcome:
    status: str  # "repaired" or "nothing_to_repair"
    curve: list[dict] = field(default_factory=list)


def repair_round(policy, barrier, lyapunov,
                 barrier_data: BarrierDataset | None,
                 lyap_data: LyapunovDataset | None,
                 cfg: RepairConfig,
                 rng: np.random.Generator,
                 env: BlackBoxEnv | None = None) -> RepairOutcome:
    """Retrain on one round's datasets. In cert_only mode the policy
    parameters are left untouched (bitwise). The environment, when given,
    is used only to refresh the stored response directions."""
    barrier_sizes = barrier_data.sizes() if barrier_data is not None else (0, 0, 0)
    lyap_sizes = ((len(lyap_data.d_goal), len(lyap_data.dec_obs))
                  if lyap_data is not None else (0, 0))
    if sum(barrier_sizes) + sum(lyap_sizes) == 0:
        return RepairOutcome("nothing_to_repair")
    curve = fit(policy, barrier, lyapunov, barrier_data, lyap_data,
                cfg.retrain, rng, train_policy=(cfg.problem == "joint"),
                env=env)
    return RepairOutcome("repaired", curve)


def repair_loop(env: BlackBoxEnv, policy, barrier, lyapunov,
                cfg: RepairConfig,
                rng: np.random.Generator | None = None):
    """Alternate collect / partition / retrain until a round's rollouts
    yield zero flags or max_rounds is exhausted.

    Returns (policy, barrier, lyapunov, rows) where rows carry, per round,
    the flag counts of that round's (pre-repair) rollouts and the metrics
    of the post-repair networks. Fresh initial states are sampled every
    round, so the zero-flag termination check never reuses rollouts.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    collect_rng, replay_rng, fit_rng, eval_rng = (
        np.random.default_rng(int(s))
        for s in rng.integers(0, 2**63, size=4))
    monitor = build_monitor(cfg, env, barrier, lyapunov)
    stability = cfg.monitor == "certpm_stability"
    rows = []
    for round_idx in range(1, cfg.max_rounds + 1):
        started = time.perf_counter()
        violations = collect_violations(env, policy, monitor, cfg, collect_rng)
        flagged = len(violations)
        status = "converged"
        if flagged:
            if stability:
                lyap_data = partition_lyapunov_data(violations, env)
                sizes = (int(cfg.replay_ratio * len(lyap_data.d_goal)),
                         int(cfg.replay_ratio * len(lyap_data.dec_obs)))
                replay = replay_lyapunov_data(env, policy, sizes, replay_rng)
                lyap_data = lyap_data.merged_with(replay)
                # the barrier (if any) is left out of stability repair
                outcome = repair_round(policy, None, lyapunov, None,
                                       lyap_data, cfg, fit_rng, env)
            else:
                barrier_data = partition_barrier_data(violations, env, barrier)
                sizes = tuple(int(cfg.replay_ratio * n)
                              for n in barrier_data.sizes())
                replay = replay_barrier_data(env, policy, sizes, replay_rng)
                barrier_data = barrier_data.merged_with(replay)
                outcome = repair_round(policy, barrier, lyapunov, barrier_data,
                                       None, cfg, fit_rng, env)
                if cfg.problem == "joint" and cfg.cert_polish_epochs > 0:
                    _polish_certificate(env, policy, barrier, violations,
                                        cfg, replay_rng, fit_rng)
            status = outcome.status
        report = evaluate(env, policy, barrier, lyapunov,
                          rollouts=cfg.eval_rollouts, rng=eval_rng,
                          n_steps=cfg.n_steps)
        rows.append({
            "round": round_idx,
            "flags_total": flagged,
            "flags_by_cause": violations.cause_counts(),
            "SR": report.sr, "BR": report.br, "NDR": report.ndr,
            "DR": report.dr,
            "status": status,
            "wall_time": time.perf_counter() - started,
        })
        if flagged == 0:
            break
    return policy, barrier, lyapunov, rows
