import numpy as np
import pytest

from certmon.certificates import CertCondition
from certmon.envs import ObstacleTrack, SystemState, make_drone2d
from certmon.monitors import BaselineMonitor, CertPMSafetyMonitor, PredThresholds, SurrogateCfg
from certmon.repair import (
    RepairConfig,
    ViolationRecord,
    ViolationSet,
    build_monitor,
    collect_violations,
    partition_barrier_data,
    partition_lyapunov_data,
    repair_loop,
    repair_round,
    replay_barrier_data,
)
from certmon.training import BarrierDataset, TrainConfig, train_joint

from conftest import tiny_drone_env


def corridor_env(**kw):
    return make_drone2d(
        obstacles=[ObstacleTrack([(8.0, 5.0)], period=1.0, radius=0.4)],
        k_nearest=1, **kw)


class BrakingPolicy:
    """Decelerates toward rest; never gets far from the start."""

    def act(self, obs):
        return np.clip(-3.0 * obs[2:4], -1.0, 1.0)


class FullThrustPolicy:
    def act(self, obs):
        return np.array([1.0, 0.0])


class ClearanceBarrier:
    """Distance to the single observed obstacle minus a safety margin."""

    def __init__(self, margin=1.0, inflated_radius=0.55):
        self.offset = margin + inflated_radius

    def value(self, obs):
        return float(np.linalg.norm(obs[4:6])) - self.offset

    def value_batch(self, X):
        return np.linalg.norm(X[:, 4:6], axis=1) - self.offset


def record(state, obs_dim=10, cause=CertCondition.PROPERTY_UNSAFE, obs=None):
    if obs is None:
        obs = np.zeros(obs_dim)
    return ViolationRecord(state, obs, np.zeros_like(obs), np.zeros(2), cause)


def test_collect_zero_rollouts_gives_empty_set(rng):
    env = corridor_env()
    cfg = RepairConfig(rollout_count=0, monitor="baseline")
    out = collect_violations(env, BrakingPolicy(), BaselineMonitor(), cfg, rng)
    assert len(out) == 0


def test_collect_empty_for_certified_correct_pair(rng):
    # hand-built clearance barrier + braking policy: no condition can fire
    env = corridor_env(horizon_steps=30)
    cfg = RepairConfig(rollout_count=10, monitor="certpm")
    monitor = CertPMSafetyMonitor(ClearanceBarrier())
    out = collect_violations(env, BrakingPolicy(), monitor, cfg, rng)
    assert len(out) == 0


def test_collect_baseline_returns_only_unsafe_states(rng):
    env = corridor_env(horizon_steps=60)
    cfg = RepairConfig(rollout_count=8, monitor="baseline", n_steps=60)
    out = collect_violations(env, FullThrustPolicy(), BaselineMonitor(),
                             cfg, rng)
    assert len(out) > 0
    assert all(env.in_unsafe(e.state) for e in out.entries)
    assert all(e.cause_kind is CertCondition.PROPERTY_UNSAFE
               for e in out.entries)
    # successors were captured during the same rollouts
    assert all(e.next_obs is not None and e.action is not None
               for e in out.entries)


def test_collect_deterministic_given_seed():
    env = corridor_env(horizon_steps=40)
    cfg = RepairConfig(rollout_count=5, monitor="baseline", n_steps=40)
    a = collect_violations(env, FullThrustPolicy(), BaselineMonitor(), cfg,
                           np.random.default_rng(9))
    b = collect_violations(env, FullThrustPolicy(), BaselineMonitor(), cfg,
                           np.random.default_rng(9))
    assert len(a) == len(b)
    for ea, eb in zip(a.entries, b.entries):
        assert np.array_equal(ea.state.values, eb.state.values)
        assert np.array_equal(ea.next_obs, eb.next_obs)


def test_partition_follows_membership_intersections():
    env = corridor_env()
    a = SystemState([2.5, 2.5, 0.0, 0.0])       # initial set
    b = SystemState([8.0, 5.0, 0.0, 0.0])       # inside the obstacle
    obs_a, obs_b = env.observe(a), env.observe(b)

    class FixedBarrier:
        def value(self, obs):
            return -0.1 if obs is obs_a or np.array_equal(obs, obs_a) else 0.2

    v = ViolationSet([
        ViolationRecord(a, obs_a, np.zeros_like(obs_a), np.zeros(2),
                        CertCondition.INIT),
        ViolationRecord(b, obs_b, np.zeros_like(obs_b), np.zeros(2),
                        CertCondition.PROPERTY_UNSAFE),
    ])
    data = partition_barrier_data(v, env, FixedBarrier())
    assert len(data.d_init) == 1 and np.array_equal(data.d_init[0], obs_a)
    assert len(data.d_safe) == 1 and np.array_equal(data.d_safe[0], obs_b)
    assert len(data.nondec_obs) == 1 and np.array_equal(data.nondec_obs[0], obs_b)


def test_partition_empty_set():
    env = corridor_env()
    data = partition_barrier_data(ViolationSet(), env, ClearanceBarrier())
    assert data.sizes() == (0, 0, 0)


def test_partition_overlap_initial_state_with_nonnegative_barrier():
    env = corridor_env()
    a = SystemState([2.5, 2.5, 0.0, 0.0])
    obs_a = env.observe(a)
    v = ViolationSet([ViolationRecord(a, obs_a, obs_a.copy(), np.zeros(2),
                                      CertCondition.NON_DECREASING)])

    class PositiveBarrier:
        def value(self, obs):
            return 0.3

    data = partition_barrier_data(v, env, PositiveBarrier())
    assert len(data.d_init) == 1 and len(data.nondec_obs) == 1
    assert len(data.d_safe) == 0


def test_partition_predictive_flag_routed_by_barrier_sign():
    env = corridor_env()
    x = SystemState([5.0, 5.0, 0.0, 0.0])  # safe, non-initial
    obs = env.observe(x)
    v = ViolationSet([ViolationRecord(x, obs, obs.copy(), np.zeros(2),
                                      CertCondition.NONE)])

    class NegativeBarrier:
        def value(self, obs):
            return -0.5

    data = partition_barrier_data(v, env, NegativeBarrier())
    assert len(data.d_safe) == 1
    assert data.sizes() == (0, 1, 0)


def test_partition_lyapunov_by_goal_membership():
    env = corridor_env()
    g = SystemState([8.5, 8.5, 0.0, 0.0])
    x = SystemState([5.0, 5.0, 0.0, 0.0])
    records = [record(g, obs=env.observe(g), cause=CertCondition.ZERO_AT_GOAL),
               record(x, obs=env.observe(x), cause=CertCondition.DECREASING)]
    data = partition_lyapunov_data(ViolationSet(records), env)
    assert len(data.d_goal) == 1
    assert len(data.dec_obs) == 1


def test_repair_round_cert_only_freezes_policy_bitwise(rng):
    env = tiny_drone_env()
    res = train_joint(env, TrainConfig(epochs=0, seed=2, hidden_dims=(8,)))
    policy, barrier = res.policy, res.barrier
    before = [p.copy() for p in policy.net.parameters()]
    bar_before = [p.copy() for p in barrier.net.parameters()]
    data = BarrierDataset(
        rng.normal(size=(4, env.obs_dim)), rng.normal(size=(4, env.obs_dim)),
        rng.normal(size=(6, env.obs_dim)), rng.normal(size=(6, env.obs_dim)),
        env.monitor_dt)
    cfg = RepairConfig(problem="cert_only",
                       retrain=TrainConfig(epochs=3, hidden_dims=(8,)))
    outcome = repair_round(policy, barrier, None, data, None, cfg, rng)
    assert outcome.status == "repaired"
    for a, b in zip(policy.net.parameters(), before):
        assert np.array_equal(a, b)
    assert any(not np.array_equal(a, b)
               for a, b in zip(barrier.net.parameters(), bar_before))


def test_repair_round_empty_data_is_noop(rng):
    env = tiny_drone_env()
    res = train_joint(env, TrainConfig(epochs=0, seed=2, hidden_dims=(8,)))
    data = BarrierDataset.empty(env.obs_dim, env.monitor_dt)
    before = [p.copy() for p in res.barrier.net.parameters()]
    outcome = repair_round(res.policy, res.barrier, None, data, None,
                           RepairConfig(), rng)
    assert outcome.status == "nothing_to_repair"
    for a, b in zip(res.barrier.net.parameters(), before):
        assert np.array_equal(a, b)


def test_repair_loop_terminates_on_certified_pair():
    env = corridor_env(horizon_steps=25)
    res = train_joint(env, TrainConfig(epochs=0, seed=2, hidden_dims=(8,)))
    policy = BrakingPolicy()
    cfg = RepairConfig(rollout_count=6, monitor="certpm", max_rounds=4,
                       eval_rollouts=2, seed=0, n_steps=25)
    _, _, _, rows = repair_loop(env, policy, ClearanceBarrier(), None, cfg)
    assert len(rows) == 1
    assert rows[0]["flags_total"] == 0
    assert rows[0]["status"] == "converged"


def test_repair_loop_single_round_budget(rng):
    env = corridor_env(horizon_steps=40)
    res = train_joint(env, TrainConfig(epochs=0, seed=4, hidden_dims=(8,)))
    cfg = RepairConfig(rollout_count=4, monitor="baseline", max_rounds=1,
                       problem="cert_only",
                       retrain=TrainConfig(epochs=1, hidden_dims=(8,),
                                           batch_size=64),
                       eval_rollouts=2, n_steps=40, seed=1)
    _, _, _, rows = repair_loop(env, FullThrustPolicy(), res.barrier, None, cfg)
    assert len(rows) == 1
    assert rows[0]["flags_total"] > 0
    assert rows[0]["status"] == "repaired"
    assert set(rows[0]) >= {"round", "flags_total", "flags_by_cause", "SR",
                            "BR", "NDR", "DR", "wall_time"}


def test_repair_loop_deterministic_given_seed():
    def run():
        env = corridor_env(horizon_steps=30)
        res = train_joint(env, TrainConfig(epochs=0, seed=4, hidden_dims=(8,)))
        cfg = RepairConfig(rollout_count=4, monitor="certpm", max_rounds=2,
                           retrain=TrainConfig(epochs=2, hidden_dims=(8,),
                                               batch_size=64),
                           eval_rollouts=2, n_steps=30, seed=11)
        policy, barrier, _, rows = repair_loop(env, res.policy, res.barrier,
                                               None, cfg)
        return policy, barrier, rows

    p1, b1, rows1 = run()
    p2, b2, rows2 = run()
    for a, b in zip(p1.net.parameters(), p2.net.parameters()):
        assert np.array_equal(a, b)
    for a, b in zip(b1.net.parameters(), b2.net.parameters()):
        assert np.array_equal(a, b)
    assert [r["flags_total"] for r in rows1] == [r["flags_total"] for r in rows2]
    assert [r["SR"] for r in rows1] == [r["SR"] for r in rows2]


def test_collect_touches_env_only_through_blackbox_calls(monkeypatch, rng):
    env = corridor_env(horizon_steps=10)
    monkeypatch.setattr(env, "clone", lambda: env)
    before = dict(env.stats)
    cfg = RepairConfig(rollout_count=3, monitor="certpm", n_steps=10)
    collect_violations(env, BrakingPolicy(), CertPMSafetyMonitor(ClearanceBarrier()),
                       cfg, rng)
    after = env.stats
    assert after["resets"] == before["resets"] + 3
    assert after["steps"] == before["steps"] + 30
    assert after["observations"] > before["observations"]
    assert after["predicate_queries"] > before["predicate_queries"]


def test_build_monitor_variants():
    env = corridor_env()
    B = ClearanceBarrier()
    assert build_monitor(RepairConfig(monitor="certpm"), env, B).name == "certpm"
    assert build_monitor(RepairConfig(monitor="baseline"), env).name == "baseline"
    pred = build_monitor(
        RepairConfig(monitor="predpm",
                     predpm_thresholds=PredThresholds(0.0, 1.0, -5.0),
                     predpm_surrogate=SurrogateCfg(a_max=1.0, pred_steps=10,
                                                   opt_iters=5, restarts=1)),
        env, B)
    assert pred.name == "predpm"
    with pytest.raises(ValueError):
        RepairConfig(monitor="oracle")
    with pytest.raises(ValueError):
        RepairConfig(max_rounds=0)


def test_replay_data_matches_requested_sizes(rng):
    env = tiny_drone_env()
    res = train_joint(env, TrainConfig(epochs=0, seed=2, hidden_dims=(8,)))
    replay = replay_barrier_data(env, res.policy, (3, 5, 7), rng)
    assert replay.sizes() == (3, 5, 7)
    # safe replay rows really are unsafe-set observations
    for row in replay.d_safe:
        st = SystemState(row[:env.state_dim], 0.0)
        # timestamps differ, but distance to the nearest listed obstacle is
        # encoded in the observation itself
        assert np.linalg.norm(row[4:6]) < 0.55 + 1e-9


def test_predpm_monitor_smoke_collect(rng):
    env = corridor_env(horizon_steps=6)
    cfg = RepairConfig(
        rollout_count=2, monitor="predpm", n_steps=6,
        predpm_thresholds=PredThresholds(0.5, 0.5, -10.0),
        predpm_surrogate=SurrogateCfg(a_max=1.0, pred_dt=0.1, pred_steps=8,
                                      opt_iters=8, opt_lr=0.2, restarts=1))
    monitor = build_monitor(cfg, env, ClearanceBarrier())
    out = collect_violations(env, BrakingPolicy(), monitor, cfg, rng)
    # braking far from the obstacle: nothing within half a second
    assert len(out) == 0
