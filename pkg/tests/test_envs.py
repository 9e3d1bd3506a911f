import math

import numpy as np
import pytest

from certmon.envs import (
    EnvError,
    ObstacleTrack,
    SystemState,
    Trajectory,
    make_drone2d,
    make_env,
    make_ship2d,
    rollout,
)


def drone_no_obstacles(**kw):
    return make_drone2d(obstacles=[], k_nearest=kw.pop("k_nearest", 0), **kw)


class ZeroPolicy:
    def __init__(self, dim=2):
        self.dim = dim

    def act(self, obs):
        return np.zeros(self.dim)


def test_reset_then_observe_returns_x0():
    env = make_drone2d()
    x0 = SystemState([2.5, 2.5, 0.04, -0.04])
    env.reset(x0)
    cur = env.current_state()
    np.testing.assert_array_equal(cur.values, x0.values)
    assert cur.timestamp == 0.0


def test_reset_determinism_same_trajectory():
    env = make_drone2d()
    x0 = SystemState([2.4, 2.5, 0.02, 0.03])
    actions = [np.array([0.5, -0.2]), np.array([-0.1, 0.4]), np.array([0.0, 0.0])]
    runs = []
    for _ in range(2):
        env.reset(x0)
        states = [env.step(a, 0.1).values.copy() for a in actions]
        runs.append(states)
    for a, b in zip(*runs):
        assert np.array_equal(a, b)


def test_reset_outside_initial_set_requires_override():
    env = make_drone2d()
    bad = SystemState([9.0, 9.0, 0.0, 0.0])
    with pytest.raises(EnvError):
        env.reset(bad)
    env.reset(bad, override=True)  # oracle path


def test_reset_dimension_mismatch():
    env = make_drone2d()
    with pytest.raises(EnvError):
        env.reset(SystemState([0.0, 0.0]), override=True)


def test_drone_ballistic_motion():
    env = drone_no_obstacles()
    env.reset(SystemState([0.0, 0.0, 1.0, 0.0]), override=True)
    s = env.step(np.zeros(2), 0.1)
    np.testing.assert_allclose(s.values, [0.1, 0.0, 1.0, 0.0], atol=1e-12)


def test_drone_constant_acceleration_closed_form():
    # linear system: RK4 reproduces x = a t^2 / 2 exactly
    env = drone_no_obstacles()
    env.reset(SystemState([0.0, 0.0, 0.0, 0.0]), override=True)
    s = env.step(np.array([1.0, 0.0]), 0.1)
    np.testing.assert_allclose(s.values, [0.005, 0.0, 0.1, 0.0], atol=1e-14)


def test_ship_heading_kinematics():
    env = make_ship2d(obstacles=[], k_nearest=0)
    x0 = SystemState([5.0, 5.0, math.pi / 2, 1.0, 0.0, 0.0])
    env.reset(x0, override=True)
    dt = 1e-3
    s = env.step(np.zeros(2), dt)
    assert abs((s.values[1] - 5.0) / dt - 1.0) < 1e-3  # ydot ~ u sin(theta) = 1
    assert abs((s.values[0] - 5.0) / dt) < 1e-3        # xdot ~ u cos(theta) = 0


def test_rk4_exact_on_linear_dynamics_until_fp_floor():
    # double integrator trajectories are quadratic in t; RK4 is exact there
    for h in (0.02, 0.01):
        env = drone_no_obstacles(h_int=h)
        env.reset(SystemState([0.0, 0.0, 0.3, -0.2]), override=True)
        s = env.step(np.array([0.7, -0.4]), 0.1)
        exact = np.array([0.3 * 0.1 + 0.35 * 0.01, -0.2 * 0.1 - 0.2 * 0.01,
                          0.3 + 0.07, -0.2 - 0.04])
        np.testing.assert_allclose(s.values, exact, atol=1e-14)


def test_rk4_fourth_order_convergence_on_ship_circle():
    # constant-turn ship: a chosen to cancel damping, closed-form circle
    u0, w0 = 1.0, 0.8
    action = np.array([0.5 * u0, 0.5 * w0])
    x0 = SystemState([5.0, 5.0, 0.0, u0, 0.0, w0])
    T = 1.0

    def closed_form(t):
        th = w0 * t
        x = 5.0 + (u0 / w0) * math.sin(th)
        y = 5.0 + (u0 / w0) * (1.0 - math.cos(th))
        return np.array([x, y, th, u0, 0.0, w0])

    errors = []
    for h in (0.1, 0.05, 0.025):
        env = make_ship2d(obstacles=[], k_nearest=0, h_int=h)
        env.reset(x0.copy(), override=True)
        s = env.step(action, T)
        errors.append(np.max(np.abs(s.values - closed_form(T))))
    assert errors[0] / errors[1] >= 8.0
    assert errors[1] / errors[2] >= 8.0


def test_observe_padding_with_no_obstacles():
    env = drone_no_obstacles(k_nearest=2)
    s = SystemState([1.0, 1.0, 0.0, 0.0])
    obs = env.observe(s)
    assert obs.shape == (4 + 8 + 2,)
    np.testing.assert_array_equal(obs[4:6], [100.0, 100.0])
    np.testing.assert_array_equal(obs[6:8], [0.0, 0.0])
    np.testing.assert_array_equal(obs[8:10], [100.0, 100.0])
    np.testing.assert_allclose(obs[-2:], [7.5, 7.5])


def test_observe_sorts_by_distance():
    tracks = [ObstacleTrack([(4.0, 1.0)], period=1.0, radius=0.3),
              ObstacleTrack([(2.0, 1.0)], period=1.0, radius=0.3)]
    env = make_drone2d(obstacles=tracks, k_nearest=2,
                       init_low=[0.4, 0.4, 0.0, 0.0],
                       init_high=[0.6, 0.6, 0.0, 0.0])
    obs = env.observe(SystemState([1.0, 1.0, 0.0, 0.0]))
    np.testing.assert_allclose(obs[4:6], [1.0, 0.0])   # nearer (index 1) first
    np.testing.assert_allclose(obs[8:10], [3.0, 0.0])


def test_observe_tie_break_by_obstacle_index():
    tracks = [ObstacleTrack([(5.0, 3.0)], period=1.0, radius=0.3),
              ObstacleTrack([(5.0, 3.0)], period=1.0, radius=0.3),
              ObstacleTrack([(3.0, 5.0)], period=1.0, radius=0.3),
              ObstacleTrack([(7.0, 5.0)], period=1.0, radius=0.3)]
    env = make_drone2d(obstacles=tracks, k_nearest=4)
    obs = env.observe(SystemState([5.0, 5.0, 0.0, 0.0]))
    # all four are equidistant: slots follow obstacle index order
    np.testing.assert_allclose(obs[4:6], [0.0, -2.0])
    np.testing.assert_allclose(obs[8:10], [0.0, -2.0])
    np.testing.assert_allclose(obs[12:14], [-2.0, 0.0])
    np.testing.assert_allclose(obs[16:18], [2.0, 0.0])


def test_boundary_state_is_safe():
    env = drone_no_obstacles()
    assert not env.in_unsafe(SystemState([0.0, 5.0, 0.0, 0.0]))
    assert not env.in_unsafe(SystemState([10.0, 10.0, 0.0, 0.0]))
    assert env.in_unsafe(SystemState([-1e-9, 5.0, 0.0, 0.0]))


def test_obstacle_center_is_unsafe_goal_center_is_goal():
    env = make_drone2d()
    centers, _, _ = env.obstacle_snapshot(0.0)
    assert env.in_unsafe(SystemState([centers[0][0], centers[0][1], 0.0, 0.0]))
    assert env.in_goal(SystemState([8.5, 8.5, 0.0, 0.0]))
    assert not env.in_goal(SystemState([5.0, 5.0, 0.0, 0.0]))


def test_sample_initial_states():
    env = make_drone2d()
    rng = np.random.default_rng(123)
    assert env.sample_initial_states(0, rng) == []
    a = env.sample_initial_states(1000, np.random.default_rng(5))
    b = env.sample_initial_states(1000, np.random.default_rng(5))
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.values, sb.values)
    assert all(env.in_initial(s) for s in a)


def test_obstacle_periodicity():
    trk = ObstacleTrack([(1.0, 1.0), (3.0, 1.0), (3.0, 4.0)], period=7.0, radius=0.5)
    rng = np.random.default_rng(2)
    for t in rng.uniform(0, 50, size=20):
        np.testing.assert_allclose(trk.position(t), trk.position(t + 7.0),
                                   atol=1e-9)


def test_action_clipping_counted():
    env = drone_no_obstacles()
    env.reset(SystemState([1.0, 1.0, 0.0, 0.0]), override=True)
    env.step(np.array([2.0, 0.0]), 0.1)
    assert env.stats["clipped_actions"] == 1
    s = env.current_state()
    assert abs(s.values[2] - 0.1) < 1e-12  # integrated with the clipped value


def test_non_finite_action_rejected():
    env = drone_no_obstacles()
    env.reset(SystemState([1.0, 1.0, 0.0, 0.0]), override=True)
    with pytest.raises(EnvError):
        env.step(np.array([np.nan, 0.0]), 0.1)


def test_black_box_surface_does_not_leak_dynamics():
    env = make_drone2d()
    allowed = {
        "name", "state_dim", "action_dim", "obs_dim", "action_low",
        "action_high", "arena_low", "arena_high", "goal_center", "goal_radius",
        "agent_radius", "monitor_dt", "horizon_steps", "k_nearest", "clone",
        "reset", "current_state", "step", "observe", "observe_kinematics",
        "state_from_kinematics", "velocity_of", "action_rate_indices",
        "action_accel_frame",
        "obstacle_snapshot", "unsafe_margin", "in_unsafe", "in_goal",
        "in_initial", "sample_initial_states", "sample_states",
        "sample_unsafe_states", "sample_goal_states", "stats",
    }
    public = {n for n in dir(env) if not n.startswith("_")}
    assert public <= allowed
    # the derivative function and full spec stay behind private names
    assert "_derivative" not in allowed and "_spec" not in allowed


def test_clone_gives_independent_trajectories():
    env = make_drone2d()
    twin = env.clone()
    x0 = SystemState([2.3, 2.3, 0.03, 0.0])
    env.reset(x0)
    twin.reset(SystemState([2.4, 2.4, -0.03, 0.01]))
    env.step(np.zeros(2), 0.1)
    np.testing.assert_array_equal(twin.current_state().values,
                                  [2.4, 2.4, -0.03, 0.01])


def test_rollout_records_uniform_time_grid():
    env = make_drone2d()
    traj = rollout(env, ZeroPolicy(), SystemState([2.5, 2.5, 0.02, 0.02]),
                   n_steps=5, dt=0.1)
    assert len(traj) == 6
    np.testing.assert_allclose(traj.times, np.arange(6) * 0.1)
    assert len(traj.observations) == 6
    assert len(traj.actions) == 5


def test_trajectory_validation():
    s = SystemState([0.0, 0.0, 0.0, 0.0])
    with pytest.raises(EnvError):
        Trajectory([0.0, 0.0], [s, s])
    with pytest.raises(EnvError):
        Trajectory([0.5, 1.0], [s, s])


def test_make_env_by_name():
    assert make_env("drone2d").name == "drone2d"
    assert make_env("ship2d").state_dim == 6
    with pytest.raises(EnvError):
        make_env("boat3d")


def test_default_specs_keep_initial_and_goal_sets_clear():
    # construction itself validates separation over the obstacle schedules
    for name in ("drone2d", "ship2d"):
        env = make_env(name)
        rng = np.random.default_rng(0)
        for s in env.sample_initial_states(200, rng):
            assert not env.in_unsafe(s)
