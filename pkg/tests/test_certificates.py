import numpy as np
import pytest

from certmon.certificates import (
    BarrierFn,
    CertCondition,
    LieApproxConfig,
    LyapunovFn,
    PolicyFn,
    barrier_check,
    lie_derivative_fd,
    lie_error_bound,
    lyapunov_check,
)
from certmon.envs import SystemState, make_drone2d
from certmon.nn import Mlp, mlp_init


@pytest.fixture
def env():
    # no obstacles: X_u is just the arena exterior, obs dim 4 + 0 + 2 = 6
    return make_drone2d(obstacles=[], k_nearest=0)


def linear_barrier(obs_dim, coord=None, bias=0.0):
    """B(obs) = obs[coord] + bias (constant bias when coord is None)."""
    w = np.zeros((1, obs_dim))
    if coord is not None:
        w[0, coord] = 1.0
    return BarrierFn(Mlp([obs_dim, 1], [w], [np.array([bias])]))


def constant_lyapunov(obs_dim, value):
    # squared output: bias sqrt(value) on a zero-weight layer
    w = np.zeros((1, obs_dim))
    net = Mlp([obs_dim, 1], [w], [np.array([np.sqrt(value)])],
              output_transform="non_negative")
    return LyapunovFn(net)


def obs_with_first(env, first):
    obs = np.zeros(env.obs_dim)
    obs[0] = first
    return obs


def test_lie_derivative_fd_arithmetic():
    assert lie_derivative_fd(1.0, 1.2, 0.0, 0.1) == pytest.approx(2.0)
    assert lie_derivative_fd(0.7, 0.7, 2.0, 2.5) == 0.0
    with pytest.raises(ValueError):
        lie_derivative_fd(1.0, 1.0, 1.0, 1.0)


def test_lie_derivative_fd_quadratic_flow_overestimates_within_bound():
    # B = first coordinate, coordinate follows t^2: sampled rate 2.1 vs true 2.0
    fd = lie_derivative_fd(1.0**2, 1.1**2, 1.0, 1.1)
    assert fd == pytest.approx(2.1)
    err = abs(fd - 2.0)
    # f = (v, 2) with v in [2, 2.2]: |f| <= 3, both Lipschitz constants 1
    bound = lie_error_bound(LieApproxConfig(dt=0.1, lip_cert=1.0,
                                            lip_dyn=1.0, norm_dyn=3.0))
    assert err <= bound


def test_lie_error_bound_formula():
    cfg = LieApproxConfig(dt=0.1, lip_cert=1.0, lip_dyn=1.0, norm_dyn=2.0)
    assert lie_error_bound(cfg) == pytest.approx(0.3)
    assert lie_error_bound(LieApproxConfig(0.0, 1.0, 1.0, 2.0)) == 0.0
    doubled = LieApproxConfig(dt=0.2, lip_cert=1.0, lip_dyn=1.0, norm_dyn=2.0)
    assert lie_error_bound(doubled) == pytest.approx(0.6)


def test_barrier_check_property_violation_wins(env):
    B = linear_barrier(env.obs_dim, bias=5.0)  # B > 0 everywhere
    x = SystemState([-0.5, 5.0, 0.0, 0.0])     # outside the arena
    v = barrier_check(B, env.observe(x), env.observe(x), x, env)
    assert v.kind is CertCondition.PROPERTY_UNSAFE
    assert v.violated


def test_barrier_check_non_decreasing_condition(env):
    B = linear_barrier(env.obs_dim, coord=0)
    x = SystemState([5.0, 5.0, 0.0, 0.0])
    obs_n = obs_with_first(env, 0.1)
    obs_n1 = obs_with_first(env, 0.05)
    v = barrier_check(B, obs_n, obs_n1, x, env, dt=0.1)
    assert v.kind is CertCondition.NON_DECREASING
    assert v.detail == pytest.approx(-0.4)


def test_barrier_check_clean_state(env):
    B = linear_barrier(env.obs_dim, coord=0)
    x = SystemState([5.0, 5.0, 0.0, 0.0])
    v = barrier_check(B, obs_with_first(env, 0.5), obs_with_first(env, 0.6),
                      x, env, dt=0.1)
    assert v.kind is CertCondition.NONE
    assert not v.violated
    assert v.flags == ()


def test_barrier_check_init_before_safety(env):
    B = linear_barrier(env.obs_dim, bias=-0.2)  # B < 0 everywhere
    inside_init = SystemState([2.5, 2.5, 0.0, 0.0])
    v = barrier_check(B, env.observe(inside_init), None, inside_init, env)
    assert v.kind is CertCondition.INIT
    assert CertCondition.SAFETY in v.flags
    outside_init = SystemState([5.0, 5.0, 0.0, 0.0])
    v2 = barrier_check(B, env.observe(outside_init), None, outside_init, env)
    assert v2.kind is CertCondition.SAFETY


def test_barrier_check_final_point_skips_rate_condition(env):
    B = linear_barrier(env.obs_dim, coord=0)
    x = SystemState([5.0, 5.0, 0.0, 0.0])
    v = barrier_check(B, obs_with_first(env, 0.1), None, x, env)
    assert v.kind is CertCondition.NONE


def test_lyapunov_check_zero_at_goal(env):
    V = constant_lyapunov(env.obs_dim, 0.05)
    goal_state = SystemState([8.5, 8.5, 0.0, 0.0])
    v = lyapunov_check(V, env.observe(goal_state), env.observe(goal_state),
                       goal_state, env, zero_tol=1e-3)
    assert v.kind is CertCondition.ZERO_AT_GOAL
    v2 = lyapunov_check(constant_lyapunov(env.obs_dim, 1e-8),
                        env.observe(goal_state), None, goal_state, env)
    assert v2.kind is CertCondition.NONE


def test_lyapunov_check_decreasing_condition(env):
    w = np.zeros((1, env.obs_dim))
    w[0, 0] = 1.0
    V = LyapunovFn(Mlp([env.obs_dim, 1], [w], [np.zeros(1)],
                       output_transform="non_negative"))
    x = SystemState([5.0, 5.0, 0.0, 0.0])
    rising = lyapunov_check(V, obs_with_first(env, np.sqrt(0.2)),
                            obs_with_first(env, np.sqrt(0.25)), x, env, dt=0.1)
    assert rising.kind is CertCondition.DECREASING
    assert rising.detail == pytest.approx(0.5)
    falling = lyapunov_check(V, obs_with_first(env, np.sqrt(0.25)),
                             obs_with_first(env, np.sqrt(0.2)), x, env, dt=0.1)
    assert falling.kind is CertCondition.NONE


def test_lyapunov_positivity_flag_for_imported_certificates(env):
    class NegativeCert:
        def value(self, obs):
            return -0.3

    x = SystemState([5.0, 5.0, 0.0, 0.0])
    v = lyapunov_check(NegativeCert(), np.zeros(env.obs_dim), None, x, env)
    assert v.kind is CertCondition.POSITIVITY


def test_lyapunov_fn_structurally_nonnegative():
    rng = np.random.default_rng(8)
    V = LyapunovFn(mlp_init([6, 32, 1], rng, output_transform="non_negative"))
    X = rng.normal(scale=4.0, size=(10_000, 6))
    assert np.all(V.value_batch(X) >= 0.0)


def test_lyapunov_fn_rejects_identity_output():
    with pytest.raises(ValueError):
        LyapunovFn(mlp_init([4, 8, 1], np.random.default_rng(0)))
    with pytest.raises(ValueError):
        BarrierFn(mlp_init([4, 8, 1], np.random.default_rng(0),
                           output_transform="non_negative"))


def test_policy_outputs_stay_in_bounds():
    rng = np.random.default_rng(4)
    net = mlp_init([6, 16, 2], rng)
    # blow up the last layer so the raw outputs are huge
    net.weights[-1] *= 100.0
    pol = PolicyFn(net, [-1.0, -2.0], [1.0, 0.5])
    X = rng.normal(scale=10.0, size=(500, 6))
    U = pol.act_batch(X)
    assert np.all(U[:, 0] >= -1.0) and np.all(U[:, 0] <= 1.0)
    assert np.all(U[:, 1] >= -2.0) and np.all(U[:, 1] <= 0.5)


def test_policy_backward_matches_finite_differences():
    rng = np.random.default_rng(14)
    net = mlp_init([5, 8, 2], rng)
    pol = PolicyFn(net, [-1.0, -1.0], [1.0, 1.0])
    X = rng.normal(size=(3, 5))
    G = rng.normal(size=(3, 2))
    _, cache = pol.act_batch_with_cache(X)
    grads = pol.backward(cache, G)
    h = 1e-6
    for pi, p in enumerate(net.parameters()):
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            net.version += 1
            up = float(np.sum(pol.act_batch(X) * G))
            p[idx] = orig - h
            net.version += 1
            um = float(np.sum(pol.act_batch(X) * G))
            p[idx] = orig
            net.version += 1
            fd = (up - um) / (2 * h)
            assert abs(fd - grads[pi][idx]) < 1e-5 * max(1.0, abs(fd))
            it.iternext()


def test_fd_error_halves_with_dt_on_double_integrator():
    # quadratic certificate q(t) = x(t)^2 under constant acceleration
    x0, v0, a = 0.5, 0.3, 0.4

    def pos(t):
        return x0 + v0 * t + 0.5 * a * t * t

    t0 = 1.0
    true_rate = 2.0 * pos(t0) * (v0 + a * t0)
    errs = []
    for dt in (0.2, 0.1, 0.05, 0.025):
        fd = (pos(t0 + dt) ** 2 - pos(t0) ** 2) / dt
        errs.append(abs(fd - true_rate))
    for e0, e1 in zip(errs, errs[1:]):
        assert 1.5 <= e0 / e1 <= 2.5
