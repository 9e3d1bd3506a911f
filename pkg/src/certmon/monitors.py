"""Runtime monitors for policies paired with certificate functions.

Three monitors are provided. The certificate monitor flags any observed
state at which the property or a certificate condition fails; rate
conditions need the next observation, so they are scored one step behind
the newest point. The predictive monitor estimates, via a minimum-time
double-integrator surrogate, how long until the unsafe set, the negative
barrier region, or the rate-violating region could be reached, and warns
when an estimate drops below its user threshold. The baseline monitor
flags property violations only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .certificates import (
    CertCondition,
    CertVerdict,
    barrier_check,
    lie_derivative_fd,
)
from .envs import BlackBoxEnv, SystemState, Trajectory


@dataclass
class PredAssessment:
    """Estimated remaining seconds until each kind of violation; negative
    means the violation already holds. When the state is already unsafe,
    `time_to_unsafe` is negative, `inside_unsafe` is set and
    `time_to_safe` estimates the (positive) time to leave the unsafe set."""

    time_to_unsafe: float
    time_to_barrier_violation: float
    time_to_nondec_violation: float
    inside_unsafe: bool = False
    time_to_safe: float | None = None


@dataclass
class PredThresholds:
    """Warning fires when an assessment falls below its threshold."""

    unsafe: float = 0.0
    barrier: float = 0.0
    nondec: float = 0.0


@dataclass
class SurrogateCfg:
    """Settings for the minimum-time surrogate optimization."""

    a_max: float
    pred_dt: float = 0.1
    pred_steps: int = 50
    opt_iters: int = 100
    opt_lr: float = 0.1
    restarts: int = 3
    penalty: float = 10.0
    softmin_temp: float = 0.3

    def __post_init__(self):
        if min(self.a_max, self.pred_dt, self.opt_lr, self.penalty,
               self.softmin_temp) <= 0:
            raise ValueError("surrogate parameters must be positive")
        if min(self.pred_steps, self.opt_iters, self.restarts) < 1:
            raise ValueError("surrogate counts must be >= 1")

    @property
    def horizon_max(self) -> float:
        return self.pred_dt * self.pred_steps


@dataclass
class MonitorVerdict:
    flagged: bool
    cause: CertVerdict
    assessment: PredAssessment | None = None


# --------------------------------------------------------------------------
# certificate monitor
# --------------------------------------------------------------------------

def certpm_safety(prefix: Trajectory, B, env: BlackBoxEnv) -> MonitorVerdict:
    """Verdict on the newest point of the prefix.

    Property, initial and negativity conditions are checked at the newest
    state; the rate condition is checked at the previous state, whose
    successor has just been observed. Each condition of each state is
    therefore scored exactly once as the prefix grows.
    """
    if prefix.observations is None:
        raise ValueError("monitor needs observations recorded in the prefix")
    i = len(prefix) - 1
    obs = prefix.observations
    x_n = prefix.states[i]
    b_n = B.value(obs[i])
    if env.in_unsafe(x_n):
        margin = float(env.unsafe_margin(x_n.values[:2], x_n.timestamp)[0])
        return MonitorVerdict(True, CertVerdict(
            CertCondition.PROPERTY_UNSAFE, x_n, margin,
            (CertCondition.PROPERTY_UNSAFE,)))
    if env.in_initial(x_n) and b_n < 0:
        return MonitorVerdict(True, CertVerdict(
            CertCondition.INIT, x_n, b_n,
            (CertCondition.INIT, CertCondition.SAFETY)))
    if b_n < 0:
        return MonitorVerdict(True, CertVerdict(
            CertCondition.SAFETY, x_n, b_n, (CertCondition.SAFETY,)))
    if i >= 1:
        b_prev = B.value(obs[i - 1])
        if b_prev >= 0:
            rate = lie_derivative_fd(b_prev, b_n,
                                     prefix.times[i - 1], prefix.times[i])
            if rate + b_prev < 0:
                return MonitorVerdict(True, CertVerdict(
                    CertCondition.NON_DECREASING, prefix.states[i - 1],
                    rate + b_prev, (CertCondition.NON_DECREASING,)))
    return MonitorVerdict(False, CertVerdict(CertCondition.NONE, x_n))


def certpm_stability(prefix: Trajectory, V, env: BlackBoxEnv,
                     zero_tol: float = 1e-3) -> MonitorVerdict:
    """Stability variant: scores the Lyapunov conditions; there is no
    property verdict because goal convergence is a limit property."""
    if prefix.observations is None:
        raise ValueError("monitor needs observations recorded in the prefix")
    i = len(prefix) - 1
    obs = prefix.observations
    x_n = prefix.states[i]
    v_n = V.value(obs[i])
    if env.in_goal(x_n) and abs(v_n) > zero_tol:
        return MonitorVerdict(True, CertVerdict(
            CertCondition.ZERO_AT_GOAL, x_n, v_n,
            (CertCondition.ZERO_AT_GOAL,)))
    if v_n < 0:
        return MonitorVerdict(True, CertVerdict(
            CertCondition.POSITIVITY, x_n, v_n, (CertCondition.POSITIVITY,)))
    if i >= 1:
        x_prev = prefix.states[i - 1]
        v_prev = V.value(obs[i - 1])
        if not env.in_goal(x_prev) and v_prev > 0:
            rate = lie_derivative_fd(v_prev, v_n,
                                     prefix.times[i - 1], prefix.times[i])
            if rate >= 0:
                return MonitorVerdict(True, CertVerdict(
                    CertCondition.DECREASING, x_prev, rate,
                    (CertCondition.DECREASING,)))
    return MonitorVerdict(False, CertVerdict(CertCondition.NONE, x_n))


def baseline_monitor(prefix: Trajectory, env: BlackBoxEnv) -> MonitorVerdict:
    """Property-only monitor: flags exactly when the newest state is unsafe."""
    x_n = prefix.states[-1]
    if env.in_unsafe(x_n):
        cause = CertVerdict(CertCondition.PROPERTY_UNSAFE, x_n,
                            float(env.unsafe_margin(x_n.values[:2],
                                                    x_n.timestamp)[0]),
                            (CertCondition.PROPERTY_UNSAFE,))
        return MonitorVerdict(True, cause)
    return MonitorVerdict(False, CertVerdict(CertCondition.NONE, x_n))


# --------------------------------------------------------------------------
# minimum-time surrogate
# --------------------------------------------------------------------------

class SurrogateSet:
    """Target set for the surrogate reachability problem. Membership is
    margin <= 0; margins must be evaluable on batched kinematic states."""

    uses_velocity = True
    separate_hit_margins = False

    def margins(self, P: np.ndarray, V: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hit_margins(self, P: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Margins used for the membership test along an optimized rollout
        (defaults to the optimization margins)."""
        return self.margins(P, V)


class UnsafeSetTarget(SurrogateSet):
    """Unsafe set at frozen obstacle time: obstacle discs plus the arena
    exterior."""

    uses_velocity = False

    def __init__(self, env: BlackBoxEnv, t: float):
        self.env, self.t = env, t

    def margins(self, P, V):
        return self.env.unsafe_margin(P, self.t)


class ComplementTarget(SurrogateSet):
    def __init__(self, inner: SurrogateSet):
        self.inner = inner
        self.uses_velocity = inner.uses_velocity

    def margins(self, P, V):
        return -self.inner.margins(P, V)


class BarrierLevelTarget(SurrogateSet):
    """Region where the barrier goes negative, with obstacles frozen."""

    def __init__(self, env: BlackBoxEnv, B, t: float):
        self.env, self.B, self.t = env, B, t

    def margins(self, P, V):
        obs = self.env.observe_kinematics(P, V, self.t)
        return self.B.value_batch(obs)


class NondecRegionTarget(SurrogateSet):
    """Region where the barrier rate condition fails. The membership test
    along a rollout uses consecutive surrogate states; the optimization
    margin uses a coasting probe step so each margin stays a function of a
    single state."""

    separate_hit_margins = True

    def __init__(self, env: BlackBoxEnv, B, t: float, dt: float):
        self.env, self.B, self.t, self.dt = env, B, t, dt

    def _pair_margin(self, b_now, b_next):
        rate = (b_next - b_now) / self.dt
        return rate + b_now

    def margins(self, P, V):
        obs_now = self.env.observe_kinematics(P, V, self.t)
        probe = P + V * self.dt
        obs_probe = self.env.observe_kinematics(probe, V, self.t)
        return self._pair_margin(self.B.value_batch(obs_now),
                                 self.B.value_batch(obs_probe))

    def hit_margins(self, P, V):
        obs = self.env.observe_kinematics(P, V, self.t)
        b = self.B.value_batch(obs)
        out = np.empty(len(P))
        out[:-1] = self._pair_margin(b[:-1], b[1:])
        # final step has no successor: fall back to the coasting probe
        probe = P[-1:] + V[-1:] * self.dt
        b_probe = self.B.value_batch(self.env.observe_kinematics(probe, V[-1:],
                                                                 self.t))
        out[-1] = self._pair_margin(b[-1], b_probe[0])
        return out


def _rollout_kinematics(x0, v0, accel, dt):
    """Exact double-integrator rollout under piecewise-constant
    acceleration; returns positions and velocities including the start."""
    T = len(accel)
    V = np.vstack([v0, v0 + dt * np.cumsum(accel, axis=0)])
    steps = V[:-1] * dt + 0.5 * accel * dt * dt
    P = np.vstack([x0, x0 + np.cumsum(steps, axis=0)])
    return P, V


def _margin_gradients(target, P, V, h=1e-4):
    """Central-difference margin gradients w.r.t. position and velocity."""
    d = P.shape[1]
    gP = np.zeros_like(P)
    gV = np.zeros_like(V)
    for c in range(d):
        e = np.zeros(d)
        e[c] = h
        gP[:, c] = (target.margins(P + e, V) - target.margins(P - e, V)) / (2 * h)
        if target.uses_velocity:
            gV[:, c] = (target.margins(P, V + e) - target.margins(P, V - e)) / (2 * h)
    return gP, gV


def _first_hit_time(hard_margins, dt):
    hits = np.nonzero(hard_margins[1:] <= 0.0)[0]
    if len(hits) == 0:
        return None
    return (hits[0] + 1) * dt


def min_time_to_set(x0, v0, target: SurrogateSet, cfg: SurrogateCfg,
                    rng: np.random.Generator | None = None) -> float:
    """Approximate minimal time for a bounded-acceleration point mass from
    (x0, v0) to reach the target set.

    Returns -pred_dt when the start already lies in the set, and
    horizon_max when the set is not reached within the horizon. The
    acceleration schedule is optimized with Adam on a soft minimum of
    (arrival step + penalty * positive margin), with the schedule kept
    feasible through a tanh reparameterization.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x0 = np.asarray(x0, dtype=np.float64)
    v0 = np.asarray(v0, dtype=np.float64)
    d = x0.shape[0]
    dt, T = cfg.pred_dt, cfg.pred_steps

    start_margin = target.hit_margins(x0[None, :], v0[None, :])[0]
    if start_margin <= 0.0:
        return -dt

    times = np.arange(T + 1) * dt
    best = cfg.horizon_max
    for restart in range(cfg.restarts):
        if restart == 0:
            z = np.zeros((T, d))
        else:
            z = rng.normal(scale=1.0, size=(T, d))
        m = np.zeros_like(z)
        s = np.zeros_like(z)
        for it in range(1, cfg.opt_iters + 1):
            a = cfg.a_max * np.tanh(z)
            P, V = _rollout_kinematics(x0, v0, a, dt)
            g = target.margins(P, V)
            hard = target.hit_margins(P, V) if target.separate_hit_margins else g
            hit = _first_hit_time(hard, dt)
            if hit is not None:
                best = min(best, hit)
            cost = times + cfg.penalty * np.maximum(g, 0.0)
            w = np.exp(-(cost - cost.min()) / cfg.softmin_temp)
            w /= w.sum()
            gP, gV = _margin_gradients(target, P, V)
            coef = (w * cfg.penalty * (g > 0.0))[:, None]
            alpha = coef * gP
            beta = coef * gV
            # chain through the linear rollout via suffix sums over steps > i
            sfx_a = np.cumsum(alpha[::-1], axis=0)[::-1]
            sfx_aj = np.cumsum((alpha * np.arange(T + 1)[:, None])[::-1],
                               axis=0)[::-1]
            sfx_b = np.cumsum(beta[::-1], axis=0)[::-1]
            idx = np.arange(T)
            grad_a = (dt * dt * (sfx_aj[1:] - (idx[:, None] + 0.5) * sfx_a[1:])
                      + dt * sfx_b[1:])
            grad_z = grad_a * cfg.a_max * (1.0 - np.tanh(z) ** 2)
            m = 0.9 * m + 0.1 * grad_z
            s = 0.999 * s + 0.001 * grad_z**2
            m_hat = m / (1.0 - 0.9**it)
            s_hat = s / (1.0 - 0.999**it)
            z = z - cfg.opt_lr * m_hat / (np.sqrt(s_hat) + 1e-8)
        a = cfg.a_max * np.tanh(z)
        P, V = _rollout_kinematics(x0, v0, a, dt)
        hit = _first_hit_time(target.hit_margins(P, V), dt)
        if hit is not None:
            best = min(best, hit)
    return best


# --------------------------------------------------------------------------
# predictive monitor
# --------------------------------------------------------------------------

def predpm_assess(x_n: SystemState, v_n: np.ndarray, B, env: BlackBoxEnv,
                  cfg: SurrogateCfg,
                  rng: np.random.Generator | None = None) -> PredAssessment:
    """The three remaining-time estimates at one state, with obstacle
    positions frozen at the state's own time."""
    if rng is None:
        rng = np.random.default_rng(0)
    t = x_n.timestamp
    pos = x_n.values[:2]
    vel = np.asarray(v_n, dtype=np.float64)

    unsafe = UnsafeSetTarget(env, t)
    inside = bool(unsafe.margins(pos[None, :], vel[None, :])[0] <= 0.0)
    time_to_safe = None
    if inside:
        time_to_unsafe = -cfg.pred_dt
        time_to_safe = min_time_to_set(pos, vel, ComplementTarget(unsafe),
                                       cfg, rng)
    else:
        time_to_unsafe = min_time_to_set(pos, vel, unsafe, cfg, rng)

    barrier_target = BarrierLevelTarget(env, B, t)
    time_to_barrier = min_time_to_set(pos, vel, barrier_target, cfg, rng)
    nondec_target = NondecRegionTarget(env, B, t, cfg.pred_dt)
    time_to_nondec = min_time_to_set(pos, vel, nondec_target, cfg, rng)

    return PredAssessment(time_to_unsafe, time_to_barrier, time_to_nondec,
                          inside_unsafe=inside, time_to_safe=time_to_safe)


def predpm_verdict(assessment: PredAssessment,
                   thresholds: PredThresholds) -> bool:
    """Warn when any estimate falls below its threshold; a state already
    inside the unsafe set always warns."""
    if assessment.inside_unsafe:
        return True
    return (assessment.time_to_unsafe < thresholds.unsafe
            or assessment.time_to_barrier_violation < thresholds.barrier
            or assessment.time_to_nondec_violation < thresholds.nondec)


# --------------------------------------------------------------------------
# monitor objects used by the repair loop
# --------------------------------------------------------------------------

class CertPMSafetyMonitor:
    name = "certpm"

    def __init__(self, barrier):
        self.barrier = barrier

    def verdict(self, prefix: Trajectory, env: BlackBoxEnv) -> MonitorVerdict:
        return certpm_safety(prefix, self.barrier, env)


class CertPMStabilityMonitor:
    name = "certpm_stability"

    def __init__(self, lyapunov, zero_tol: float = 1e-3):
        self.lyapunov = lyapunov
        self.zero_tol = zero_tol

    def verdict(self, prefix: Trajectory, env: BlackBoxEnv) -> MonitorVerdict:
        return certpm_stability(prefix, self.lyapunov, env, self.zero_tol)


class PredPMMonitor:
    name = "predpm"

    def __init__(self, barrier, cfg: SurrogateCfg, thresholds: PredThresholds,
                 seed: int = 0):
        self.barrier = barrier
        self.cfg = cfg
        self.thresholds = thresholds
        self._rng = np.random.default_rng(seed)

    def verdict(self, prefix: Trajectory, env: BlackBoxEnv) -> MonitorVerdict:
        x_n = prefix.states[-1]
        assessment = predpm_assess(x_n, env.velocity_of(x_n), self.barrier,
                                   env, self.cfg, self._rng)
        flagged = predpm_verdict(assessment, self.thresholds)
        cause = barrier_check(self.barrier, prefix.observations[-1], None,
                              x_n, env)
        return MonitorVerdict(flagged, cause, assessment)


class BaselineMonitor:
    name = "baseline"

    def verdict(self, prefix: Trajectory, env: BlackBoxEnv) -> MonitorVerdict:
        return baseline_monitor(prefix, env)
