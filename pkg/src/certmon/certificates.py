"""Barrier/Lyapunov condition checks and the network wrappers they act on.

A barrier function certifies safety through three conditions (nonnegative
on initial states, negative on unsafe states, non-decreasing rate bound on
its nonnegative sublevel set); a Lyapunov function certifies stability
through zero-at-goal, positivity and strict decrease. Both are evaluated
on observation vectors, with the rate term approximated by a forward
difference of consecutive observations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .envs import BlackBoxEnv, SystemState
from .nn import Mlp, mlp_backward, mlp_forward


class CertCondition(enum.Enum):
    NONE = "none"
    PROPERTY_UNSAFE = "property_unsafe"
    INIT = "init_condition"
    SAFETY = "safety_condition"
    NON_DECREASING = "non_decreasing_condition"
    ZERO_AT_GOAL = "zero_at_goal_condition"
    POSITIVITY = "positivity_condition"
    DECREASING = "decreasing_condition"


@dataclass
class CertVerdict:
    """Highest-priority violated condition at one state, plus the full set
    of conditions that failed there and the violating quantity."""

    kind: CertCondition
    state: SystemState | None = None
    detail: float = 0.0
    flags: tuple[CertCondition, ...] = ()

    @property
    def violated(self) -> bool:
        return self.kind is not CertCondition.NONE


class PolicyFn:
    """Network policy squashed into the action box via tanh scaling."""

    def __init__(self, net: Mlp, action_low, action_high):
        self.net = net
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        if net.output_dim != self.action_low.shape[0]:
            raise ValueError("policy output dim does not match action dim")
        self._center = 0.5 * (self.action_high + self.action_low)
        self._half = 0.5 * (self.action_high - self.action_low)

    def act(self, obs: np.ndarray) -> np.ndarray:
        raw, _ = mlp_forward(self.net, obs)
        return self._center + self._half * np.tanh(raw)

    def act_batch(self, obs: np.ndarray) -> np.ndarray:
        raw, _ = mlp_forward(self.net, np.atleast_2d(obs))
        return self._center + self._half * np.tanh(raw)

    def act_batch_with_cache(self, obs: np.ndarray):
        raw, cache = mlp_forward(self.net, np.atleast_2d(obs))
        return self._center + self._half * np.tanh(raw), (cache, raw)

    def backward(self, cache, action_grad: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients of sum(action * action_grad)."""
        mlp_cache, raw = cache
        t = np.tanh(raw)
        raw_grad = np.asarray(action_grad) * self._half * (1.0 - t * t)
        grads, _ = mlp_backward(self.net, mlp_cache, raw_grad)
        return grads

    def copy(self) -> "PolicyFn":
        return PolicyFn(self.net.copy(), self.action_low, self.action_high)


class _ScalarFn:
    """Shared wrapper for scalar certificate networks (output dim 1)."""

    def __init__(self, net: Mlp):
        if net.output_dim != 1:
            raise ValueError("certificate network must have scalar output")
        self.net = net

    def value(self, obs: np.ndarray) -> float:
        y, _ = mlp_forward(self.net, np.asarray(obs, dtype=np.float64))
        return float(y[0])

    def value_batch(self, obs: np.ndarray) -> np.ndarray:
        y, _ = mlp_forward(self.net, np.atleast_2d(obs))
        return y[:, 0]

    def value_batch_with_cache(self, obs: np.ndarray):
        y, cache = mlp_forward(self.net, np.atleast_2d(obs))
        return y[:, 0], cache

    def backward(self, cache, value_grad: np.ndarray) -> list[np.ndarray]:
        grads, _ = mlp_backward(self.net, cache,
                                np.asarray(value_grad)[:, None])
        return grads

    def input_gradients(self, obs: np.ndarray) -> np.ndarray:
        """d value / d observation, batched."""
        X = np.atleast_2d(obs)
        y, cache = mlp_forward(self.net, X)
        _, gx = mlp_backward(self.net, cache, np.ones((X.shape[0], 1)))
        return gx


class BarrierFn(_ScalarFn):
    """Scalar network certifying safety; no output constraint."""

    def __init__(self, net: Mlp):
        if net.output_transform != "identity":
            raise ValueError("barrier network must use the identity output")
        super().__init__(net)

    def copy(self) -> "BarrierFn":
        return BarrierFn(self.net.copy())


class LyapunovFn(_ScalarFn):
    """Scalar network with squared output, hence nonnegative everywhere and
    able to reach exactly zero on the goal set."""

    def __init__(self, net: Mlp):
        if net.output_transform != "non_negative":
            raise ValueError("lyapunov network must use the non-negative output")
        super().__init__(net)

    def copy(self) -> "LyapunovFn":
        return LyapunovFn(self.net.copy())


@dataclass
class LieApproxConfig:
    """Constants for the finite-difference rate-approximation error bound:
    dt is the observation spacing, lip_cert bounds the certificate's
    Lipschitz constant, lip_dyn the dynamics' Lipschitz constant, and
    norm_dyn the magnitude of the dynamics."""

    dt: float
    lip_cert: float
    lip_dyn: float
    norm_dyn: float

    def __post_init__(self):
        if min(self.lip_cert, self.lip_dyn, self.norm_dyn) <= 0 or self.dt < 0:
            raise ValueError("constants must be positive (dt nonnegative)")


def lie_derivative_fd(value_at_xn: float, value_at_xn1: float,
                      t_n: float, t_n1: float) -> float:
    """Forward-difference rate of a scalar function along the trajectory."""
    gap = t_n1 - t_n
    if gap <= 0:
        raise ValueError("time points must be strictly increasing")
    return (value_at_xn1 - value_at_xn) / gap


def lie_error_bound(cfg: LieApproxConfig) -> float:
    """Worst-case gap between the finite-difference rate and the true rate."""
    return 0.5 * cfg.dt * (
        cfg.lip_cert * cfg.lip_dyn + cfg.norm_dyn * cfg.lip_cert
    ) * cfg.norm_dyn


def barrier_check(B, obs_n: np.ndarray, obs_n1: np.ndarray | None,
                  x_n: SystemState, env: BlackBoxEnv,
                  dt: float | None = None) -> CertVerdict:
    """All barrier conditions at one state; obs_n1 is the observation one
    interval later (None skips the rate condition). The verdict kind is the
    first hit in priority order, every failed condition lands in flags."""
    if dt is None:
        dt = env.monitor_dt
    flags: list[CertCondition] = []
    details: dict[CertCondition, float] = {}

    b_n = B.value(obs_n)
    if env.in_unsafe(x_n):
        flags.append(CertCondition.PROPERTY_UNSAFE)
        details[CertCondition.PROPERTY_UNSAFE] = float(
            env.unsafe_margin(x_n.values[:2], x_n.timestamp)[0])
    if env.in_initial(x_n) and b_n < 0:
        flags.append(CertCondition.INIT)
        details[CertCondition.INIT] = b_n
    if b_n < 0:
        flags.append(CertCondition.SAFETY)
        details[CertCondition.SAFETY] = b_n
    if obs_n1 is not None and b_n >= 0:
        rate = lie_derivative_fd(b_n, B.value(obs_n1), 0.0, dt)
        if rate + b_n < 0:
            flags.append(CertCondition.NON_DECREASING)
            details[CertCondition.NON_DECREASING] = rate + b_n
    if not flags:
        return CertVerdict(CertCondition.NONE, x_n)
    kind = flags[0]
    return CertVerdict(kind, x_n, details[kind], tuple(flags))


def lyapunov_check(V, obs_n: np.ndarray, obs_n1: np.ndarray | None,
                   x_n: SystemState, env: BlackBoxEnv,
                   zero_tol: float = 1e-3,
                   dt: float | None = None) -> CertVerdict:
    """All Lyapunov conditions at one state, zero-at-goal tested up to
    zero_tol (exact equality is unattainable in floating point)."""
    if dt is None:
        dt = env.monitor_dt
    flags: list[CertCondition] = []
    details: dict[CertCondition, float] = {}

    v_n = V.value(obs_n)
    at_goal = env.in_goal(x_n)
    if at_goal and abs(v_n) > zero_tol:
        flags.append(CertCondition.ZERO_AT_GOAL)
        details[CertCondition.ZERO_AT_GOAL] = v_n
    if v_n < 0:
        flags.append(CertCondition.POSITIVITY)
        details[CertCondition.POSITIVITY] = v_n
    if obs_n1 is not None and not at_goal and v_n > 0:
        rate = lie_derivative_fd(v_n, V.value(obs_n1), 0.0, dt)
        if rate >= 0:
            flags.append(CertCondition.DECREASING)
            details[CertCondition.DECREASING] = rate
    if not flags:
        return CertVerdict(CertCondition.NONE, x_n)
    kind = flags[0]
    return CertVerdict(kind, x_n, details[kind], tuple(flags))
