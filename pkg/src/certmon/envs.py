"""Simulated continuous-time systems behind a black-box stepping interface.

Two desk-scale environments are provided: a planar double-integrator drone
and a planar ship with first-order actuated surge/yaw. Both live in a
[0, 10]^2 arena with circular obstacles moving along periodic waypoint
loops. Monitoring and repair code interacts with an environment only
through reset/step/observe and the membership predicates; the derivative
function itself is never exposed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

OBSTACLE_SENTINEL_DISTANCE = 100.0


class EnvError(ValueError):
    pass


@dataclass
class SystemState:
    """State vector plus the simulation time at which it was observed."""

    values: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamp < 0:
            raise EnvError("negative timestamp")

    def copy(self) -> "SystemState":
        return SystemState(self.values.copy(), self.timestamp)


@dataclass
class Trajectory:
    """Timestamped state sequence, optionally with observations and actions."""

    times: list[float]
    states: list[SystemState]
    observations: list[np.ndarray] | None = None
    actions: list[np.ndarray] | None = None

    def __post_init__(self):
        if not self.times:
            raise EnvError("empty trajectory")
        if abs(self.times[0]) > 1e-12:
            raise EnvError("trajectory must start at t=0")
        diffs = np.diff(self.times)
        if len(diffs) and diffs.min() <= 0:
            raise EnvError("time points must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def points(self) -> list[tuple[float, SystemState]]:
        return list(zip(self.times, self.states))


@dataclass
class ObstacleTrack:
    """Circular obstacle translating along a closed waypoint loop at
    constant speed; one full loop takes `period` seconds."""

    waypoints: np.ndarray
    period: float
    radius: float

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if self.period <= 0 or self.radius <= 0:
            raise EnvError("obstacle period and radius must be positive")
        pts = self.waypoints
        closed = np.vstack([pts, pts[:1]])
        seg = np.diff(closed, axis=0)
        self._seg_len = np.linalg.norm(seg, axis=1)
        self._seg_dir = np.divide(
            seg, np.maximum(self._seg_len[:, None], 1e-300)
        )
        self._cum = np.concatenate([[0.0], np.cumsum(self._seg_len)])
        self._total = float(self._cum[-1])

    def position(self, t: float) -> np.ndarray:
        if self._total <= 0:
            return self.waypoints[0].copy()
        s = (t % self.period) / self.period * self._total
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        return self.waypoints[i] + self._seg_dir[i] * (s - self._cum[i])

    def velocity(self, t: float) -> np.ndarray:
        if self._total <= 0:
            return np.zeros(2)
        speed = self._total / self.period
        s = (t % self.period) / self.period * self._total
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        return self._seg_dir[i] * speed


@dataclass
class EnvSpec:
    """Static description of an environment instance.

    `init_low`/`init_high` bound the initial set in full state coordinates,
    `state_low`/`state_high` bound the region used for uniform state-space
    sampling during training. The goal set is a disc in position space.
    """

    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    arena_low: np.ndarray
    arena_high: np.ndarray
    init_low: np.ndarray
    init_high: np.ndarray
    state_low: np.ndarray
    state_high: np.ndarray
    goal_center: np.ndarray
    goal_radius: float
    agent_radius: float
    obstacles: list[ObstacleTrack] = field(default_factory=list)
    h_int: float = 0.02
    k_nearest: int = 8
    monitor_dt: float = 0.1
    horizon_steps: int = 200

    def __post_init__(self):
        for name in ("action_low", "action_high", "arena_low", "arena_high",
                     "init_low", "init_high", "state_low", "state_high",
                     "goal_center"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.h_int <= 0 or self.h_int > self.monitor_dt + 1e-12:
            raise EnvError("integrator substep must be positive and <= monitor_dt")
        if self.goal_radius <= 0 or self.agent_radius <= 0:
            raise EnvError("radii must be positive")

    @property
    def obs_dim(self) -> int:
        return self.state_dim + 4 * self.k_nearest + 2


def _validate_region_separation(spec: EnvSpec, samples_per_period: int = 64) -> None:
    """Check X_0 and X_g stay clear of the unsafe set along the whole
    obstacle schedule (sampled over one period per track)."""
    clear = spec.agent_radius
    ilo, ihi = spec.init_low[:2], spec.init_high[:2]
    for track in spec.obstacles:
        for phase in np.linspace(0.0, track.period, samples_per_period, endpoint=False):
            c = track.position(phase)
            nearest = np.clip(c, ilo, ihi)
            if np.linalg.norm(c - nearest) <= track.radius + clear:
                raise EnvError(
                    f"{spec.name}: obstacle track intersects the initial set")
            if np.linalg.norm(c - spec.goal_center) <= (
                track.radius + clear + spec.goal_radius
            ):
                raise EnvError(f"{spec.name}: obstacle track intersects the goal set")


class BlackBoxEnv:
    """Opaque stepper for one trajectory at a time.

    The derivative function is held privately; the public surface exposes
    only resets, steps, observations, set-membership queries and the
    conventions (velocity extraction, action rate indices) that monitors
    need. Call counters in `stats` let tests assert the black-box
    discipline of client code.
    """

    def __init__(self, spec: EnvSpec, derivative, validate: bool = True):
        if validate:
            _validate_region_separation(spec)
        self._spec = spec
        self._derivative = derivative
        self._state = None
        self._t = 0.0
        self.stats = {"resets": 0, "steps": 0, "observations": 0,
                      "predicate_queries": 0, "clipped_actions": 0}

    # -- static facts about the known parts of the system ------------------

    @property
    def name(self) -> str:
        return self._spec.name

    @property
    def state_dim(self) -> int:
        return self._spec.state_dim

    @property
    def action_dim(self) -> int:
        return self._spec.action_dim

    @property
    def obs_dim(self) -> int:
        return self._spec.obs_dim

    @property
    def action_low(self) -> np.ndarray:
        return self._spec.action_low.copy()

    @property
    def action_high(self) -> np.ndarray:
        return self._spec.action_high.copy()

    @property
    def arena_low(self) -> np.ndarray:
        return self._spec.arena_low.copy()

    @property
    def arena_high(self) -> np.ndarray:
        return self._spec.arena_high.copy()

    @property
    def goal_center(self) -> np.ndarray:
        return self._spec.goal_center.copy()

    @property
    def goal_radius(self) -> float:
        return self._spec.goal_radius

    @property
    def agent_radius(self) -> float:
        return self._spec.agent_radius

    @property
    def monitor_dt(self) -> float:
        return self._spec.monitor_dt

    @property
    def horizon_steps(self) -> int:
        return self._spec.horizon_steps

    @property
    def k_nearest(self) -> int:
        return self._spec.k_nearest

    def clone(self) -> "BlackBoxEnv":
        return type(self)(self._spec, self._derivative, validate=False)

    # -- lifecycle ----------------------------------------------------------

    def reset(self, x0: SystemState, override: bool = False) -> None:
        """Start a new trajectory at x0.

        Without `override`, x0 must belong to the initial set (and hence
        carry timestamp 0, putting the obstacles at phase 0). Oracle tests
        and data collection may override to start anywhere; the internal
        clock is then set to x0's timestamp so obstacle phases stay
        consistent with the state's own time.
        """
        self.stats["resets"] += 1
        if x0.values.shape != (self.state_dim,):
            raise EnvError(
                f"state dim {x0.values.shape} != ({self.state_dim},)")
        if not override and not self.in_initial(x0):
            raise EnvError("reset state outside the initial set "
                           "(pass override=True to force)")
        self._state = x0.values.copy()
        self._t = float(x0.timestamp) if override else 0.0

    def current_state(self) -> SystemState:
        if self._state is None:
            raise EnvError("environment not reset")
        return SystemState(self._state.copy(), self._t)

    def step(self, action: np.ndarray, dt: float | None = None) -> SystemState:
        """Advance by dt (default: the monitoring interval) under a
        zero-order-hold action, integrating with fixed-substep RK4."""
        if self._state is None:
            raise EnvError("environment not reset")
        if dt is None:
            dt = self._spec.monitor_dt
        if dt <= 0:
            raise EnvError("step duration must be positive")
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (self.action_dim,):
            raise EnvError(f"action dim {a.shape} != ({self.action_dim},)")
        if not np.all(np.isfinite(a)):
            raise EnvError("non-finite action")
        clipped = np.clip(a, self._spec.action_low, self._spec.action_high)
        if not np.array_equal(clipped, a):
            self.stats["clipped_actions"] += 1
        self.stats["steps"] += 1

        n_sub = max(1, int(round(dt / self._spec.h_int)))
        h = dt / n_sub
        x = self._state
        for _ in range(n_sub):
            k1 = self._derivative(x, clipped)
            k2 = self._derivative(x + 0.5 * h * k1, clipped)
            k3 = self._derivative(x + 0.5 * h * k2, clipped)
            k4 = self._derivative(x + h * k3, clipped)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        self._state = x
        self._t += dt
        return SystemState(x.copy(), self._t)

    # -- observations -------------------------------------------------------

    def obstacle_snapshot(self, t: float):
        """Centers, radii and velocities of every obstacle at time t."""
        tracks = self._spec.obstacles
        if not tracks:
            return np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2))
        centers = np.array([trk.position(t) for trk in tracks])
        radii = np.array([trk.radius for trk in tracks])
        vels = np.array([trk.velocity(t) for trk in tracks])
        return centers, radii, vels

    def observe(self, state: SystemState) -> np.ndarray:
        """Own state, then (rel pos, rel vel) of the k nearest obstacles
        sorted by distance (ties by obstacle index), then the relative goal
        position. Missing obstacle slots are padded with a far-away,
        motionless sentinel."""
        self.stats["observations"] += 1
        pos = state.values[:2]
        vel = self.velocity_of(state)
        centers, _, ovels = self.obstacle_snapshot(state.timestamp)
        k = self._spec.k_nearest
        slots = np.zeros((k, 4))
        slots[:, :2] = OBSTACLE_SENTINEL_DISTANCE
        if len(centers):
            d = np.linalg.norm(centers - pos, axis=1)
            order = np.argsort(d, kind="stable")[:k]
            for j, idx in enumerate(order):
                slots[j, :2] = centers[idx] - pos
                slots[j, 2:] = ovels[idx] - vel
        goal_rel = self._spec.goal_center - pos
        return np.concatenate([state.values, slots.ravel(), goal_rel])

    def observe_kinematics(self, positions: np.ndarray, velocities: np.ndarray,
                           t: float) -> np.ndarray:
        """Batched observations for synthetic kinematic states at frozen
        obstacle time t; used by the predictive monitor's surrogate."""
        P = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        V = np.atleast_2d(np.asarray(velocities, dtype=np.float64))
        n = P.shape[0]
        own = self._kinematic_state_values(P, V)
        centers, _, ovels = self.obstacle_snapshot(t)
        k = self._spec.k_nearest
        slots = np.zeros((n, k, 4))
        slots[:, :, :2] = OBSTACLE_SENTINEL_DISTANCE
        if len(centers):
            d = np.linalg.norm(centers[None, :, :] - P[:, None, :], axis=2)
            order = np.argsort(d, axis=1, kind="stable")[:, :k]
            sel = centers[order]
            slots[:, : order.shape[1], :2] = sel - P[:, None, :]
            slots[:, : order.shape[1], 2:] = ovels[order] - V[:, None, :]
        goal_rel = self._spec.goal_center[None, :] - P
        return np.concatenate([own, slots.reshape(n, -1), goal_rel], axis=1)

    def state_from_kinematics(self, position, velocity,
                              timestamp: float = 0.0) -> SystemState:
        """Map a planar position/velocity pair into this environment's state
        convention (used to evaluate certificates on surrogate states)."""
        P = np.asarray(position, dtype=np.float64)[None, :]
        V = np.asarray(velocity, dtype=np.float64)[None, :]
        return SystemState(self._kinematic_state_values(P, V)[0], timestamp)

    def _kinematic_state_values(self, P, V):
        raise NotImplementedError

    def velocity_of(self, state: SystemState) -> np.ndarray:
        """World-frame planar velocity extracted from the state."""
        raise NotImplementedError

    def action_rate_indices(self) -> list[int]:
        """State indices whose time derivative each action component
        directly drives (unit gain up to damping)."""
        raise NotImplementedError

    def action_accel_frame(self, velocity: np.ndarray) -> np.ndarray:
        """(2, action_dim) first-order map from an action perturbation to a
        world-frame acceleration, used by kinematic lookahead probes."""
        raise NotImplementedError

    # -- membership predicates ------------------------------------------------

    def unsafe_margin(self, positions: np.ndarray, t: float) -> np.ndarray:
        """Signed clearance to the unsafe set at obstacle time t, batched:
        <= 0 inside an obstacle's inflated disc or outside the arena."""
        P = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        centers, radii, _ = self.obstacle_snapshot(t)
        lo, hi = self._spec.arena_low, self._spec.arena_high
        wall = np.minimum((P - lo).min(axis=1), (hi - P).min(axis=1))
        if len(centers):
            d = np.linalg.norm(centers[None, :, :] - P[:, None, :], axis=2)
            clear = (d - (radii + self._spec.agent_radius)[None, :]).min(axis=1)
            return np.minimum(clear, wall)
        return wall

    def in_unsafe(self, state: SystemState) -> bool:
        self.stats["predicate_queries"] += 1
        pos = state.values[:2]
        lo, hi = self._spec.arena_low, self._spec.arena_high
        if np.any(pos < lo) or np.any(pos > hi):
            return True
        centers, radii, _ = self.obstacle_snapshot(state.timestamp)
        if len(centers):
            d = np.linalg.norm(centers - pos, axis=1)
            if np.any(d < radii + self._spec.agent_radius):
                return True
        return False

    def in_goal(self, state: SystemState) -> bool:
        self.stats["predicate_queries"] += 1
        pos = state.values[:2]
        return float(np.linalg.norm(pos - self._spec.goal_center)) <= self._spec.goal_radius

    def in_initial(self, state: SystemState) -> bool:
        self.stats["predicate_queries"] += 1
        v = state.values
        return bool(np.all(v >= self._spec.init_low - 1e-12)
                    and np.all(v <= self._spec.init_high + 1e-12))

    # -- sampling --------------------------------------------------------------

    def sample_initial_states(self, count: int,
                              rng: np.random.Generator) -> list[SystemState]:
        """Uniform i.i.d. samples from the initial set, timestamp 0."""
        if count < 0:
            raise EnvError("count must be nonnegative")
        lo, hi = self._spec.init_low, self._spec.init_high
        draws = rng.uniform(lo, hi, size=(count, self.state_dim))
        return [SystemState(row, 0.0) for row in draws]

    def sample_states(self, count: int, rng: np.random.Generator,
                      random_time: bool = True) -> list[SystemState]:
        """Uniform samples over the training state box, with timestamps on
        the monitoring grid across one horizon so obstacle geometry varies."""
        lo, hi = self._spec.state_low, self._spec.state_high
        draws = rng.uniform(lo, hi, size=(count, self.state_dim))
        times = (self._grid_times(count, rng) if random_time
                 else np.zeros(count))
        return [SystemState(row, float(t)) for row, t in zip(draws, times)]

    def _grid_times(self, count, rng):
        steps = rng.integers(0, self._spec.horizon_steps + 1, size=count)
        return steps * self._spec.monitor_dt

    def sample_unsafe_states(self, count: int,
                             rng: np.random.Generator) -> list[SystemState]:
        """States inside obstacle discs (or just outside the arena when
        there are no obstacles), used for replay data during repair."""
        out: list[SystemState] = []
        tracks = self._spec.obstacles
        lo, hi = self._spec.state_low, self._spec.state_high
        for _ in range(count):
            base = rng.uniform(lo, hi)
            t = float(self._grid_times(1, rng)[0])
            if tracks:
                trk = tracks[rng.integers(len(tracks))]
                c = trk.position(t)
                r = (trk.radius + self.agent_radius) * math.sqrt(rng.uniform(0.0, 0.95))
                ang = rng.uniform(0.0, 2 * math.pi)
                base[:2] = c + r * np.array([math.cos(ang), math.sin(ang)])
            else:
                side = rng.integers(2)
                base[side] = self._spec.arena_high[side] + rng.uniform(0.05, 0.5)
            out.append(SystemState(base, t))
        return out

    def sample_goal_states(self, count: int,
                           rng: np.random.Generator) -> list[SystemState]:
        """States with positions uniform in the goal disc."""
        out: list[SystemState] = []
        lo, hi = self._spec.state_low, self._spec.state_high
        for _ in range(count):
            base = rng.uniform(lo, hi)
            r = self.goal_radius * math.sqrt(rng.uniform())
            ang = rng.uniform(0.0, 2 * math.pi)
            base[:2] = self._spec.goal_center + r * np.array(
                [math.cos(ang), math.sin(ang)])
            out.append(SystemState(base, float(self._grid_times(1, rng)[0])))
        return out


class Drone2DEnv(BlackBoxEnv):
    """Planar double integrator: state (x, y, vx, vy), action (ax, ay)."""

    def _kinematic_state_values(self, P, V):
        return np.concatenate([P, V], axis=1)

    def velocity_of(self, state: SystemState) -> np.ndarray:
        return state.values[2:4].copy()

    def action_rate_indices(self) -> list[int]:
        return [2, 3]

    def action_accel_frame(self, velocity: np.ndarray) -> np.ndarray:
        return np.eye(2)


class Ship2DEnv(BlackBoxEnv):
    """Planar ship: state (x, y, heading, surge, sway, yaw rate); the two
    actions drive surge and yaw acceleration against linear damping."""

    def _kinematic_state_values(self, P, V):
        speed = np.linalg.norm(V, axis=1)
        heading = np.where(speed > 1e-9, np.arctan2(V[:, 1], V[:, 0]), 0.0)
        n = P.shape[0]
        vals = np.zeros((n, 6))
        vals[:, :2] = P
        vals[:, 2] = heading
        vals[:, 3] = speed
        return vals

    def velocity_of(self, state: SystemState) -> np.ndarray:
        _, _, th, u, v, _ = state.values
        return np.array([u * math.cos(th) - v * math.sin(th),
                         u * math.sin(th) + v * math.cos(th)])

    def action_rate_indices(self) -> list[int]:
        return [3, 5]

    def action_accel_frame(self, velocity: np.ndarray) -> np.ndarray:
        # surge accel acts along the velocity heading; yaw accel deflects
        # laterally with strength growing with speed
        speed = float(np.linalg.norm(velocity))
        if speed > 1e-9:
            fwd = velocity / speed
        else:
            fwd = np.array([1.0, 0.0])
        lateral = np.array([-fwd[1], fwd[0]]) * 0.3 * max(speed, 0.2)
        return np.column_stack([fwd, lateral])


def _drone_derivative(x, a):
    return np.array([x[2], x[3], a[0], a[1]])


def _ship_derivative(x, a):
    th, u, v, w = x[2], x[3], x[4], x[5]
    return np.array([
        u * math.cos(th) - v * math.sin(th),
        u * math.sin(th) + v * math.cos(th),
        w,
        a[0] - 0.5 * u,
        -0.5 * v,
        a[1] - 0.5 * w,
    ])


def _default_tracks(radius: float) -> list[ObstacleTrack]:
    # the first four tracks sweep a ring just outside the initial box, so
    # slowly drifting agents keep meeting traffic while the initial set
    # itself never intersects an obstacle; the rest add mid-field texture
    return [
        ObstacleTrack([(1.55, 1.2), (1.55, 3.8)], period=9.0, radius=radius),
        ObstacleTrack([(3.45, 1.2), (3.45, 3.8)], period=8.0, radius=radius),
        ObstacleTrack([(1.2, 1.55), (3.8, 1.55)], period=7.0, radius=radius),
        ObstacleTrack([(1.2, 3.45), (3.8, 3.45)], period=10.0, radius=radius),
        ObstacleTrack([(5.0, 5.0), (7.0, 5.0), (7.0, 7.0), (5.0, 7.0)],
                      period=16.0, radius=radius),
        ObstacleTrack([(6.0, 2.0), (8.0, 3.0)], period=11.0, radius=radius),
        ObstacleTrack([(4.5, 8.2), (6.5, 8.2)], period=7.0, radius=radius),
        ObstacleTrack([(7.8, 5.0), (7.8, 7.0)], period=12.0, radius=radius),
    ]


def make_drone2d(**overrides) -> Drone2DEnv:
    spec_kwargs = dict(
        name="drone2d",
        state_dim=4,
        action_dim=2,
        action_low=[-1.0, -1.0],
        action_high=[1.0, 1.0],
        arena_low=[0.0, 0.0],
        arena_high=[10.0, 10.0],
        init_low=[2.2, 2.2, -0.05, -0.05],
        init_high=[2.8, 2.8, 0.05, 0.05],
        # sampling reaches past the walls so the exterior shows up as
        # unsafe-set training data
        state_low=[-0.5, -0.5, -1.5, -1.5],
        state_high=[10.5, 10.5, 1.5, 1.5],
        goal_center=[8.5, 8.5],
        goal_radius=0.5,
        agent_radius=0.15,
        obstacles=_default_tracks(radius=0.4),
        h_int=0.02,
        k_nearest=8,
        monitor_dt=0.1,
        horizon_steps=200,
    )
    spec_kwargs.update(overrides)
    return Drone2DEnv(EnvSpec(**spec_kwargs), _drone_derivative)


def make_ship2d(**overrides) -> Ship2DEnv:
    spec_kwargs = dict(
        name="ship2d",
        state_dim=6,
        action_dim=2,
        action_low=[-1.0, -1.0],
        action_high=[1.0, 1.0],
        arena_low=[0.0, 0.0],
        arena_high=[10.0, 10.0],
        init_low=[2.2, 2.2, -0.3, 0.05, -0.02, -0.1],
        init_high=[2.8, 2.8, 1.8, 0.3, 0.02, 0.1],
        state_low=[-0.5, -0.5, -math.pi, -0.5, -0.5, -2.0],
        state_high=[10.5, 10.5, math.pi, 2.0, 0.5, 2.0],
        goal_center=[8.5, 8.5],
        goal_radius=0.5,
        agent_radius=0.25,
        obstacles=_default_tracks(radius=0.35),
        h_int=0.02,
        k_nearest=8,
        monitor_dt=0.1,
        horizon_steps=200,
    )
    spec_kwargs.update(overrides)
    return Ship2DEnv(EnvSpec(**spec_kwargs), _ship_derivative)


ENV_FACTORIES = {"drone2d": make_drone2d, "ship2d": make_ship2d}


def make_env(name: str, **overrides) -> BlackBoxEnv:
    try:
        factory = ENV_FACTORIES[name]
    except KeyError:
        raise EnvError(f"unknown environment {name!r}") from None
    return factory(**overrides)


def rollout(env: BlackBoxEnv, policy, x0: SystemState,
            n_steps: int | None = None, dt: float | None = None,
            override_reset: bool = False) -> Trajectory:
    """Run the policy from x0 for n_steps monitoring intervals, recording
    times, states, observations and applied actions."""
    if n_steps is None:
        n_steps = env.horizon_steps
    if dt is None:
        dt = env.monitor_dt
    env.reset(x0, override=override_reset)
    state = env.current_state()
    times = [0.0]
    states = [state]
    observations = [env.observe(state)]
    actions = []
    for i in range(n_steps):
        action = policy.act(observations[-1])
        state = env.step(action, dt)
        actions.append(np.asarray(action, dtype=np.float64))
        times.append((i + 1) * dt)
        states.append(state)
        observations.append(env.observe(state))
    return Trajectory(times, states, observations, actions)
