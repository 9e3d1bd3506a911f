"""Certificate losses and the joint policy/certificate training loop.

The barrier loss has one term per barrier condition (penalty for negative
values on initial states, positive values on unsafe states, and a rate
deficit on the non-decreasing set); the Lyapunov loss penalizes nonzero
values on goal states and nonnegative rates elsewhere. Rate terms use
stored one-step successor observations produced by the black-box system.

Because the system is not differentiable, the policy parameters receive
gradient through a surrogate: each rate sample stores a response direction
(how the certificate a short kinematic lookahead away reacts to each
action component, see lookahead_response_dirs), and the rate is corrected
by that direction times the drift of the current policy action from the
action that generated the successor. The directions are constants of the
dataset (refreshed from the live certificates between epochs), so both
parameter gradients are exact for the loss value actually computed, and a
proximal penalty on the action drift bounds how far one training run can
move the controller.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .certificates import BarrierFn, LyapunovFn, PolicyFn
from .envs import BlackBoxEnv, SystemState, rollout
from .nn import adam_init, apply_gradients, mlp_init


def _cat_opt(a, b):
    if a is None or b is None:
        return None
    return np.concatenate([a, b], axis=0)


@dataclass
class RatePairKinematics:
    """Planar position, world velocity and obstacle time of the states in
    a rate-pair set; needed to refresh the lookahead response directions.
    `steer` marks the samples that are allowed to push the policy (e.g.
    monitor-flagged states); the others only anchor it."""

    pos: np.ndarray
    vel: np.ndarray
    time: np.ndarray
    steer: np.ndarray | None = None

    def __post_init__(self):
        if self.steer is None:
            self.steer = np.ones(len(self.pos))

    def merged_with(self, other):
        if other is None:
            return None
        return RatePairKinematics(
            np.concatenate([self.pos, other.pos], axis=0),
            np.concatenate([self.vel, other.vel], axis=0),
            np.concatenate([self.time, other.time], axis=0),
            np.concatenate([self.steer, other.steer], axis=0))

    def sliced(self, idx):
        return RatePairKinematics(self.pos[idx], self.vel[idx],
                                  self.time[idx], self.steer[idx])


@dataclass
class BarrierDataset:
    """Observation sets for the three barrier loss terms. Non-decreasing
    entries carry the successor observation, the applied action, the
    stored response direction and (optionally) the kinematic info used to
    refresh those directions."""

    d_init: np.ndarray
    d_safe: np.ndarray
    nondec_obs: np.ndarray
    nondec_next: np.ndarray
    dt: float
    nondec_actions: np.ndarray | None = None
    nondec_dirs: np.ndarray | None = None
    nondec_kin: RatePairKinematics | None = None

    @classmethod
    def empty(cls, obs_dim: int, dt: float) -> "BarrierDataset":
        z = np.zeros((0, obs_dim))
        return cls(z, z.copy(), z.copy(), z.copy(), dt)

    def merged_with(self, other: "BarrierDataset") -> "BarrierDataset":
        kin = None
        if self.nondec_kin is not None:
            kin = self.nondec_kin.merged_with(other.nondec_kin)
        return BarrierDataset(
            _cat_opt(self.d_init, other.d_init),
            _cat_opt(self.d_safe, other.d_safe),
            _cat_opt(self.nondec_obs, other.nondec_obs),
            _cat_opt(self.nondec_next, other.nondec_next),
            self.dt,
            _cat_opt(self.nondec_actions, other.nondec_actions),
            _cat_opt(self.nondec_dirs, other.nondec_dirs),
            kin)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.d_init), len(self.d_safe), len(self.nondec_obs)


@dataclass
class LyapunovDataset:
    """Goal observations and decrease pairs for the Lyapunov loss."""

    d_goal: np.ndarray
    dec_obs: np.ndarray
    dec_next: np.ndarray
    dt: float
    dec_actions: np.ndarray | None = None
    dec_dirs: np.ndarray | None = None
    dec_kin: RatePairKinematics | None = None

    @classmethod
    def empty(cls, obs_dim: int, dt: float) -> "LyapunovDataset":
        z = np.zeros((0, obs_dim))
        return cls(z, z.copy(), z.copy(), dt)

    def merged_with(self, other: "LyapunovDataset") -> "LyapunovDataset":
        kin = None
        if self.dec_kin is not None:
            kin = self.dec_kin.merged_with(other.dec_kin)
        return LyapunovDataset(
            _cat_opt(self.d_goal, other.d_goal),
            _cat_opt(self.dec_obs, other.dec_obs),
            _cat_opt(self.dec_next, other.dec_next), self.dt,
            _cat_opt(self.dec_actions, other.dec_actions),
            _cat_opt(self.dec_dirs, other.dec_dirs),
            kin)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 256
    policy_lr: float = 1e-3
    cert_lr: float = 2e-3
    rollout_budget: int = 50
    sample_budget: int = 10_000
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 64)
    cert_hidden_dims: tuple[int, ...] | None = None
    with_lyapunov: bool = False
    goal_sample_budget: int = 500
    # policy updates wait until the certificates carry signal; None means
    # half the epoch budget
    policy_warmup_epochs: int | None = None
    # damping on policy-action drift per training run (see loss_barrier)
    proximal_weight: float = 8.0
    # separation margin inside the training hinges (the monitored
    # conditions themselves stay at threshold zero)
    loss_margin: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epoch/batch settings")
        if min(self.policy_lr, self.cert_lr) <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def warmup(self) -> int:
        if self.policy_warmup_epochs is None:
            return self.epochs // 2
        return self.policy_warmup_epochs


@dataclass
class LossResult:
    total: float
    terms: dict[str, float]
    cert_grads: list[np.ndarray]
    policy_grads: list[np.ndarray] | None


def _zero_grads(net):
    return [np.zeros_like(p) for p in net.parameters()]


def _accumulate(acc, grads):
    for a, g in zip(acc, grads):
        a += g


def _rate_correction(policy, data_obs, actions, dirs):
    """Current-policy action delta projected on the stored response
    direction, plus the pieces needed for the policy backward pass."""
    U, cache = policy.act_batch_with_cache(data_obs)
    corr = np.sum(dirs * (U - actions), axis=1)
    return corr, U, cache


def loss_barrier(policy: PolicyFn, barrier: BarrierFn,
                 data: BarrierDataset,
                 proximal_weight: float = 0.0,
                 margin: float = 0.0) -> LossResult:
    """Barrier training loss, its per-condition terms and exact gradients.

    Empty sets contribute exactly zero loss and gradient. A margin of
    exactly zero counts as satisfied. The policy gradients are None unless
    the rate set carries actions and response directions; a positive
    proximal weight additionally penalizes drift of the policy's actions
    away from the actions that generated the stored successors, bounding
    how far one retraining round can move the controller. A positive
    margin demands separation beyond the bare conditions during training
    (otherwise the all-zero certificate is a minimizer).
    """
    cert_grads = _zero_grads(barrier.net)
    policy_grads = None
    terms = {"init": 0.0, "safe": 0.0, "nondec": 0.0, "proximal": 0.0}

    if len(data.d_init):
        vals, cache = barrier.value_batch_with_cache(data.d_init)
        terms["init"] = float(np.mean(np.maximum(margin - vals, 0.0)))
        dv = -(vals < margin).astype(float) / len(vals)
        _accumulate(cert_grads, barrier.backward(cache, dv))

    if len(data.d_safe):
        vals, cache = barrier.value_batch_with_cache(data.d_safe)
        terms["safe"] = float(np.mean(np.maximum(vals + margin, 0.0)))
        dv = (vals > -margin).astype(float) / len(vals)
        _accumulate(cert_grads, barrier.backward(cache, dv))

    n = len(data.nondec_obs)
    if n:
        b_now, cache_now = barrier.value_batch_with_cache(data.nondec_obs)
        b_next, cache_next = barrier.value_batch_with_cache(data.nondec_next)
        rate = (b_next - b_now) / data.dt
        use_policy = data.nondec_actions is not None and data.nondec_dirs is not None
        pol_cache = current_u = None
        if use_policy:
            corr, current_u, pol_cache = _rate_correction(
                policy, data.nondec_obs, data.nondec_actions, data.nondec_dirs)
            rate = rate + corr
        deficit = margin - rate - b_now
        terms["nondec"] = float(np.mean(np.maximum(deficit, 0.0)))
        active = (deficit > 0).astype(float) / n
        _accumulate(cert_grads,
                    barrier.backward(cache_now, active * (1.0 / data.dt - 1.0)))
        _accumulate(cert_grads,
                    barrier.backward(cache_next, active * (-1.0 / data.dt)))
        if use_policy:
            du = -active[:, None] * data.nondec_dirs
            drift = current_u - data.nondec_actions
            terms["proximal"] = proximal_weight * float(np.mean(
                np.sum(drift * drift, axis=1)))
            du += 2.0 * proximal_weight * drift / n
            policy_grads = policy.backward(pol_cache, du)

    total = sum(terms.values())
    return LossResult(total, terms, cert_grads, policy_grads)


def loss_lyapunov(policy: PolicyFn, lyapunov: LyapunovFn,
                  data: LyapunovDataset,
                  proximal_weight: float = 0.0,
                  margin: float = 0.0) -> LossResult:
    """Lyapunov training loss (squared value on goal states, positive-rate
    and negativity penalties elsewhere) with exact gradients. A positive
    margin demands strictly decreasing values during training, ruling out
    the all-zero certificate."""
    cert_grads = _zero_grads(lyapunov.net)
    policy_grads = None
    terms = {"goal": 0.0, "decrease": 0.0, "proximal": 0.0}

    if len(data.d_goal):
        vals, cache = lyapunov.value_batch_with_cache(data.d_goal)
        terms["goal"] = float(np.mean(vals * vals))
        _accumulate(cert_grads, lyapunov.backward(cache, 2.0 * vals / len(vals)))

    n = len(data.dec_obs)
    if n:
        v_now, cache_now = lyapunov.value_batch_with_cache(data.dec_obs)
        v_next, cache_next = lyapunov.value_batch_with_cache(data.dec_next)
        rate = (v_next - v_now) / data.dt
        use_policy = data.dec_actions is not None and data.dec_dirs is not None
        pol_cache = current_u = None
        if use_policy:
            corr, current_u, pol_cache = _rate_correction(
                policy, data.dec_obs, data.dec_actions, data.dec_dirs)
            rate = rate + corr
        terms["decrease"] = float(
            np.mean(np.maximum(rate + margin, 0.0) + np.maximum(-v_now, 0.0)))
        active = (rate > -margin).astype(float) / n
        neg = (v_now < 0).astype(float) / n
        _accumulate(cert_grads,
                    lyapunov.backward(cache_now, -active / data.dt - neg))
        _accumulate(cert_grads, lyapunov.backward(cache_next, active / data.dt))
        if use_policy:
            du = active[:, None] * data.dec_dirs
            drift = current_u - data.dec_actions
            terms["proximal"] = proximal_weight * float(np.mean(
                np.sum(drift * drift, axis=1)))
            du += 2.0 * proximal_weight * drift / n
            policy_grads = policy.backward(pol_cache, du)

    total = sum(terms.values())
    return LossResult(total, terms, cert_grads, policy_grads)


def one_step_successor(env: BlackBoxEnv, state: SystemState,
                       policy: PolicyFn, dt: float | None = None) -> SystemState:
    """Black-box step of one monitoring interval under the policy action at
    the state's observation; runs on a clone so the caller's trajectory is
    untouched."""
    if dt is None:
        dt = env.monitor_dt
    sandbox = env.clone()
    sandbox.reset(state, override=True)
    action = policy.act(sandbox.observe(state))
    return sandbox.step(action, dt)


def lookahead_response_dirs(cert, env: BlackBoxEnv, kin: RatePairKinematics,
                            action_dim: int, probe_time: float = 0.8,
                            fd_step: float = 0.1) -> np.ndarray:
    """How the certificate at a short kinematic lookahead responds to each
    action component.

    From each sample the probe coasts for probe_time under a perturbed
    action (mapped to a world acceleration by the environment's
    convention, obstacles frozen at the sample's own time) and central-
    differences the certificate at the terminal state. The result points
    toward actions that raise the certificate ahead, exploiting its
    position shape rather than its velocity features. Directions are
    normalized to unit length (dropped when negligible) so the proximal
    damping in the losses sets the drift scale.
    """
    n = len(kin.pos)
    dirs = np.zeros((n, action_dim))
    if n == 0:
        return dirs
    T = probe_time
    frames = np.array([env.action_accel_frame(v) for v in kin.vel])  # (n,2,m)
    # evaluation is grouped by obstacle time; times repeat heavily because
    # samples come from rollouts on a fixed grid
    order = np.argsort(kin.time, kind="stable")
    for k in range(action_dim):
        accel = frames[:, :, k]
        values = {}
        for sign in (1.0, -1.0):
            a = sign * fd_step * accel
            P = kin.pos + kin.vel * T + 0.5 * a * T * T
            V = kin.vel + a * T
            vals = np.empty(n)
            i = 0
            while i < n:
                j = i
                t = kin.time[order[i]]
                while j < n and kin.time[order[j]] == t:
                    j += 1
                idx = order[i:j]
                obs = env.observe_kinematics(P[idx], V[idx], float(t))
                vals[idx] = cert.value_batch(obs)
                i = j
            values[sign] = vals
        dirs[:, k] = (values[1.0] - values[-1.0]) / (2 * fd_step)
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    cutoff = 1e-4
    return np.where(norms > cutoff, dirs / np.maximum(norms, cutoff), 0.0)


def _successor_observations(env, states, policy, dt):
    """One black-box step for every state; returns (obs, next_obs, actions)."""
    sandbox = env.clone()
    obs_list, next_list, act_list = [], [], []
    for s in states:
        sandbox.reset(s, override=True)
        obs = sandbox.observe(s)
        action = policy.act(obs)
        nxt = sandbox.step(action, dt)
        obs_list.append(obs)
        next_list.append(sandbox.observe(nxt))
        act_list.append(action)
    if not obs_list:
        z = np.zeros((0, env.obs_dim))
        return z, z.copy(), np.zeros((0, env.action_dim))
    return np.array(obs_list), np.array(next_list), np.array(act_list)


def states_kinematics(env: BlackBoxEnv, states,
                      steer: bool = True) -> RatePairKinematics:
    if not states:
        return RatePairKinematics(np.zeros((0, 2)), np.zeros((0, 2)),
                                  np.zeros(0))
    return RatePairKinematics(
        np.array([s.values[:2] for s in states]),
        np.array([env.velocity_of(s) for s in states]),
        np.array([s.timestamp for s in states]),
        np.full(len(states), 1.0 if steer else 0.0))


def build_barrier_dataset(env: BlackBoxEnv, policy: PolicyFn,
                          n_uniform: int, n_rollouts: int,
                          rng: np.random.Generator,
                          dt: float | None = None) -> BarrierDataset:
    """Initial training data: uniform state-space samples partitioned by
    set membership, plus states visited by on-policy rollouts. Every state
    contributes a rate pair; response directions are filled in later."""
    if dt is None:
        dt = env.monitor_dt
    states = env.sample_states(n_uniform, rng)
    obs, next_obs, actions = _successor_observations(env, states, policy, dt)

    init_rows = [o for s, o in zip(states, obs) if env.in_initial(s)]
    safe_rows = [o for s, o in zip(states, obs) if env.in_unsafe(s)]
    kin = states_kinematics(env, list(states))

    for x0 in env.sample_initial_states(n_rollouts, rng):
        traj = rollout(env.clone(), policy, x0, env.horizon_steps, dt)
        tr_obs = np.array(traj.observations)
        obs = np.concatenate([obs, tr_obs[:-1]], axis=0)
        next_obs = np.concatenate([next_obs, tr_obs[1:]], axis=0)
        actions = np.concatenate([actions, np.array(traj.actions)], axis=0)
        kin = kin.merged_with(states_kinematics(env, traj.states[:-1]))
        for s, o in zip(traj.states, traj.observations):
            if env.in_initial(s):
                init_rows.append(o)
            if env.in_unsafe(s):
                safe_rows.append(o)

    obs_dim = env.obs_dim
    d_init = np.array(init_rows) if init_rows else np.zeros((0, obs_dim))
    d_safe = np.array(safe_rows) if safe_rows else np.zeros((0, obs_dim))
    return BarrierDataset(d_init, d_safe, obs, next_obs, dt,
                          nondec_actions=actions,
                          nondec_dirs=np.zeros((len(obs), env.action_dim)),
                          nondec_kin=kin)


def build_lyapunov_dataset(env: BlackBoxEnv, policy: PolicyFn,
                           barrier_data: BarrierDataset, n_goal: int,
                           rng: np.random.Generator,
                           dt: float | None = None) -> LyapunovDataset:
    """Goal-disc samples plus the barrier dataset's rate pairs reused as
    decrease pairs (goal membership does not need to be excluded: the rate
    condition is only scored away from the goal by the monitors, and extra
    decrease pressure at the goal boundary is harmless)."""
    if dt is None:
        dt = env.monitor_dt
    goal_states = env.sample_goal_states(n_goal, rng)
    sandbox = env.clone()
    goal_obs = (np.array([sandbox.observe(s) for s in goal_states])
                if goal_states else np.zeros((0, env.obs_dim)))
    return LyapunovDataset(
        goal_obs, barrier_data.nondec_obs, barrier_data.nondec_next, dt,
        dec_actions=barrier_data.nondec_actions,
        dec_dirs=(None if barrier_data.nondec_dirs is None
                  else np.zeros_like(barrier_data.nondec_dirs)),
        dec_kin=barrier_data.nondec_kin)


def init_networks(env: BlackBoxEnv, hidden_dims, rng,
                  with_lyapunov: bool = False, cert_hidden_dims=None):
    """Fresh policy/certificate networks with the first layer scaled by the
    observation magnitudes so tanh units start in their active range. The
    policy's final layer starts small, so the initial controller is nearly
    passive rather than saturated at the action bounds."""
    scale = observation_scale(env)
    if cert_hidden_dims is None:
        cert_hidden_dims = hidden_dims

    def scaled(dims, transform="identity", out_gain=1.0):
        net = mlp_init(dims, rng, output_transform=transform)
        net.weights[0] = net.weights[0] / scale[None, :]
        net.weights[-1] = net.weights[-1] * out_gain
        return net

    obs_dim = env.obs_dim
    policy = PolicyFn(scaled([obs_dim, *hidden_dims, env.action_dim],
                             out_gain=0.05),
                      env.action_low, env.action_high)
    barrier = BarrierFn(scaled([obs_dim, *cert_hidden_dims, 1]))
    lyap = None
    if with_lyapunov:
        lyap = LyapunovFn(scaled([obs_dim, *cert_hidden_dims, 1],
                                 "non_negative"))
    return policy, barrier, lyap


def observation_scale(env: BlackBoxEnv) -> np.ndarray:
    """Per-feature magnitude estimate used to condition network inputs."""
    arena_span = float(np.max(env.arena_high - env.arena_low))
    scale = np.ones(env.obs_dim)
    scale[0:2] = arena_span
    scale[2:env.state_dim] = 2.0
    k = env.k_nearest
    for j in range(k):
        base = env.state_dim + 4 * j
        scale[base:base + 2] = arena_span
        scale[base + 2:base + 4] = 2.0
    scale[-2:] = arena_span
    return scale


@dataclass
class TrainResult:
    policy: PolicyFn
    barrier: BarrierFn
    lyapunov: LyapunovFn | None
    curve: list[dict]
    warning: bool = False
    warning_reason: str = ""


class _BatchCycler:
    """Cycles shuffled index blocks over a dataset of given length."""

    def __init__(self, n, batch, rng):
        self.n, self.batch, self.rng = n, batch, rng
        self.perm = rng.permutation(n) if n else np.zeros(0, dtype=int)
        self.pos = 0

    def take(self):
        if self.n == 0:
            return np.zeros(0, dtype=int)
        if self.pos >= self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return idx


def _slice_barrier(data: BarrierDataset, i_init, i_safe, i_nd) -> BarrierDataset:
    return BarrierDataset(
        data.d_init[i_init], data.d_safe[i_safe],
        data.nondec_obs[i_nd], data.nondec_next[i_nd], data.dt,
        None if data.nondec_actions is None else data.nondec_actions[i_nd],
        None if data.nondec_dirs is None else data.nondec_dirs[i_nd])


def _slice_lyapunov(data: LyapunovDataset, i_goal, i_dec) -> LyapunovDataset:
    return LyapunovDataset(
        data.d_goal[i_goal], data.dec_obs[i_dec], data.dec_next[i_dec],
        data.dt,
        None if data.dec_actions is None else data.dec_actions[i_dec],
        None if data.dec_dirs is None else data.dec_dirs[i_dec])


def fit(policy: PolicyFn, barrier: BarrierFn | None,
        lyapunov: LyapunovFn | None,
        barrier_data: BarrierDataset | None,
        lyap_data: LyapunovDataset | None,
        config: TrainConfig, rng: np.random.Generator,
        train_policy: bool = True,
        env: BlackBoxEnv | None = None) -> list[dict]:
    """Minibatch-Adam on the certificate losses; returns the per-epoch
    loss curve. Set train_policy=False to freeze the policy parameters.
    Either certificate may be absent (its loss is skipped). When the
    environment is supplied, the stored response directions are refreshed
    from the current certificates each epoch."""
    use_barrier = barrier is not None and barrier_data is not None
    use_lyap = lyapunov is not None and lyap_data is not None
    if not train_policy:
        # frozen policy: the stored actions equal the policy's own, so the
        # response correction is identically zero; drop it and never touch
        # the policy parameters
        if use_barrier:
            barrier_data = replace(barrier_data, nondec_actions=None,
                                   nondec_dirs=None)
        if use_lyap:
            lyap_data = replace(lyap_data, dec_actions=None, dec_dirs=None)
    pol_adam = (adam_init(policy.net.parameters(), config.policy_lr)
                if train_policy else None)
    bar_adam = adam_init(barrier.net.parameters(), config.cert_lr) \
        if use_barrier else None
    lyap_adam = adam_init(lyapunov.net.parameters(), config.cert_lr) \
        if use_lyap else None
    curve = []
    for epoch in range(config.epochs):
        refresh = (env is not None and train_policy
                   and epoch >= config.warmup)
        if (refresh and use_barrier and barrier_data.nondec_dirs is not None
                and barrier_data.nondec_kin is not None):
            kin = barrier_data.nondec_kin
            barrier_data.nondec_dirs[:] = kin.steer[:, None] * \
                lookahead_response_dirs(barrier, env, kin, env.action_dim)
        if (refresh and use_lyap and lyap_data.dec_dirs is not None
                and lyap_data.dec_kin is not None):
            kin = lyap_data.dec_kin
            lyap_data.dec_dirs[:] = kin.steer[:, None] * \
                lookahead_response_dirs(lyapunov, env, kin, env.action_dim)

        ni, ns, nn = barrier_data.sizes() if use_barrier else (0, 0, 0)
        ng = len(lyap_data.d_goal) if use_lyap else 0
        nd = len(lyap_data.dec_obs) if use_lyap else 0
        longest = max(ni, ns, nn, ng, nd, 1)
        n_batches = max(1, -(-longest // config.batch_size))
        cyc = {name: _BatchCycler(n, config.batch_size, rng)
               for name, n in [("init", ni), ("safe", ns), ("nondec", nn),
                               ("goal", ng), ("dec", nd)]}

        sums = {"init": 0.0, "safe": 0.0, "nondec": 0.0,
                "goal": 0.0, "decrease": 0.0, "proximal": 0.0}
        for _ in range(n_batches):
            pol_grads = None
            if use_barrier:
                batch = _slice_barrier(barrier_data, cyc["init"].take(),
                                       cyc["safe"].take(), cyc["nondec"].take())
                res = loss_barrier(policy, barrier, batch,
                                   proximal_weight=config.proximal_weight,
                                   margin=config.loss_margin)
                pol_grads = res.policy_grads
                apply_gradients(barrier.net, res.cert_grads, bar_adam)
                for key in ("init", "safe", "nondec", "proximal"):
                    sums[key] += res.terms[key]
            if use_lyap:
                lbatch = _slice_lyapunov(lyap_data, cyc["goal"].take(),
                                         cyc["dec"].take())
                lres = loss_lyapunov(policy, lyapunov, lbatch,
                                     proximal_weight=config.proximal_weight,
                                     margin=config.loss_margin)
                apply_gradients(lyapunov.net, lres.cert_grads, lyap_adam)
                sums["goal"] += lres.terms["goal"]
                sums["decrease"] += lres.terms["decrease"]
                sums["proximal"] += lres.terms["proximal"]
                if pol_grads is None:
                    pol_grads = lres.policy_grads
                elif lres.policy_grads is not None:
                    for a, g in zip(pol_grads, lres.policy_grads):
                        a += g
            if (train_policy and pol_grads is not None
                    and epoch >= config.warmup):
                apply_gradients(policy.net, pol_grads, pol_adam)

        row = {k: v / n_batches for k, v in sums.items()}
        row["epoch"] = epoch
        row["total"] = sum(v for k, v in row.items() if k != "epoch")
        curve.append(row)
    return curve


def train_joint(env: BlackBoxEnv, config: TrainConfig,
                rng: np.random.Generator | None = None) -> TrainResult:
    """Initialize and jointly train policy + certificate networks on data
    from uniform state sampling and on-policy rollouts."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    policy, barrier, lyap = init_networks(env, config.hidden_dims, rng,
                                          config.with_lyapunov,
                                          config.cert_hidden_dims)
    if config.epochs == 0:
        return TrainResult(policy, barrier, lyap, [])

    barrier_data = build_barrier_dataset(env, policy, config.sample_budget,
                                         config.rollout_budget, rng)
    lyap_data = None
    if config.with_lyapunov:
        lyap_data = build_lyapunov_dataset(env, policy, barrier_data,
                                           config.goal_sample_budget, rng)
    if len(barrier_data.nondec_obs) == 0:
        return TrainResult(policy, barrier, lyap, [], warning=True,
                           warning_reason="no training data collected")

    curve = fit(policy, barrier, lyap, barrier_data, lyap_data, config, rng,
                env=env)
    warn = any(not np.isfinite(row["total"]) for row in curve)
    return TrainResult(policy, barrier, lyap, curve, warning=warn,
                       warning_reason="non-finite loss" if warn else "")
