# ===== app/services/envs.py =====
"""Analytic rigid-body environments used as data source and oracle.

Every environment integrates its closed-form derivative with RK4 at
``SUBSTEPS`` substeps per control interval. States are ``(q, q̇)``; all
methods accept a single state ``(D,)`` or a batch ``(B, D)``.
"""
import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from app.errors import ConfigError, IntegrationError
from app.services.datasets import TrajectorySegment
from app.services.odeint import rk4_integrate

logger = logging.getLogger(__name__)

SUBSTEPS = 20
SAMPLER_MODES = ('uniform_per_step', 'poisson_hold')


class Environment:
    name = None
    d_q = 1
    d_v = 1
    d_a = 1
    dt = 0.05
    action_low = (-1.0,)
    action_high = (1.0,)
    init_low = ()
    init_high = ()
    defaults = {}

    def __init__(self, **overrides):
        unknown = set(overrides) - set(self.defaults)
        if unknown:
            raise ConfigError(f'Unknown constants for {self.name}: {sorted(unknown)}')
        self.constants = {**self.defaults, **overrides}
        for key, value in self.constants.items():
            setattr(self, key, value)
        self.action_low = np.asarray(self.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.action_high, dtype=np.float64)
        self.derivative_calls = 0
        self._lock = threading.Lock()

    def clone(self):
        """Same constants, fresh call counter."""
        return type(self)(**self.constants)

    @property
    def d_state(self):
        return self.d_q + self.d_v

    def constants_hash(self):
        payload = json.dumps({'env': self.name, 'dt': self.dt, **self.constants}, sort_keys=True)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]

    def _split(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] != self.d_state:
            raise ConfigError(f'{self.name} state has {self.d_state} entries, got {s.shape[-1]}')
        if a is None:
            a = np.zeros(s.shape[:-1] + (self.d_a,))
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), s.shape[:-1] + (self.d_a,))
        return s[..., :self.d_q], s[..., self.d_q:], a

    def derivative(self, s, a=None):
        with self._lock:
            self.derivative_calls += 1
        q, v, a = self._split(s, a)
        return np.concatenate([v, self.acceleration(q, v, a)], axis=-1)

    def __call__(self, s, a=None):
        return self.derivative(s, a)

    def acceleration(self, q, v, a):
        raise NotImplementedError

    def energy(self, s):
        raise NotImplementedError

    def reward(self, s, a):
        raise NotImplementedError

    def clip_action(self, a):
        return np.clip(a, self.action_low, self.action_high)

    def sample_initial_state(self, rng, n=None):
        shape = (self.d_state,) if n is None else (n, self.d_state)
        return rng.uniform(self.init_low, self.init_high, size=shape)

    def step(self, s, a, substeps=SUBSTEPS):
        """Advance one control interval under the constant action ``a``."""
        trajectory = rk4_integrate(self.derivative, s, lambda _t: a, self.dt / substeps, substeps)
        return trajectory[-1]


class Pendulum(Environment):
    """Single link; θ = 0 hangs straight down."""

    name = 'pendulum'
    dt = 0.05
    action_low = (-2.0,)
    action_high = (2.0,)
    init_low = (-np.pi, -2.0)
    init_high = (np.pi, 2.0)
    defaults = {'mass': 1.0, 'length': 1.0, 'gravity': 9.81, 'damping': 0.1}

    def inertia(self):
        return self.mass * self.length ** 2

    def external_torque(self, q, v):
        return 0.0

    def acceleration(self, q, v, a):
        torque = (-self.mass * self.gravity * self.length * np.sin(q) - self.damping * v + a
                  + self.external_torque(q, v))
        return torque / self.inertia()

    def energy(self, s):
        s = np.asarray(s, dtype=np.float64)
        theta, omega = s[..., 0], s[..., 1]
        return 0.5 * self.inertia() * omega ** 2 - self.mass * self.gravity * self.length * np.cos(theta)

    def reward(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        return 0.5 * (1.0 - np.cos(s[..., 0])) - 1e-3 * np.sum(a ** 2, axis=-1)


class WallPendulum(Pendulum):
    """Pendulum with a stiff one-sided spring-damper wall at ``wall_angle``.

    The angle is not wrapped: the wall is a stop for the unwrapped angle.
    ``max_penetration`` is the documented compliance bound for trajectories
    started inside ``init_low``/``init_high`` under bounded torques.
    """

    name = 'wallpendulum'
    init_low = (-2.5, -1.0)
    init_high = (0.55, 1.0)
    defaults = {**Pendulum.defaults, 'wall_angle': 0.6, 'wall_stiffness': 1.0e4,
                'wall_damping': 20.0, 'max_penetration': 0.3}

    def external_torque(self, q, v):
        depth = q - self.wall_angle
        push = np.maximum(0.0, self.wall_stiffness * depth + self.wall_damping * v)
        return np.where(depth > 0.0, -push, 0.0)

    def energy(self, s):
        s = np.asarray(s, dtype=np.float64)
        depth = np.maximum(0.0, s[..., 0] - self.wall_angle)
        return super().energy(s) + 0.5 * self.wall_stiffness * depth ** 2

    def penetration(self, states):
        states = np.asarray(states, dtype=np.float64)
        return np.maximum(0.0, states[..., 0] - self.wall_angle)


class CartPole(Environment):
    """Cart force, unactuated pole; θ = 0 is upright. State (x, θ, ẋ, θ̇)."""

    name = 'cartpole'
    d_q = 2
    d_v = 2
    dt = 0.02
    action_low = (-10.0,)
    action_high = (10.0,)
    init_low = (-0.5, -0.3, -0.5, -0.5)
    init_high = (0.5, 0.3, 0.5, 0.5)
    defaults = {'cart_mass': 1.0, 'pole_mass': 0.1, 'half_length': 0.5, 'gravity': 9.81}

    def acceleration(self, q, v, a):
        theta = q[..., 1]
        theta_dot = v[..., 1]
        force = a[..., 0]
        total = self.cart_mass + self.pole_mass
        sin, cos = np.sin(theta), np.cos(theta)
        temp = (force + self.pole_mass * self.half_length * theta_dot ** 2 * sin) / total
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.half_length * (4.0 / 3.0 - self.pole_mass * cos ** 2 / total))
        x_acc = temp - self.pole_mass * self.half_length * theta_acc * cos / total
        return np.stack([x_acc, theta_acc], axis=-1)

    def energy(self, s):
        s = np.asarray(s, dtype=np.float64)
        theta, x_dot, theta_dot = s[..., 1], s[..., 2], s[..., 3]
        mp, l = self.pole_mass, self.half_length
        kinetic = (0.5 * (self.cart_mass + mp) * x_dot ** 2 + mp * l * x_dot * theta_dot * np.cos(theta)
                   + (2.0 / 3.0) * mp * l ** 2 * theta_dot ** 2)
        return kinetic + mp * self.gravity * l * np.cos(theta)

    def reward(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        return np.cos(s[..., 1]) - 0.01 * s[..., 0] ** 2


class TwoLink(Environment):
    """Planar two-link chain: M(q)q̈ + C(q, q̇) + G(q) = Bτ − damping·q̇."""

    d_q = 2
    d_v = 2
    actuated = (0, 1)
    defaults = {'m1': 1.0, 'm2': 1.0, 'l1': 1.0, 'l2': 1.0, 'lc1': 1.0, 'lc2': 1.0,
                'i1': 0.0, 'i2': 0.0, 'gravity': 0.0, 'damping': 0.0}

    def mass_matrix(self, q):
        cos2 = np.cos(q[..., 1])
        m11 = (self.m1 * self.lc1 ** 2 + self.i1 + self.i2
               + self.m2 * (self.l1 ** 2 + self.lc2 ** 2 + 2.0 * self.l1 * self.lc2 * cos2))
        m12 = self.m2 * (self.lc2 ** 2 + self.l1 * self.lc2 * cos2) + self.i2
        m22 = np.full_like(m11, self.m2 * self.lc2 ** 2 + self.i2)
        return m11, m12, m22

    def potential(self, q):
        q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
        return -self.gravity * (self.m1 * self.lc1 * np.cos(q1)
                                + self.m2 * (self.l1 * np.cos(q1) + self.lc2 * np.cos(q12)))

    def acceleration(self, q, v, a):
        m11, m12, m22 = self.mass_matrix(q)
        h = self.m2 * self.l1 * self.lc2 * np.sin(q[..., 1])
        v1, v2 = v[..., 0], v[..., 1]
        coriolis1 = -h * (2.0 * v1 * v2 + v2 ** 2)
        coriolis2 = h * v1 ** 2
        q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
        gravity2 = self.m2 * self.lc2 * self.gravity * np.sin(q12)
        gravity1 = (self.m1 * self.lc1 + self.m2 * self.l1) * self.gravity * np.sin(q1) + gravity2

        torque = np.zeros(q.shape)
        for k, joint in enumerate(self.actuated):
            torque[..., joint] = a[..., k]
        rhs1 = torque[..., 0] - self.damping * v1 - coriolis1 - gravity1
        rhs2 = torque[..., 1] - self.damping * v2 - coriolis2 - gravity2
        det = m11 * m22 - m12 ** 2
        acc1 = (m22 * rhs1 - m12 * rhs2) / det
        acc2 = (m11 * rhs2 - m12 * rhs1) / det
        return np.stack([acc1, acc2], axis=-1)

    def energy(self, s):
        s = np.asarray(s, dtype=np.float64)
        q, v = s[..., :2], s[..., 2:]
        m11, m12, m22 = self.mass_matrix(q)
        v1, v2 = v[..., 0], v[..., 1]
        kinetic = 0.5 * (m11 * v1 ** 2 + 2.0 * m12 * v1 * v2 + m22 * v2 ** 2)
        return kinetic + self.potential(q)

    def tip(self, s):
        s = np.asarray(s, dtype=np.float64)
        q1, q12 = s[..., 0], s[..., 0] + s[..., 1]
        x = self.l1 * np.sin(q1) + self.l2 * np.sin(q12)
        y = -self.l1 * np.cos(q1) - self.l2 * np.cos(q12)
        return np.stack([x, y], axis=-1)


class Reacher2(TwoLink):
    """Two torqued links with point masses at the link ends, no gravity."""

    name = 'reacher2'
    d_a = 2
    dt = 0.02
    actuated = (0, 1)
    action_low = (-1.0, -1.0)
    action_high = (1.0, 1.0)
    init_low = (-np.pi, -np.pi, -1.0, -1.0)
    init_high = (np.pi, np.pi, 1.0, 1.0)
    defaults = {**TwoLink.defaults, 'damping': 0.1, 'target_x': 1.0, 'target_y': 1.0}

    def reward(self, s, a):
        offset = self.tip(s) - np.array([self.target_x, self.target_y])
        return -np.linalg.norm(offset, axis=-1)


class Acrobot(TwoLink):
    """Two links under gravity with only the elbow torqued; θ1 = 0 hangs down."""

    name = 'acrobot'
    d_a = 1
    dt = 0.05
    actuated = (1,)
    action_low = (-1.0,)
    action_high = (1.0,)
    init_low = (-np.pi, -np.pi, -1.0, -1.0)
    init_high = (np.pi, np.pi, 1.0, 1.0)
    defaults = {**TwoLink.defaults, 'lc1': 0.5, 'lc2': 0.5, 'i1': 1.0, 'i2': 1.0, 'gravity': 9.81}

    def reward(self, s, a):
        return self.tip(s)[..., 1] / (self.l1 + self.l2)


ENVIRONMENTS = {
    cls.name: cls for cls in (Pendulum, CartPole, Reacher2, Acrobot, WallPendulum)
}


def make_env(name, **overrides):
    if name not in ENVIRONMENTS:
        raise ConfigError(f'Unknown environment {name!r}; expected one of {sorted(ENVIRONMENTS)}')
    return ENVIRONMENTS[name](**overrides)


class ZeroOrderHold:
    """Piecewise-constant action signal over a control grid."""

    def __init__(self, actions, dt, t0=0.0):
        self.actions = np.asarray(actions, dtype=np.float64)
        self.dt = dt
        self.t0 = t0

    def __call__(self, t):
        index = int(np.floor((t - self.t0) / self.dt + 1e-9))
        return self.actions[min(max(index, 0), len(self.actions) - 1)]


@dataclass
class ActionSamplerSpec:
    mode: str = 'uniform_per_step'
    rate: float = 2.0
    seed: object = 0

    def __post_init__(self):
        if self.mode not in SAMPLER_MODES:
            raise ConfigError(f'Unknown sampler mode {self.mode!r}')
        if self.mode == 'poisson_hold' and not self.rate > 0:
            raise ConfigError('poisson_hold needs a positive switching rate')


def sample_actions(spec, duration, dt, low=-1.0, high=1.0):
    """Random action sequence covering ``duration`` seconds of control steps."""
    if duration < dt:
        raise ConfigError(f'duration {duration} is shorter than one control step {dt}')
    low = np.atleast_1d(np.asarray(low, dtype=np.float64))
    high = np.atleast_1d(np.asarray(high, dtype=np.float64))
    n_steps = int(round(duration / dt))
    rng = np.random.default_rng(spec.seed)
    if spec.mode == 'uniform_per_step':
        return rng.uniform(low, high, size=(n_steps, low.size))

    actions = np.empty((n_steps, low.size))
    filled = 0
    while filled < n_steps:
        hold = max(1, int(np.ceil(rng.exponential(1.0 / spec.rate) / dt)))
        actions[filled:filled + hold] = rng.uniform(low, high)
        filled += hold
    return actions


def generate_trajectory(env, s0, actions, n_steps=None, tag='random', substeps=SUBSTEPS):
    """Ground-truth rollout recorded at control boundaries."""
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, env.d_a)
    n_steps = len(actions) if n_steps is None else n_steps
    if n_steps > len(actions):
        raise ConfigError(f'{len(actions)} actions cannot cover {n_steps} control steps')
    actions = actions[:n_steps]
    s0 = np.asarray(s0, dtype=np.float64)
    if n_steps == 0:
        return TrajectorySegment(dt=env.dt, states=s0[None, :].copy(),
                                 actions=np.zeros((0, env.d_a)), tag=tag)
    h = env.dt / substeps
    try:
        fine = rk4_integrate(env.derivative, s0, ZeroOrderHold(actions, env.dt), h, n_steps * substeps)
    except IntegrationError as exc:
        step = int(exc.t // env.dt) if exc.t is not None else None
        raise IntegrationError(f'{env.name} rollout failed at control step {step}: {exc}',
                               t=exc.t, state=exc.state) from exc
    return TrajectorySegment(dt=env.dt, states=fine[::substeps].copy(), actions=actions.copy(), tag=tag)


def random_trajectory(env, index, n_steps, sampler, seed):
    """One random-action trajectory; trajectory ``index`` of run ``seed``."""
    rng = np.random.default_rng([seed, index])
    s0 = env.sample_initial_state(rng)
    if n_steps == 0:
        return generate_trajectory(env, s0, np.zeros((0, env.d_a)), 0, tag='random')
    spec = ActionSamplerSpec(mode=sampler.mode, rate=sampler.rate, seed=[seed, index, 1])
    actions = sample_actions(spec, n_steps * env.dt, env.dt, env.action_low, env.action_high)
    return generate_trajectory(env, s0, actions[:n_steps], n_steps, tag='random')


def generate_random_dataset(env, n_traj, n_steps, sampler, seed=0, threads=1):
    """Random-action trajectories, generated in parallel and returned in index order."""
    if n_traj == 0:
        return []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        segments = list(pool.map(lambda i: random_trajectory(env, i, n_steps, sampler, seed), range(n_traj)))
    logger.info('generated %d %s trajectories of %d steps', n_traj, env.name, n_steps)
    return segments
