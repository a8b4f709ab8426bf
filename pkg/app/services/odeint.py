# ===== app/services/odeint.py =====
"""Explicit Runge-Kutta integration with two gradient paths.

Vector fields have the signature ``f(z, a) -> dz`` where ``a`` is held
constant (zero-order hold) over each integration piece, and their
vector-Jacobian products ``vjp_f(z, a, u) -> (uᵀ∂f/∂z, uᵀ∂f/∂θ)`` return the
parameter part as one flat vector. States may be ``(D,)`` or ``(B, D)``.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from app.errors import ConfigError, IntegrationError

logger = logging.getLogger(__name__)


# Butcher tableaus: (A rows, b, c). DOPRI5 also carries its embedded 4th-order weights.
EULER = ([[]], [1.0], [0.0])

RK4 = (
    [[], [0.5], [0.0, 0.5], [0.0, 0.0, 1.0]],
    [1 / 6, 1 / 3, 1 / 3, 1 / 6],
    [0.0, 0.5, 0.5, 1.0],
)

DOPRI5 = (
    [
        [],
        [1 / 5],
        [3 / 40, 9 / 40],
        [44 / 45, -56 / 15, 32 / 9],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
        [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
    ],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0],
    [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0],
)
DOPRI5_B_LOW = [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
DOPRI5_ERR = [hi - lo for hi, lo in zip(DOPRI5[1], DOPRI5_B_LOW)]

TABLEAUS = {'euler': EULER, 'rk4': RK4, 'dopri5': DOPRI5}

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
PI_ALPHA = 0.7 / 5
PI_BETA = 0.4 / 5


@dataclass
class IntegratorConfig:
    rtol: float = 1e-6
    atol: float = 1e-6
    h_init: float = None      # None: a tenth of each integration piece
    h_min: float = 1e-10
    h_max: float = None       # None: unbounded
    max_steps: int = 100000   # per integration piece
    fixed_step: float = None  # forces constant steps without error control
    method: str = 'dopri5'

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ConfigError('rtol and atol must be positive')
        if self.h_min <= 0:
            raise ConfigError('h_min must be positive')
        if self.h_init is not None and self.h_init < self.h_min:
            raise ConfigError('h_init must be at least h_min')
        if self.h_max is not None and self.h_init is not None and self.h_init > self.h_max:
            raise ConfigError('h_init must not exceed h_max')
        if self.method not in ('dopri5', 'rk4'):
            raise ConfigError(f'Unknown integration method {self.method!r}')
        if self.method == 'rk4' and self.fixed_step is None and self.h_init is None:
            raise ConfigError('rk4 needs fixed_step or h_init')


@dataclass
class IntegratorStats:
    accepted: int = 0
    rejected: int = 0
    f_evals: int = 0

    def to_dict(self):
        return {'accepted': self.accepted, 'rejected': self.rejected, 'f_evals': self.f_evals}


@dataclass
class StepRecord:
    t: float
    h: float
    z: np.ndarray
    z_next: np.ndarray
    action: object
    method: str
    stages: list = field(default_factory=list)   # stage inputs Yᵢ


@dataclass
class GridSolution:
    states: np.ndarray          # (n + 1, ...) at control boundaries
    actions: object
    dt: float
    t0: float = 0.0
    records: list = field(default_factory=list)   # one list of StepRecord per interval
    stats: IntegratorStats = field(default_factory=IntegratorStats)


def _rk_stages(f, z, a, h, tableau, k1=None):
    """Evaluate every stage; returns (stage inputs, stage derivatives)."""
    A, b, _ = tableau
    ys, ks = [], []
    for i in range(len(b)):
        if i == 0:
            y = z
        else:
            incr = 0.0
            for j, coeff in enumerate(A[i]):
                if coeff != 0.0:
                    incr = incr + coeff * ks[j]
            y = z + h * incr
        k = k1 if (i == 0 and k1 is not None) else f(y, a)
        ys.append(y)
        ks.append(k)
    return ys, ks


def _combine(z, h, weights, ks):
    incr = 0.0
    for w, k in zip(weights, ks):
        if w != 0.0:
            incr = incr + w * k
    return z + h * incr


def _pieces(t0, t1, breakpoints):
    cuts = [t0]
    for bp in sorted(breakpoints or ()):
        if t0 < bp < t1:
            cuts.append(bp)
    cuts.append(t1)
    return list(zip(cuts[:-1], cuts[1:]))


def dopri5_integrate(f, s0, action_fn, t0, t1, cfg=None, breakpoints=None, record=True, stats=None):
    """Dormand-Prince 5(4) with PI step control.

    The action is ``action_fn(t_start)`` of each piece between breakpoints, and
    the solver restarts at every breakpoint. Returns (s1, records).
    """
    cfg = cfg or IntegratorConfig()
    if not t1 > t0:
        raise ConfigError(f'integration interval [{t0}, {t1}] is empty')
    stats = stats if stats is not None else IntegratorStats()
    z = np.array(s0, dtype=np.float64)
    records = []
    for start, end in _pieces(t0, t1, breakpoints):
        a = action_fn(start) if action_fn is not None else None
        z = _dopri5_piece(f, z, a, start, end, cfg, records if record else None, stats)
    return z, records


def _dopri5_piece(f, z, a, t_start, t_end, cfg, records, stats):
    span = t_end - t_start
    h_max = cfg.h_max if cfg.h_max is not None else span
    if cfg.fixed_step is not None:
        h = cfg.fixed_step
    else:
        h = min(cfg.h_init if cfg.h_init is not None else span / 10.0, h_max)
    t = t_start
    k1 = f(z, a)
    stats.f_evals += 1
    prev_ratio = 1.0
    steps = 0
    eps = 1e-12 * max(1.0, abs(t_end))

    while t_end - t > eps:
        if steps >= cfg.max_steps:
            raise IntegrationError(f'exceeded max_steps={cfg.max_steps}', t=t, state=z)
        last = t + h >= t_end - eps
        if last:
            h = t_end - t
        ys, ks = _rk_stages(f, z, a, h, DOPRI5, k1=k1)
        stats.f_evals += 6
        z_new = ys[6]
        steps += 1

        if cfg.fixed_step is not None:
            ratio = 0.0 if np.all(np.isfinite(z_new)) else np.inf
        else:
            err = _combine(np.zeros_like(z), h, DOPRI5_ERR, ks)
            scale = cfg.atol + cfg.rtol * np.maximum(np.abs(z), np.abs(z_new))
            with np.errstate(invalid='ignore', over='ignore'):
                ratio = float(np.max(np.abs(err) / scale)) if np.size(err) else 0.0
            if not np.isfinite(ratio):
                ratio = np.inf

        if ratio <= 1.0:
            if records is not None:
                records.append(StepRecord(t=t, h=h, z=z, z_next=z_new, action=a,
                                          method='dopri5', stages=ys))
            stats.accepted += 1
            t = t_end if last else t + h
            z = z_new
            k1 = ks[6]
            if cfg.fixed_step is not None:
                h = cfg.fixed_step
                continue
            ratio = max(ratio, 1e-10)
            factor = SAFETY * ratio ** -PI_ALPHA * prev_ratio ** PI_BETA
            prev_ratio = max(ratio, 1e-4)
            h = min(h * min(MAX_FACTOR, max(MIN_FACTOR, factor)), h_max)
        else:
            if cfg.fixed_step is not None:
                raise IntegrationError('non-finite state', t=t, state=z)
            stats.rejected += 1
            factor = MIN_FACTOR if not np.isfinite(ratio) else max(MIN_FACTOR, SAFETY * ratio ** -0.2)
            h = h * factor
            if h < cfg.h_min:
                raise IntegrationError(f'step size {h:.3e} fell below h_min', t=t, state=z)
    return z


def rk4_integrate(f, s0, action_fn, dt, n_steps, t0=0.0, record=False, stats=None):
    """Classical RK4 with ``n_steps`` steps of ``dt``.

    The action of step i is ``action_fn(t0 + i·dt)``. Returns the trajectory
    ``(n_steps + 1, ...)``, plus the records when ``record`` is set.
    """
    if dt <= 0:
        raise ConfigError('dt must be positive')
    stats = stats if stats is not None else IntegratorStats()
    z = np.array(s0, dtype=np.float64)
    trajectory = [z]
    records = []
    for i in range(n_steps):
        t = t0 + i * dt
        a = action_fn(t) if action_fn is not None else None
        ys, ks = _rk_stages(f, z, a, dt, RK4)
        z_new = _combine(z, dt, RK4[1], ks)
        stats.f_evals += 4
        stats.accepted += 1
        if not np.all(np.isfinite(z_new)):
            raise IntegrationError(f'non-finite state at step {i}', t=t, state=z)
        if record:
            records.append(StepRecord(t=t, h=dt, z=z, z_next=z_new, action=a, method='rk4', stages=ys))
        z = z_new
        trajectory.append(z)
    trajectory = np.stack(trajectory)
    return (trajectory, records) if record else trajectory


# ---------------------------------------------------------------------------
# Control grids
# ---------------------------------------------------------------------------

def integrate_interval(f, z, a, t, dt, cfg, record=True, stats=None):
    """One control interval with a constant action; returns (z_next, records)."""
    if cfg.method == 'rk4':
        h = cfg.fixed_step or cfg.h_init
        n_sub = max(1, int(np.ceil(dt / h - 1e-9)))
        out = rk4_integrate(f, z, lambda _t: a, dt / n_sub, n_sub, t0=t, record=record, stats=stats)
        if record:
            trajectory, records = out
            return trajectory[-1], records
        return out[-1], []
    return dopri5_integrate(f, z, lambda _t: a, t, t + dt, cfg, record=record, stats=stats)


def integrate_grid(f, s0, actions, dt, cfg=None, record=True, t0=0.0):
    """Integrate across ``len(actions)`` control intervals, restarting at each boundary."""
    cfg = cfg or IntegratorConfig()
    stats = IntegratorStats()
    z = np.array(s0, dtype=np.float64)
    states = [z]
    all_records = []
    for k in range(len(actions)):
        z, records = integrate_interval(f, z, actions[k], t0 + k * dt, dt, cfg, record=record, stats=stats)
        states.append(z)
        all_records.append(records)
    return GridSolution(states=np.stack(states), actions=actions, dt=dt, t0=t0,
                        records=all_records, stats=stats)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _accumulate(total, part):
    return part.copy() if total is None else total + part


def step_vjp(record, vjp_f, g_out):
    """Reverse sweep through one recorded explicit RK step.

    ``g_out`` is ∂L/∂z_next; returns (∂L/∂z, ∂L/∂θ) for the discrete map.
    """
    A, b, _ = TABLEAUS[record.method]
    h = record.h
    k_bar = [h * w * g_out if w != 0.0 else None for w in b]
    g_z = np.array(g_out, dtype=np.float64)
    g_theta = None
    for i in reversed(range(len(b))):
        if k_bar[i] is None:
            continue
        g_y, g_th = vjp_f(record.stages[i], record.action, k_bar[i])
        g_z = g_z + g_y
        g_theta = _accumulate(g_theta, np.asarray(g_th, dtype=np.float64))
        for j, coeff in enumerate(A[i]):
            if coeff != 0.0:
                contribution = h * coeff * g_y
                k_bar[j] = contribution if k_bar[j] is None else k_bar[j] + contribution
    return g_z, g_theta


def backprop_through_steps(records, vjp_f, dL_ds1):
    """Exact gradient of the discretized map recorded in ``records``."""
    if not records:
        raise ConfigError('no step records to differentiate')
    g = np.array(dL_ds1, dtype=np.float64)
    if g.shape != np.shape(records[-1].z_next):
        raise ConfigError(f'cotangent shape {g.shape} does not match recorded state')
    g_theta = None
    for rec in reversed(records):
        g, g_th = step_vjp(rec, vjp_f, g)
        g_theta = _accumulate(g_theta, g_th)
    return g_theta, g


def _adjoint_interval(f, vjp_f, z1, a, t0, t1, alpha1, cfg, stats=None):
    z1 = np.asarray(z1, dtype=np.float64)
    shape = z1.shape
    n_z = z1.size
    _, theta_like = vjp_f(z1, a, np.zeros(shape))
    n_theta = np.size(theta_like)

    def augmented(y, _a):
        z = y[:n_z].reshape(shape)
        alpha = y[n_z:2 * n_z].reshape(shape)
        dz = f(z, a)
        g_z, g_theta = vjp_f(z, a, alpha)
        # reversed time τ = t1 - t: dz/dτ = -f, dα/dτ = αᵀ∂f/∂z, dG/dτ = αᵀ∂f/∂θ
        return np.concatenate([-np.ravel(dz), np.ravel(g_z), np.ravel(g_theta)])

    y0 = np.concatenate([z1.ravel(), np.ravel(alpha1), np.zeros(n_theta)])
    y1, _ = dopri5_integrate(augmented, y0, None, 0.0, t1 - t0, cfg, record=False, stats=stats)
    return y1[2 * n_z:], y1[n_z:2 * n_z].reshape(shape)


def _action_pieces(records):
    """Split consecutive records into runs that share one held action."""
    pieces = [[records[0]]]
    for rec in records[1:]:
        prev = pieces[-1][-1].action
        same = (rec.action is prev) or (rec.action is not None and prev is not None
                                        and np.array_equal(rec.action, prev))
        if same:
            pieces[-1].append(rec)
        else:
            pieces.append([rec])
    return pieces


def adjoint_backward(f, vjp_f, records, dL_ds1, cfg=None):
    """Continuous adjoint over the span covered by ``records``.

    Walks the held-action pieces backward, re-integrating (z, α, ∂L/∂θ) from
    each piece's recorded end state with α carried across the switches;
    returns (∂L/∂θ, ∂L/∂s0).
    """
    cfg = cfg or IntegratorConfig()
    if not records:
        raise ConfigError('no step records to differentiate')
    alpha = np.array(dL_ds1, dtype=np.float64)
    g_theta = None
    for piece in reversed(_action_pieces(records)):
        t0 = piece[0].t
        t1 = piece[-1].t + piece[-1].h
        g_th, alpha = _adjoint_interval(f, vjp_f, piece[-1].z_next, piece[0].action, t0, t1, alpha, cfg)
        g_theta = _accumulate(g_theta, g_th)
    return g_theta, alpha


def grid_backprop(vjp_f, solution, state_cotangents):
    """Discrete backprop across a grid with a cotangent at every boundary."""
    cot = np.asarray(state_cotangents, dtype=np.float64)
    n = len(solution.records)
    g = cot[n].copy()
    g_theta = None
    for k in reversed(range(n)):
        g_th, g = backprop_through_steps(solution.records[k], vjp_f, g)
        g_theta = _accumulate(g_theta, g_th)
        g = g + cot[k]
    return g_theta, g


def grid_adjoint(f, vjp_f, solution, state_cotangents, cfg=None):
    """Adjoint across a grid; z is reset to the forward boundary state on each interval."""
    cfg = cfg or IntegratorConfig()
    cot = np.asarray(state_cotangents, dtype=np.float64)
    n = len(solution.states) - 1
    alpha = cot[n].copy()
    g_theta = None
    for k in reversed(range(n)):
        t0 = solution.t0 + k * solution.dt
        g_th, alpha = _adjoint_interval(f, vjp_f, solution.states[k + 1], solution.actions[k],
                                        t0, t0 + solution.dt, alpha, cfg, stats=solution.stats)
        g_theta = _accumulate(g_theta, g_th)
        alpha = alpha + cot[k]
    return g_theta, alpha


# ---------------------------------------------------------------------------
# Model helpers
# ---------------------------------------------------------------------------

def model_field(model):
    """Adapt anything with ``derivative(s, a)`` to the ``f(z, a)`` signature."""
    return lambda z, a: model.derivative(z, a)


def rollout(model, s0, actions, dt, cfg=None):
    """States at every control boundary of ``model`` driven by ``actions``."""
    solution = integrate_grid(model_field(model), s0, actions, dt, cfg, record=False)
    logger.debug('rollout of %d intervals: %s', len(actions), solution.stats.to_dict())
    return solution.states
