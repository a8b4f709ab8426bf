# ===== app/services/bench.py =====
"""Rollout-MSE benchmark and Lyapunov exponent estimation."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from app.errors import ConfigError, DataFormatError, IntegrationError, NumericalError
from app.services.datasets import sample_fragments, state_std
from app.services.odeint import IntegratorConfig, integrate_interval, model_field, rollout

logger = logging.getLogger(__name__)

DEFAULT_HORIZONS = (3, 16, 100)
REPORT_REQUIRED_FIELDS = ('env', 'model', 'horizon', 'mse', 'mse_normalized', 'n_segments', 'n_failed')


@dataclass
class BenchmarkResult:
    env: str
    model: str
    horizon: int
    mse: float
    mse_normalized: float
    n_segments: int
    n_failed: int
    per_step_mse: list = field(default_factory=list)
    config_hash: str = ''

    def to_dict(self):
        return asdict(self)


@dataclass
class LceResult:
    value: float
    stderr: float
    n_used: int
    n_dropped: int

    def to_dict(self):
        return asdict(self)


def _predict(model, fragment, cfg):
    try:
        pred = rollout(model, fragment.states[0], fragment.actions, fragment.dt, cfg)
    except IntegrationError as exc:
        logger.debug('fragment rollout failed: %s', exc)
        return None
    return pred if np.all(np.isfinite(pred)) else None


def rollout_mse(model, dataset, horizon, n_eval, cfg=None, seed=0, warm_in=100,
                scale=None, threads=1, model_name='model'):
    """Mean squared multi-step prediction error over ``n_eval`` sampled fragments.

    Each fragment is integrated from its first state under its recorded
    actions; failed rollouts are excluded and counted in ``n_failed``.
    """
    cfg = cfg or IntegratorConfig()
    rng = np.random.default_rng(seed)
    fragments = sample_fragments(dataset, horizon, n_eval, rng, warm_in=warm_in)
    scale = state_std(dataset) if scale is None else np.asarray(scale, dtype=np.float64)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        predictions = list(pool.map(lambda frag: _predict(model, frag, cfg), fragments))

    raw, normalized = [], []
    for frag, pred in zip(fragments, predictions):
        if pred is None:
            continue
        diff = pred[1:] - frag.states[1:]
        raw.append(np.mean(diff ** 2, axis=1))
        normalized.append(np.mean((diff / scale) ** 2, axis=1))
    n_failed = len(fragments) - len(raw)
    if n_failed:
        logger.warning('%d of %d fragments failed to integrate and were excluded', n_failed, len(fragments))
    if not raw:
        raise NumericalError(f'every fragment failed at horizon {horizon}')

    per_step = np.mean(raw, axis=0)
    result = BenchmarkResult(
        env=dataset.env,
        model=model_name,
        horizon=int(horizon),
        mse=float(np.mean(per_step)),
        mse_normalized=float(np.mean(normalized)),
        n_segments=len(raw),
        n_failed=n_failed,
        per_step_mse=[float(v) for v in per_step],
        config_hash=dataset.config_hash,
    )
    logger.info('%s horizon %d: mse=%.3e normalized=%.3e over %d fragments',
                dataset.env, horizon, result.mse, result.mse_normalized, result.n_segments)
    return result


def benchmark(model, dataset, horizons=DEFAULT_HORIZONS, n_eval=64, **kwargs):
    return [rollout_mse(model, dataset, h, n_eval, **kwargs) for h in horizons]


def validate_report(doc):
    """Check a benchmark report document against the published field set."""
    missing = [name for name in REPORT_REQUIRED_FIELDS if name not in doc]
    if missing:
        raise DataFormatError(f'report is missing fields: {", ".join(missing)}')
    for name in ('env', 'model'):
        if not isinstance(doc[name], str):
            raise DataFormatError(f'report field {name} must be a string')
    for name in ('horizon', 'n_segments', 'n_failed'):
        if not isinstance(doc[name], int) or isinstance(doc[name], bool) or doc[name] < 0:
            raise DataFormatError(f'report field {name} must be a non-negative integer')
    if doc['horizon'] < 1:
        raise DataFormatError('report horizon must be at least 1')
    for name in ('mse', 'mse_normalized'):
        value = doc[name]
        if not isinstance(value, (int, float)) or not np.isfinite(value) or value < 0:
            raise DataFormatError(f'report field {name} must be a finite non-negative number')
    return True


def _advance(field_fn, z, a, dt, cfg):
    """One control interval for a batch; rows that fail come back as NaN."""
    try:
        out, _ = integrate_interval(field_fn, z, a, 0.0, dt, cfg, record=False)
        return out
    except IntegrationError:
        out = np.full_like(z, np.nan)
        for i in range(len(z)):
            try:
                out[i], _ = integrate_interval(field_fn, z[i], a[i], 0.0, dt, cfg, record=False)
            except IntegrationError:
                pass
        return out


# Estimator settings for the acrobot reference exponent.
ACROBOT_LCE_SETTINGS = {'delta': 1e-5, 't_steps': 1000, 'n_traj': 2000, 'seed': 0}
# Oracle acrobot exponent under ACROBOT_LCE_SETTINGS, filled in from
# `lce --oracle --env acrobot --steps 1000 --n-traj 2000`; None until pinned.
ACROBOT_LCE_REFERENCE = None


def _lce_pairs(field_fn, base, perturbed, d_a, delta, t_steps, dt, cfg):
    n = len(base)
    action = np.zeros((2 * n, d_a))
    log_sum = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    for _ in range(t_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        z = np.concatenate([base[idx], perturbed[idx]])
        z = _advance(field_fn, z, action[:2 * idx.size], dt, cfg)
        x, y = z[:idx.size], z[idx.size:]
        gap = np.linalg.norm(y - x, axis=1)
        ok = np.all(np.isfinite(x), axis=1) & np.all(np.isfinite(y), axis=1) & (gap > 0)
        alive[idx[~ok]] = False
        keep = idx[ok]
        log_sum[keep] += np.log(gap[ok] / delta)
        base[keep] = x[ok]
        perturbed[keep] = x[ok] + delta * (y[ok] - x[ok]) / gap[ok, None]
    return log_sum, alive


def estimate_lce(model, sampler, delta=1e-5, t_steps=1000, n_traj=100, dt=0.05, cfg=None, seed=0, threads=1):
    """Largest Lyapunov exponent by the two-trajectory renormalization method.

    ``sampler(rng, n)`` draws ``n`` initial states. Both trajectories advance
    one control step at a time under zero action; the separation is
    renormalized to ``delta`` after every step. Pairs are split into
    ``threads`` contiguous chunks after all random draws.
    """
    if delta <= 0:
        raise ConfigError('delta must be positive')
    if t_steps < 1 or n_traj < 1:
        raise ConfigError('t_steps and n_traj must be at least 1')
    cfg = cfg or IntegratorConfig(method='rk4', fixed_step=dt / 10)
    rng = np.random.default_rng(seed)
    base = np.atleast_2d(np.asarray(sampler(rng, n_traj), dtype=np.float64))
    direction = rng.normal(size=base.shape)
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    perturbed = base + delta * direction

    field_fn = model_field(model)
    chunks = [c for c in np.array_split(np.arange(n_traj), max(1, threads)) if c.size]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(lambda c: _lce_pairs(field_fn, base[c].copy(), perturbed[c].copy(), model.d_a,
                                                   delta, t_steps, dt, cfg), chunks))
    log_sum = np.concatenate([p[0] for p in parts])
    alive = np.concatenate([p[1] for p in parts])

    n_used = int(alive.sum())
    n_dropped = n_traj - n_used
    if n_dropped:
        logger.warning('dropped %d of %d diverging trajectories', n_dropped, n_traj)
    if n_used == 0:
        raise NumericalError('every LCE trajectory diverged')
    exponents = log_sum[alive] / (t_steps * dt)
    stderr = float(exponents.std(ddof=1) / np.sqrt(n_used)) if n_used > 1 else 0.0
    return LceResult(value=float(exponents.mean()), stderr=stderr, n_used=n_used, n_dropped=n_dropped)


def acrobot_reference_lce(env, threads=1):
    """The pinned oracle acrobot exponent, or a fresh oracle run while it is unset."""
    if ACROBOT_LCE_REFERENCE is not None:
        return ACROBOT_LCE_REFERENCE
    settings = dict(ACROBOT_LCE_SETTINGS)
    return estimate_lce(env, env.sample_initial_state, dt=env.dt, threads=threads, **settings).value
