# ===== app/services/flow.py =====
"""Affine-coupling normalizing flow for state densities, and the density penalty.

The flow maps base samples x ~ N(0, I) to states s. ``log_density`` runs the
inverse pass: standardize, then undo the coupling layers in order while
accumulating log|det J|. Scales are bounded as ``bound · tanh(net)``.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from app.errors import ConfigError, DensityFault
from app.services.nets import MLP, AdamState, adam_step, prefixed, strip_prefix

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class FlowConfig:
    n_layers: int = 6
    hidden: int = 64
    n_blocks: int = 2
    scale_bound: float = 2.0
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    min_states: int = 1000

    def __post_init__(self):
        if self.n_layers < 0 or self.hidden < 1 or self.n_blocks < 0:
            raise ConfigError('invalid flow architecture')
        if self.scale_bound <= 0:
            raise ConfigError('scale_bound must be positive')
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError('invalid flow training budget')

    def to_dict(self):
        return asdict(self)


class CouplingLayer:
    def __init__(self, dim, mask, hidden, n_blocks, bound, rng=None):
        self.mask = np.asarray(mask, dtype=np.float64)
        self.bound = bound
        self.scale_net = MLP.build(dim, hidden, dim, n_blocks, rng=rng, zero_output=True)
        self.shift_net = MLP.build(dim, hidden, dim, n_blocks, rng=rng, zero_output=True)

    @property
    def params(self):
        return {**prefixed('s', self.scale_net.params), **prefixed('t', self.shift_net.params)}

    def set_params(self, params):
        for key, value in strip_prefix('s', params).items():
            self.scale_net.params[key] = value
        for key, value in strip_prefix('t', params).items():
            self.shift_net.params[key] = value

    def conditioner(self, u):
        c = self.mask * u
        raw = self.scale_net(c)
        log_scale = self.bound * np.tanh(raw)
        return c, raw, log_scale, self.shift_net(c)

    def inverse(self, u):
        """Data side to base side; returns (y, log|det|) per sample."""
        free = 1.0 - self.mask
        _, _, log_scale, shift = self.conditioner(u)
        y = self.mask * u + free * (u - shift) * np.exp(-log_scale)
        return y, -np.sum(free * log_scale, axis=-1)

    def forward(self, y):
        free = 1.0 - self.mask
        _, _, log_scale, shift = self.conditioner(y)
        u = self.mask * y + free * (y * np.exp(log_scale) + shift)
        return u, np.sum(free * log_scale, axis=-1)

    def inverse_vjp(self, u, g_out, g_logdet):
        """Cotangents of ``inverse``: (param grads, ∂/∂u) for output and log-det cotangents."""
        free = 1.0 - self.mask
        c, raw, log_scale, shift = self.conditioner(u)
        e = np.exp(-log_scale)
        g_shift = -free * e * g_out
        g_log_scale = -free * (u - shift) * e * g_out - free * g_logdet[:, None]
        g_raw = g_log_scale * self.bound * (1.0 - np.tanh(raw) ** 2)
        grads_s, g_c1 = self.scale_net.vjp(c, g_raw)
        grads_t, g_c2 = self.shift_net.vjp(c, g_shift)
        g_u = g_out * (self.mask + free * e) + self.mask * (g_c1 + g_c2)
        return {**prefixed('s', grads_s), **prefixed('t', grads_t)}, g_u


class CouplingFlow:
    def __init__(self, dim, n_layers=6, hidden=64, n_blocks=2, scale_bound=2.0, seed=0,
                 shift=None, scale=None):
        if dim < 1:
            raise ConfigError('flow dimension must be at least 1')
        self.dim = dim
        self.hidden = hidden
        self.n_blocks = n_blocks
        self.scale_bound = scale_bound
        rng = np.random.default_rng(seed)
        self.layers = []
        for k in range(n_layers):
            mask = ((np.arange(dim) + k) % 2 == 0).astype(np.float64)
            self.layers.append(CouplingLayer(dim, mask, hidden, n_blocks, scale_bound, rng=rng))
        self.shift = np.zeros(dim) if shift is None else np.asarray(shift, dtype=np.float64)
        self.scale = np.ones(dim) if scale is None else np.asarray(scale, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ConfigError('standardization scale must be positive')

    @classmethod
    def from_config(cls, dim, cfg, shift=None, scale=None):
        return cls(dim, cfg.n_layers, cfg.hidden, cfg.n_blocks, cfg.scale_bound, cfg.seed, shift, scale)

    @property
    def params(self):
        merged = {}
        for k, layer in enumerate(self.layers):
            merged.update(prefixed(f'layer{k}', layer.params))
        return merged

    def set_params(self, params):
        for k, layer in enumerate(self.layers):
            layer.set_params(strip_prefix(f'layer{k}', params))

    def _batch(self, s):
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] != self.dim:
            raise ConfigError(f'flow expects {self.dim}-dimensional states, got {s.shape[-1]}')
        return np.atleast_2d(s), s.ndim == 1

    def inverse(self, s):
        """x, log|det ∂x/∂s| = f⁻¹(s)."""
        s2, single = self._batch(s)
        u = (s2 - self.shift) / self.scale
        logdet = np.full(len(u), -np.sum(np.log(self.scale)))
        for layer in self.layers:
            u, ld = layer.inverse(u)
            logdet = logdet + ld
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(logdet))):
            raise DensityFault('non-finite value in the inverse flow pass')
        return (u[0], logdet[0]) if single else (u, logdet)

    def forward(self, x):
        x2, single = self._batch(x)
        u = x2
        logdet = np.zeros(len(u))
        for layer in reversed(self.layers):
            u, ld = layer.forward(u)
            logdet = logdet + ld
        s = u * self.scale + self.shift
        logdet = logdet + np.sum(np.log(self.scale))
        return (s[0], logdet[0]) if single else (s, logdet)

    def log_density(self, s):
        x, logdet = self.inverse(s)
        return -0.5 * np.sum(x ** 2, axis=-1) - 0.5 * self.dim * LOG_2PI + logdet

    def sample(self, n, rng):
        x = rng.standard_normal((n, self.dim))
        return self.forward(x)[0]

    def nll_and_grads(self, s):
        """Mean negative log-likelihood of a batch and its parameter gradients."""
        s2, _ = self._batch(s)
        n = len(s2)
        inputs = []
        u = (s2 - self.shift) / self.scale
        logdet = np.full(n, -np.sum(np.log(self.scale)))
        for layer in self.layers:
            inputs.append(u)
            u, ld = layer.inverse(u)
            logdet = logdet + ld
        nll = float(np.mean(0.5 * np.sum(u ** 2, axis=-1) + 0.5 * self.dim * LOG_2PI - logdet))
        if not np.isfinite(nll):
            raise DensityFault('non-finite flow likelihood')

        grads = {}
        g = u / n
        g_logdet = np.full(n, -1.0 / n)
        for k in reversed(range(len(self.layers))):
            layer_grads, g = self.layers[k].inverse_vjp(inputs[k], g, g_logdet)
            grads.update(prefixed(f'layer{k}', layer_grads))
        return nll, grads

    # -- serialization ------------------------------------------------------

    def to_tensors(self, prefix='flow'):
        tensors = {
            f'{prefix}.meta': np.array([self.dim, len(self.layers), self.hidden, self.n_blocks,
                                        self.scale_bound], dtype=np.float64),
            f'{prefix}.shift': self.shift,
            f'{prefix}.scale': self.scale,
        }
        tensors.update(prefixed(prefix, self.params))
        return tensors

    @classmethod
    def from_tensors(cls, tensors, prefix='flow'):
        if f'{prefix}.meta' not in tensors:
            raise ConfigError('checkpoint holds no flow (flow.meta missing)')
        dim, n_layers, hidden, n_blocks, bound = tensors[f'{prefix}.meta']
        flow = cls(int(dim), int(n_layers), int(hidden), int(n_blocks), float(bound),
                   shift=tensors[f'{prefix}.shift'], scale=tensors[f'{prefix}.scale'])
        flow.set_params(strip_prefix(prefix, tensors))
        return flow


def flow_log_density(flow, s):
    return flow.log_density(s)


def fit_flow(states, cfg=None):
    """Maximum-likelihood fit on standardized states; the standardization stays in the flow."""
    cfg = cfg or FlowConfig()
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or len(states) < cfg.min_states:
        raise ConfigError(f'fit_flow needs at least {cfg.min_states} states, got {len(states)}')
    if not np.all(np.isfinite(states)):
        raise ConfigError('fit_flow received non-finite states')
    std = states.std(axis=0)
    flow = CouplingFlow.from_config(states.shape[1], cfg, shift=states.mean(axis=0),
                                    scale=np.where(std > 0, std, 1.0))
    adam = AdamState(lr=cfg.lr)
    params = flow.params
    nll = float('nan')
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        batch = states[rng.integers(len(states), size=cfg.batch_size)]
        nll, grads = flow.nll_and_grads(batch)
        adam, params = adam_step(adam, params, grads)
        flow.set_params(params)
        if step % 500 == 0:
            logger.debug('flow step %d nll %.4f', step, nll)
    logger.info('fitted %d-layer flow on %d states, last batch nll %.4f', len(flow.layers), len(states), nll)
    return flow


@dataclass
class PenaltyConfig:
    tau: float = 0.0
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError('penalty scale alpha must be positive')

    def to_dict(self):
        return asdict(self)


def density_penalty(log_p, pcfg):
    """sigmoid((log P - tau) / alpha) - 1, in (-1, 0)."""
    return expit((np.asarray(log_p, dtype=np.float64) - pcfg.tau) / pcfg.alpha) - 1.0


def penalized_reward(r_orig, s, flow, pcfg):
    return r_orig + density_penalty(flow.log_density(s), pcfg)


def default_penalty_config(flow, states):
    """tau at the 10th percentile of the training log-density, alpha its standard deviation."""
    log_p = flow.log_density(np.asarray(states, dtype=np.float64))
    alpha = float(np.std(log_p))
    return PenaltyConfig(tau=float(np.percentile(log_p, 10)), alpha=alpha if alpha > 0 else 1.0)


class PenalizedReward:
    """Reward wrapper applied during planning only."""

    def __init__(self, reward_fn, flow, pcfg):
        self.reward_fn = reward_fn
        self.flow = flow
        self.pcfg = pcfg

    def __call__(self, s, a):
        return penalized_reward(self.reward_fn(s, a), s, self.flow, self.pcfg)
