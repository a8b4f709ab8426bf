# ===== app/services/dynamics.py =====
"""Structured dynamics model: ṡ = (q̇, M(q)[b(s) + τ(a)] + Σ εᵢ(s, a)).

M is assembled as L Lᵀ from the position encoder's lower-triangular output,
b is the state encoder, τ the action encoder, εᵢ the correctors. Only the
first ``active_correctors`` correctors contribute.
"""
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from app.errors import ConfigError, DimensionError
from app.services.checkpoint import tensor_text, text_tensor
from app.services.nets import MLP, ResNet, prefixed, strip_prefix

# Widths/depths per encoder: (blocks, hidden) for M, b, τ and the correctors.
SIZE_PRESETS = {
    'tiny': dict(pos_blocks=1, pos_hidden=8, state_blocks=1, state_hidden=8,
                 act_blocks=1, act_hidden=8, n_correctors=1, corr_blocks=1, corr_hidden=8),
    'small': dict(pos_blocks=3, pos_hidden=64, state_blocks=3, state_hidden=64,
                  act_blocks=1, act_hidden=32, n_correctors=1, corr_blocks=5, corr_hidden=64),
    'medium': dict(pos_blocks=3, pos_hidden=64, state_blocks=3, state_hidden=64,
                   act_blocks=3, act_hidden=32, n_correctors=1, corr_blocks=5, corr_hidden=128),
    'large': dict(pos_blocks=3, pos_hidden=128, state_blocks=3, state_hidden=128,
                  act_blocks=3, act_hidden=128, n_correctors=3, corr_blocks=5, corr_hidden=128),
}

PREDICTOR_GROUPS = ('pos_enc', 'state_enc', 'act_enc')


@dataclass
class ModelSpec:
    d_q: int
    d_v: int
    d_a: int
    pos_blocks: int = 3
    pos_hidden: int = 64
    state_blocks: int = 3
    state_hidden: int = 64
    act_blocks: int = 1
    act_hidden: int = 32
    n_correctors: int = 1
    corr_blocks: int = 5
    corr_hidden: int = 64
    corrector_activation: str = 'tanh'
    use_predictor: bool = True

    def __post_init__(self):
        if self.d_q != self.d_v:
            raise DimensionError(f'position and velocity blocks differ ({self.d_q} vs {self.d_v})')
        if self.corrector_activation not in ('tanh', 'relu'):
            raise ConfigError(f'corrector activation must be tanh or relu, got {self.corrector_activation!r}')
        if not self.use_predictor and self.n_correctors < 1:
            raise ConfigError('a model without predictor needs at least one corrector')

    @property
    def d_state(self):
        return self.d_q + self.d_v

    @classmethod
    def preset(cls, d_q, d_v, d_a, size='small', **overrides):
        if size not in SIZE_PRESETS:
            raise ConfigError(f'Unknown model size {size!r}')
        return cls(d_q=d_q, d_v=d_v, d_a=d_a, **{**SIZE_PRESETS[size], **overrides})

    def to_vector(self):
        numbers = [getattr(self, f.name) for f in fields(self)
                   if f.name not in ('corrector_activation', 'use_predictor')]
        numbers += [float(self.use_predictor), float(self.corrector_activation == 'relu')]
        return np.array(numbers, dtype=np.float64)

    @classmethod
    def from_vector(cls, vector):
        names = [f.name for f in fields(cls) if f.name not in ('corrector_activation', 'use_predictor')]
        values = {name: int(v) for name, v in zip(names, vector)}
        values['use_predictor'] = bool(vector[len(names)])
        values['corrector_activation'] = 'relu' if vector[len(names) + 1] else 'tanh'
        return cls(**values)


def triangular_size(n):
    return n * (n + 1) // 2


def assemble_mass_inverse(l_flat, n=None):
    """Fill L row by row from ``l_flat`` and return (M = L Lᵀ, L).

    The upper triangle of L Lᵀ is mirrored onto the lower one so M is
    symmetric bit for bit. Accepts ``(T,)`` or a batch ``(B, T)``.
    """
    l_flat = np.asarray(l_flat, dtype=np.float64)
    length = l_flat.shape[-1]
    if n is None:
        n = int(round((np.sqrt(8 * length + 1) - 1) / 2))
    if triangular_size(n) != length:
        raise DimensionError(f'{length} entries do not fill a lower-triangular matrix')
    rows, cols = np.tril_indices(n)
    L = np.zeros(l_flat.shape[:-1] + (n, n))
    L[..., rows, cols] = l_flat
    product = L @ np.swapaxes(L, -1, -2)
    upper = np.triu(product)
    M = upper + np.swapaxes(np.triu(product, 1), -1, -2)
    return M, L


class MoSimDynamics:
    kind = 'mosim'

    def __init__(self, spec, seed=0, active_correctors=0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.pos_enc = self.state_enc = self.act_enc = None
        if spec.use_predictor:
            self.pos_enc = ResNet(spec.d_q, spec.pos_hidden, triangular_size(spec.d_v),
                                  spec.pos_blocks, rng=rng)
            self.state_enc = ResNet(spec.d_state, spec.state_hidden, spec.d_v,
                                    spec.state_blocks, rng=rng)
            self.act_enc = MLP.build(spec.d_a, spec.act_hidden, spec.d_v, spec.act_blocks, rng=rng)
        self.correctors = [
            ResNet(spec.d_state + spec.d_a, spec.corr_hidden, spec.d_v, spec.corr_blocks,
                   activation=spec.corrector_activation, rng=rng, zero_output=True)
            for _ in range(spec.n_correctors)
        ]
        self.active_correctors = active_correctors
        self.config_hash = ''

    @property
    def active_correctors(self):
        return self._active

    @active_correctors.setter
    def active_correctors(self, value):
        if not 0 <= value <= len(self.correctors):
            raise ConfigError(f'active_correctors={value} outside [0, {len(self.correctors)}]')
        self._active = int(value)

    @property
    def d_state(self):
        return self.spec.d_state

    @property
    def d_a(self):
        return self.spec.d_a

    # -- parameters ---------------------------------------------------------

    def networks(self):
        nets = {}
        if self.spec.use_predictor:
            nets.update(pos_enc=self.pos_enc, state_enc=self.state_enc, act_enc=self.act_enc)
        for i, net in enumerate(self.correctors):
            nets[f'corr{i}'] = net
        return nets

    @property
    def params(self):
        merged = {}
        for name, net in self.networks().items():
            merged.update(prefixed(name, net.params))
        return merged

    def set_params(self, params):
        for name, net in self.networks().items():
            local = strip_prefix(name, params)
            for key in net.params:
                if key in local:
                    net.params[key] = np.array(local[key], dtype=np.float64)

    def active_groups(self):
        """Networks that contribute to ``derivative`` right now."""
        names = [n for n in self.networks() if not n.startswith('corr')]
        return names + [f'corr{i}' for i in range(self._active)]

    def group_keys(self, *groups):
        """Parameter names of the given groups ('predictor', 'pos_enc', 'corr0', ...)."""
        wanted = []
        for group in groups:
            wanted.extend(PREDICTOR_GROUPS if group == 'predictor' else (group,))
        return [k for k in self.params if k.split('.', 1)[0] in wanted]

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        nets = {name: net.copy() for name, net in self.networks().items()}
        if self.spec.use_predictor:
            clone.pos_enc, clone.state_enc, clone.act_enc = nets['pos_enc'], nets['state_enc'], nets['act_enc']
        clone.correctors = [nets[f'corr{i}'] for i in range(len(self.correctors))]
        return clone

    # -- evaluation ---------------------------------------------------------

    def _inputs(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        single = s.ndim == 1
        s2 = np.atleast_2d(s)
        a2 = np.atleast_2d(a)
        if s2.shape[-1] != self.spec.d_state:
            raise DimensionError(f'state has {s2.shape[-1]} entries, expected {self.spec.d_state}')
        if a2.shape[-1] != self.spec.d_a:
            raise DimensionError(f'action has {a2.shape[-1]} entries, expected {self.spec.d_a}')
        if a2.shape[0] != s2.shape[0]:
            a2 = np.broadcast_to(a2, (s2.shape[0], self.spec.d_a))
        return s2, a2, single

    def _predictor_acceleration(self, s, a):
        q = s[:, :self.spec.d_q]
        M, _ = assemble_mass_inverse(self.pos_enc(q), self.spec.d_v)
        w = self.state_enc(s) + self.act_enc(a)
        return np.einsum('bij,bj->bi', M, w)

    def predictor_derivative(self, s, a):
        s2, a2, single = self._inputs(s, a)
        qdot = s2[:, self.spec.d_q:]
        if self.spec.use_predictor:
            acc = self._predictor_acceleration(s2, a2)
        else:
            acc = np.zeros_like(qdot)
        out = np.concatenate([qdot, acc], axis=1)
        return out[0] if single else out

    def derivative(self, s, a):
        s2, a2, single = self._inputs(s, a)
        out = self.predictor_derivative(s2, a2)
        if self._active:
            sa = np.concatenate([s2, a2], axis=1)
            for net in self.correctors[:self._active]:
                out[:, self.spec.d_q:] += net(sa)
        return out[0] if single else out

    __call__ = derivative

    def vjp(self, s, a, cotangent):
        """Reverse-mode product through ``derivative``: (grad_params, grad_s, grad_a)."""
        s2, a2, single = self._inputs(s, a)
        cot = np.atleast_2d(np.asarray(cotangent, dtype=np.float64))
        if cot.shape != s2.shape:
            raise DimensionError(f'cotangent shape {cot.shape} does not match state {s2.shape}')
        d_q = self.spec.d_q
        cq, cv = cot[:, :d_q], cot[:, d_q:]
        grads = {}
        grad_s = np.zeros_like(s2)
        grad_a = np.zeros_like(a2)
        grad_s[:, d_q:] += cq

        if self.spec.use_predictor:
            q = s2[:, :d_q]
            M, L = assemble_mass_inverse(self.pos_enc(q), self.spec.d_v)
            w = self.state_enc(s2) + self.act_enc(a2)
            grad_M = cv[:, :, None] * w[:, None, :]
            grad_w = np.einsum('bij,bi->bj', M, cv)
            grad_L = (grad_M + np.swapaxes(grad_M, 1, 2)) @ L
            rows, cols = np.tril_indices(self.spec.d_v)
            g_pos, g_q = self.pos_enc.vjp(q, grad_L[:, rows, cols])
            g_state, g_s = self.state_enc.vjp(s2, grad_w)
            g_act, g_a = self.act_enc.vjp(a2, grad_w)
            grad_s[:, :d_q] += g_q
            grad_s += g_s
            grad_a += g_a
            grads.update(prefixed('pos_enc', g_pos))
            grads.update(prefixed('state_enc', g_state))
            grads.update(prefixed('act_enc', g_act))

        if self._active:
            sa = np.concatenate([s2, a2], axis=1)
            width = self.spec.d_state
            for i, net in enumerate(self.correctors[:self._active]):
                g_corr, g_in = net.vjp(sa, cv)
                grads.update(prefixed(f'corr{i}', g_corr))
                grad_s += g_in[:, :width]
                grad_a += g_in[:, width:]

        if single:
            return grads, grad_s[0], grad_a[0]
        return grads, grad_s, grad_a

    # -- serialization ------------------------------------------------------

    def to_tensors(self, config_hash=''):
        tensors = {
            'meta.kind': text_tensor(self.kind),
            'meta.config_hash': text_tensor(config_hash),
            'meta.spec': self.spec.to_vector(),
            'meta.active_correctors': np.array(float(self._active)),
        }
        tensors.update(self.params)
        return tensors

    @classmethod
    def from_tensors(cls, tensors):
        if 'meta.spec' not in tensors:
            raise ConfigError('checkpoint holds no dynamics model (meta.spec missing)')
        spec = ModelSpec.from_vector(tensors['meta.spec'])
        model = cls(spec, seed=0)
        missing = [k for k in model.params if k not in tensors]
        if missing:
            raise ConfigError(f'checkpoint is missing tensors: {", ".join(missing[:5])}')
        model.set_params(tensors)
        model.active_correctors = int(tensors.get('meta.active_correctors', 0))
        model.config_hash = tensor_text(tensors.get('meta.config_hash', np.zeros(0)))
        return model


def plain_param_count(d_in, hidden, d_out, n_blocks):
    return d_in * hidden + hidden + n_blocks * (2 * hidden * hidden + 2 * hidden) + hidden * d_out + d_out


def structured_param_count(spec):
    return int(sum(v.size for v in MoSimDynamics(spec).params.values()))


def matched_plain_spec(spec, n_blocks=3):
    """A predictor-free spec whose single corrector has about the same parameter count."""
    target = structured_param_count(replace(spec, n_correctors=0, use_predictor=True))
    d_in = spec.d_state + spec.d_a
    best = min(range(2, 513),
               key=lambda h: abs(plain_param_count(d_in, h, spec.d_v, n_blocks) - target))
    values = asdict(spec)
    values.update(use_predictor=False, n_correctors=1, corr_blocks=n_blocks, corr_hidden=best)
    return ModelSpec(**values)
