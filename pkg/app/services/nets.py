# ===== app/services/nets.py =====
"""Feed-forward networks with hand-written reverse mode, and Adam.

Networks keep their parameters in a flat ``dict`` of float64 arrays so that
the dynamics model can prefix, freeze, flatten and serialize them without
knowing the architecture. Weights are stored (out, in); inputs are either a
single vector ``(D,)`` or a batch ``(B, D)``.
"""
from dataclasses import dataclass, field

import numpy as np

from app.errors import DimensionError, TrainingFault

ACTIVATIONS = ('tanh', 'relu', 'identity')


def activate(name, z):
    if name == 'tanh':
        return np.tanh(z)
    if name == 'relu':
        return np.maximum(z, 0.0)
    return z


def activation_grad(name, z, y):
    """Derivative of the activation, given pre-activation ``z`` and output ``y``."""
    if name == 'tanh':
        return 1.0 - y * y
    if name == 'relu':
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


def init_linear(rng, fan_in, fan_out, zero=False):
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights, zero bias."""
    if zero:
        weight = np.zeros((fan_out, fan_in))
    else:
        bound = np.sqrt(1.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    return weight, np.zeros(fan_out)


class Network:
    """Common plumbing for the MLP and the residual network."""

    in_dim = 0
    out_dim = 0

    def __init__(self, activation='tanh'):
        if activation not in ACTIVATIONS:
            raise DimensionError(f'Unknown activation {activation!r}')
        self.activation = activation
        self.params = {}

    def _as_batch(self, x, width, what='input'):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != width:
            raise DimensionError(
                f'{what} has trailing dimension {x.shape[-1]}, expected {width}', layer=0)
        return x, single

    def _check_cotangent(self, cotangent):
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape[-1] != self.out_dim:
            raise DimensionError(
                f'cotangent has length {cotangent.shape[-1]}, expected {self.out_dim}')
        return cotangent

    def forward(self, x):
        x, single = self._as_batch(x, self.in_dim)
        out, _ = self._trace(x)
        return out[0] if single else out

    __call__ = forward

    def vjp(self, x, cotangent):
        """Return (grad_params, grad_x) for the cotangent ``u``: uᵀ∂y/∂θ and uᵀ∂y/∂x."""
        x, single = self._as_batch(x, self.in_dim)
        cotangent = self._check_cotangent(cotangent)
        if cotangent.ndim == 1:
            cotangent = np.broadcast_to(cotangent, (x.shape[0], self.out_dim))
        if cotangent.shape[0] != x.shape[0]:
            raise DimensionError('cotangent batch does not match input batch')
        _, trace = self._trace(x)
        grads, grad_x = self._backward(trace, cotangent)
        return grads, (grad_x[0] if single else grad_x)

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone


class MLP(Network):
    """Fully-connected stack: input layer, hidden blocks, output layer.

    ``sizes`` lists every width from input to output; the activation follows
    every layer except the last.
    """

    def __init__(self, sizes, activation='tanh', params=None, rng=None, zero_output=False):
        super().__init__(activation)
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2:
            raise DimensionError('an MLP needs at least an input and an output width')
        self.n_layers = len(self.sizes) - 1
        self.in_dim = self.sizes[0]
        self.out_dim = self.sizes[-1]
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
                last = i == self.n_layers - 1
                w, b = init_linear(rng, fan_in, fan_out, zero=zero_output and last)
                self.params[f'l{i}.w'] = w
                self.params[f'l{i}.b'] = b
        else:
            self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            self._validate()

    @classmethod
    def build(cls, d_in, d_hidden, d_out, n_blocks=1, **kwargs):
        """Input layer to ``d_hidden``, ``n_blocks`` hidden layers, output layer."""
        return cls([d_in] + [d_hidden] * (n_blocks + 1) + [d_out], **kwargs)

    def _validate(self):
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w = self.params.get(f'l{i}.w')
            b = self.params.get(f'l{i}.b')
            if w is None or b is None:
                raise DimensionError('missing weight or bias', layer=i)
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise DimensionError(
                    f'weight {w.shape} / bias {b.shape} do not compose with widths {fan_in}->{fan_out}',
                    layer=i)

    def _trace(self, x):
        hs = [x]
        zs = []
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[f'l{i}.w'].T + self.params[f'l{i}.b']
            h = activate(self.activation, z) if i < self.n_layers - 1 else z
            zs.append(z)
            hs.append(h)
        return h, (zs, hs)

    def _backward(self, trace, g):
        zs, hs = trace
        grads = {}
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * activation_grad(self.activation, zs[i], hs[i + 1])
            grads[f'l{i}.w'] = g.T @ hs[i]
            grads[f'l{i}.b'] = g.sum(axis=0)
            g = g @ self.params[f'l{i}.w']
        return grads, g


class ResNet(Network):
    """Input projection, activation, residual blocks, output projection.

    Each block maps ``h -> h + W2 act(W1 h + b1) + b2``.
    """

    def __init__(self, d_in, d_hidden, d_out, n_blocks=1, activation='tanh',
                 params=None, rng=None, zero_output=False):
        super().__init__(activation)
        if n_blocks < 1:
            raise DimensionError('a residual network needs at least one block')
        self.in_dim = int(d_in)
        self.hidden = int(d_hidden)
        self.out_dim = int(d_out)
        self.n_blocks = int(n_blocks)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.params['in.w'], self.params['in.b'] = init_linear(rng, self.in_dim, self.hidden)
            for i in range(self.n_blocks):
                self.params[f'blk{i}.w1'], self.params[f'blk{i}.b1'] = init_linear(rng, self.hidden, self.hidden)
                self.params[f'blk{i}.w2'], self.params[f'blk{i}.b2'] = init_linear(rng, self.hidden, self.hidden)
            self.params['out.w'], self.params['out.b'] = init_linear(
                rng, self.hidden, self.out_dim, zero=zero_output)
        else:
            self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            self._validate()

    def _validate(self):
        expected = {'in.w': (self.hidden, self.in_dim), 'in.b': (self.hidden,)}
        for i in range(self.n_blocks):
            expected[f'blk{i}.w1'] = (self.hidden, self.hidden)
            expected[f'blk{i}.b1'] = (self.hidden,)
            expected[f'blk{i}.w2'] = (self.hidden, self.hidden)
            expected[f'blk{i}.b2'] = (self.hidden,)
        expected['out.w'] = (self.out_dim, self.hidden)
        expected['out.b'] = (self.out_dim,)
        for index, (name, shape) in enumerate(expected.items()):
            if name not in self.params or self.params[name].shape != shape:
                got = self.params[name].shape if name in self.params else None
                raise DimensionError(f'{name} has shape {got}, expected {shape}', layer=index // 2)

    def _trace(self, x):
        p = self.params
        z0 = x @ p['in.w'].T + p['in.b']
        h = activate(self.activation, z0)
        trace = {'x': x, 'z0': z0, 'h0': h, 'blocks': []}
        for i in range(self.n_blocks):
            a = h @ p[f'blk{i}.w1'].T + p[f'blk{i}.b1']
            u = activate(self.activation, a)
            trace['blocks'].append((h, a, u))
            h = h + u @ p[f'blk{i}.w2'].T + p[f'blk{i}.b2']
        trace['h'] = h
        out = h @ p['out.w'].T + p['out.b']
        return out, trace

    def _backward(self, trace, g):
        p = self.params
        grads = {
            'out.w': g.T @ trace['h'],
            'out.b': g.sum(axis=0),
        }
        gh = g @ p['out.w']
        for i in reversed(range(self.n_blocks)):
            h_prev, a, u = trace['blocks'][i]
            grads[f'blk{i}.b2'] = gh.sum(axis=0)
            grads[f'blk{i}.w2'] = gh.T @ u
            ga = (gh @ p[f'blk{i}.w2']) * activation_grad(self.activation, a, u)
            grads[f'blk{i}.w1'] = ga.T @ h_prev
            grads[f'blk{i}.b1'] = ga.sum(axis=0)
            gh = gh + ga @ p[f'blk{i}.w1']
        gz0 = gh * activation_grad(self.activation, trace['z0'], trace['h0'])
        grads['in.w'] = gz0.T @ trace['x']
        grads['in.b'] = gz0.sum(axis=0)
        return grads, gz0 @ p['in.w']


# ---------------------------------------------------------------------------
# Parameter dict utilities
# ---------------------------------------------------------------------------

def prefixed(prefix, params):
    return {f'{prefix}.{k}': v for k, v in params.items()}


def strip_prefix(prefix, params):
    head = prefix + '.'
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def flatten_params(params, keys):
    if not keys:
        return np.zeros(0)
    return np.concatenate([np.ravel(params[k]) for k in keys])


def unflatten_params(vector, like, keys):
    out = {}
    offset = 0
    for k in keys:
        size = like[k].size
        out[k] = np.asarray(vector[offset:offset + size]).reshape(like[k].shape)
        offset += size
    if offset != len(vector):
        raise DimensionError(f'flat vector has {len(vector)} entries, keys need {offset}')
    return out


def param_count(params, keys=None):
    keys = params.keys() if keys is None else keys
    return int(sum(params[k].size for k in keys))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """Bias-corrected Adam update of the keys present in ``grads``.

    Returns a new state and a new parameter dict; keys absent from ``grads``
    are carried over untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingFault(f'non-finite gradient for {name}')
        if name not in params or np.shape(params[name]) != np.shape(g):
            raise DimensionError(f'gradient {name} does not match any parameter shape')

    t = state.t + 1
    m, v = dict(state.m), dict(state.v)
    new_params = dict(params)
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        m[name] = state.beta1 * m.get(name, np.zeros_like(g)) + (1.0 - state.beta1) * g
        v[name] = state.beta2 * v.get(name, np.zeros_like(g)) + (1.0 - state.beta2) * g * g
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2
        new_params[name] = params[name] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                          eps=state.eps, t=t, m=m, v=v)
    return new_state, new_params
