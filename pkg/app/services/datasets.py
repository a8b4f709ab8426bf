# ===== app/services/datasets.py =====
"""Trajectory datasets and the MOSIMTRJ file format.

Layout (little-endian): magic ``MOSIMTRJ``, version u32, env name and config
hash (each u32 length + UTF-8), D_q, D_v, D_a u32, dt f64, segment count u32,
then per segment: n u32, (n+1)×D states f64, n×D_a actions f64, source tag u8.
"""
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from app.errors import ConfigError, DataFormatError

MAGIC = b'MOSIMTRJ'
VERSION = 1
TAGS = {'random': 0, 'policy': 1}
TAG_NAMES = {code: name for name, code in TAGS.items()}


@dataclass
class TrajectorySegment:
    dt: float
    states: np.ndarray    # (n + 1, D)
    actions: np.ndarray   # (n, D_a)
    tag: str = 'random'

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ConfigError('segment states and actions must be 2-D arrays')
        if len(self.states) != len(self.actions) + 1:
            raise ConfigError(f'segment has {len(self.states)} states for {len(self.actions)} actions')
        if self.tag not in TAGS:
            raise ConfigError(f'Unknown source tag {self.tag!r}')

    @property
    def n_steps(self):
        return len(self.actions)

    def window(self, start, horizon):
        return TrajectorySegment(dt=self.dt, states=self.states[start:start + horizon + 1],
                                 actions=self.actions[start:start + horizon], tag=self.tag)


@dataclass
class Dataset:
    env: str
    d_q: int
    d_v: int
    d_a: int
    dt: float
    segments: list = field(default_factory=list)
    config_hash: str = ''

    @property
    def d_state(self):
        return self.d_q + self.d_v

    def __len__(self):
        return len(self.segments)

    @property
    def n_steps(self):
        return sum(seg.n_steps for seg in self.segments)

    def states(self):
        if not self.segments:
            return np.zeros((0, self.d_state))
        return np.concatenate([seg.states for seg in self.segments])

    def tag_counts(self):
        counts = {name: 0 for name in TAGS}
        for seg in self.segments:
            counts[seg.tag] += 1
        return counts

    def summary(self):
        return {
            'env': self.env,
            'trajectories': len(self.segments),
            'steps': self.n_steps,
            'dt': self.dt,
            'tags': self.tag_counts(),
            'config_hash': self.config_hash,
        }


def dataset_for_env(env, segments=None, config_hash=''):
    return Dataset(env=env.name, d_q=env.d_q, d_v=env.d_v, d_a=env.d_a, dt=env.dt,
                   segments=list(segments or []), config_hash=config_hash)


def _pack_text(text):
    encoded = text.encode('utf-8')
    return struct.pack('<I', len(encoded)) + encoded


def encode_dataset(dataset):
    parts = [
        MAGIC,
        struct.pack('<I', VERSION),
        _pack_text(dataset.env),
        _pack_text(dataset.config_hash),
        struct.pack('<3Id', dataset.d_q, dataset.d_v, dataset.d_a, dataset.dt),
        struct.pack('<I', len(dataset.segments)),
    ]
    for seg in dataset.segments:
        if seg.states.shape[1] != dataset.d_state or seg.actions.shape[1] != dataset.d_a:
            raise ConfigError('segment dimensions do not match the dataset header')
        parts.append(struct.pack('<I', seg.n_steps))
        parts.append(np.ascontiguousarray(seg.states).astype('<f8').tobytes())
        parts.append(np.ascontiguousarray(seg.actions).astype('<f8').tobytes())
        parts.append(struct.pack('<B', TAGS[seg.tag]))
    return b''.join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, size, what):
        if self.offset + size > len(self.data):
            raise DataFormatError(f'truncated dataset while reading {what}', self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what):
        (length,) = self.unpack('<I', f'{what} length')
        start = self.offset
        try:
            return self.take(length, what).decode('utf-8')
        except UnicodeDecodeError as exc:
            raise DataFormatError(f'{what} is not valid UTF-8', start) from exc

    def floats(self, count, what):
        return np.frombuffer(self.take(8 * count, what), dtype='<f8').astype(np.float64)


def decode_dataset(data):
    reader = _Reader(data)
    if reader.take(len(MAGIC), 'magic') != MAGIC:
        raise DataFormatError('bad dataset magic, expected MOSIMTRJ', 0)
    (version,) = reader.unpack('<I', 'format version')
    if version != VERSION:
        raise DataFormatError(f'unsupported dataset version {version}', len(MAGIC))
    env = reader.text('env name')
    config_hash = reader.text('config hash')
    d_q, d_v, d_a, dt = reader.unpack('<3Id', 'header dimensions')
    (count,) = reader.unpack('<I', 'segment count')

    d_state = d_q + d_v
    segments = []
    for index in range(count):
        (n,) = reader.unpack('<I', f'length of segment {index}')
        states = reader.floats((n + 1) * d_state, f'states of segment {index}').reshape(n + 1, d_state)
        actions = reader.floats(n * d_a, f'actions of segment {index}').reshape(n, d_a)
        tag_offset = reader.offset
        (tag,) = reader.unpack('<B', f'tag of segment {index}')
        if tag not in TAG_NAMES:
            raise DataFormatError(f'unknown source tag {tag}', tag_offset)
        segments.append(TrajectorySegment(dt=dt, states=states, actions=actions, tag=TAG_NAMES[tag]))
    if reader.offset != len(data):
        raise DataFormatError('trailing bytes after last segment', reader.offset)
    return Dataset(env=env, d_q=d_q, d_v=d_v, d_a=d_a, dt=dt, segments=segments, config_hash=config_hash)


def write_dataset(path, dataset):
    data = encode_dataset(dataset)
    try:
        with open(path, 'wb') as handle:
            handle.write(data)
    except OSError as exc:
        raise ConfigError(f'cannot write dataset {path}: {exc.strerror}') from exc


def read_dataset(path):
    try:
        with open(path, 'rb') as handle:
            data = handle.read()
    except OSError as exc:
        raise ConfigError(f'cannot read dataset {path}: {exc.strerror}') from exc
    return decode_dataset(data)


def add_observation_noise(dataset, sigma, seed=0):
    """Gaussian noise on every state entry; actions are shared, not copied."""
    if sigma < 0:
        raise ConfigError('noise sigma must be non-negative')
    if sigma == 0:
        return replace(dataset, segments=[replace(seg, states=seg.states.copy()) for seg in dataset.segments])
    rng = np.random.default_rng(seed)
    noisy = [replace(seg, states=seg.states + rng.normal(0.0, sigma, size=seg.states.shape))
             for seg in dataset.segments]
    return replace(dataset, segments=noisy)


def sample_fragments(dataset, horizon, n, rng, warm_in=100):
    """``n`` windows of ``horizon`` steps, each starting after ``warm_in`` steps."""
    if horizon < 1:
        raise ConfigError('fragment horizon must be at least 1')
    eligible = [seg for seg in dataset.segments if seg.n_steps >= warm_in + horizon]
    if not eligible:
        raise ConfigError(f'no segment has {warm_in} warm-in steps plus a {horizon}-step horizon')
    fragments = []
    for _ in range(n):
        seg = eligible[rng.integers(len(eligible))]
        start = int(rng.integers(warm_in, seg.n_steps - horizon + 1))
        fragments.append(seg.window(start, horizon))
    return fragments


def stack_fragments(fragments):
    """Batch equal-length fragments: (s0 (B, D), actions (H, B, D_a), truth (H+1, B, D))."""
    states = np.stack([frag.states for frag in fragments], axis=1)
    actions = np.stack([frag.actions for frag in fragments], axis=1)
    return states[0], actions, states


def split_dataset(dataset, val_fraction=0.1, seed=0):
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError('val_fraction must lie in [0, 1)')
    order = np.random.default_rng(seed).permutation(len(dataset.segments))
    n_val = int(math.ceil(val_fraction * len(order))) if val_fraction > 0 else 0
    val = [dataset.segments[i] for i in sorted(order[:n_val])]
    train = [dataset.segments[i] for i in sorted(order[n_val:])]
    return replace(dataset, segments=train), replace(dataset, segments=val)


def state_std(dataset):
    """Per-dimension state standard deviation; constant dimensions map to 1."""
    states = dataset.states()
    if len(states) == 0:
        return np.ones(dataset.d_state)
    std = states.std(axis=0)
    return np.where(std > 0, std, 1.0)
