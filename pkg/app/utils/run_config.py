# ===== app/utils/run_config.py =====
"""Run-level configuration documents.

A run config is a JSON object whose sections map onto the service
dataclasses. Unknown sections and unknown keys are rejected; command-line
flags are applied on top of the file before validation (flags win).
"""
from dataclasses import asdict, dataclass, field, fields
import json

from app.errors import ConfigError
from app.services.dynamics import SIZE_PRESETS, ModelSpec
from app.services.flow import FlowConfig, PenaltyConfig
from app.services.odeint import IntegratorConfig
from app.services.planner import PlannerConfig
from app.services.training import FewShotConfig, TrainConfig
from app.utils.helpers import config_hash, validate_known_fields

MODEL_KEYS = ['size'] + [f.name for f in fields(ModelSpec) if f.name not in ('d_q', 'd_v', 'd_a')]


@dataclass
class DataConfig:
    env: str = 'pendulum'
    dataset: str = None
    val_dataset: str = None
    val_fraction: float = 0.1
    n_traj: int = 100
    duration: float = 10.0     # seconds per generated trajectory
    mode: str = 'random'       # random | policy
    sampler: str = 'uniform'   # uniform | poisson
    rate: float = 2.0

    def __post_init__(self):
        if self.mode not in ('random', 'policy'):
            raise ConfigError(f'Unknown data mode {self.mode!r}')
        if self.sampler not in ('uniform', 'poisson'):
            raise ConfigError(f'Unknown sampler {self.sampler!r}')
        if self.n_traj < 0 or self.duration < 0:
            raise ConfigError('n_traj and duration must be non-negative')


SECTIONS = {
    'train': TrainConfig,
    'integrator': IntegratorConfig,
    'planner': PlannerConfig,
    'penalty': PenaltyConfig,
    'flow': FlowConfig,
    'data': DataConfig,
    'few_shot': FewShotConfig,
}
SEEDED = ('train', 'planner', 'flow', 'few_shot')


@dataclass
class RunConfig:
    model: dict = field(default_factory=lambda: {'size': 'small'})
    train: TrainConfig = field(default_factory=TrainConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    penalty: PenaltyConfig = None
    flow: FlowConfig = field(default_factory=FlowConfig)
    data: DataConfig = field(default_factory=DataConfig)
    few_shot: FewShotConfig = field(default_factory=FewShotConfig)
    seed: int = 0

    def to_dict(self):
        doc = {name: asdict(getattr(self, name)) for name in SECTIONS if getattr(self, name) is not None}
        doc['model'] = dict(self.model)
        doc['seed'] = self.seed
        return doc

    @property
    def hash(self):
        return config_hash(self.to_dict())

    def model_spec(self, d_q, d_v, d_a):
        values = dict(self.model)
        size = values.pop('size', 'small')
        return ModelSpec.preset(d_q, d_v, d_a, size, **values)


def _build_section(name, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f'Section {name} must be an object')
    validate_known_fields(values, [f.name for f in fields(cls)], where=f'section {name}')
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f'Invalid section {name}: {e}')


def parse_run_config(doc, overrides=None):
    """Validate a config document; ``overrides`` maps 'section.key' (or 'seed') to flag values."""
    doc = json.loads(json.dumps(doc or {}))
    if not isinstance(doc, dict):
        raise ConfigError('Run config must be a JSON object')
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if dotted == 'seed':
            doc['seed'] = value
            continue
        section, key = dotted.split('.', 1)
        doc.setdefault(section, {})[key] = value

    validate_known_fields(doc, list(SECTIONS) + ['model', 'seed'], where='run config')
    seed = doc.get('seed', 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError('seed must be an integer')

    model = dict(doc.get('model') or {'size': 'small'})
    validate_known_fields(model, MODEL_KEYS, where='section model')
    if model.setdefault('size', 'small') not in SIZE_PRESETS:
        raise ConfigError(f'Unknown model size {model["size"]!r}')

    sections = {}
    for name, cls in SECTIONS.items():
        if name not in doc:
            continue
        values = dict(doc[name])
        if name in SEEDED and 'seed' in doc:
            values.setdefault('seed', seed)
        sections[name] = _build_section(name, cls, values)
    for name in SEEDED:
        if name not in sections and 'seed' in doc:
            sections[name] = _build_section(name, SECTIONS[name], {'seed': seed})
    return RunConfig(model=model, seed=seed, **sections)


def load_run_config(path=None, overrides=None):
    doc = {}
    if path:
        try:
            with open(path, encoding='utf-8') as handle:
                doc = json.load(handle)
        except FileNotFoundError:
            raise ConfigError(f'Config file not found: {path}')
        except json.JSONDecodeError as e:
            raise ConfigError(f'Config file {path} is not valid JSON: {e.msg} (line {e.lineno})')
    return parse_run_config(doc, overrides)
