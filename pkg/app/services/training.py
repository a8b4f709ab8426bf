# ===== app/services/training.py =====
"""Segment-matching training: multi-stage, end-to-end and the few-shot loop."""
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from app.errors import ConfigError, IntegrationError, TrainingFault
from app.services.bench import rollout_mse
from app.services.checkpoint import read_checkpoint, write_checkpoint
from app.services.datasets import (TrajectorySegment, add_observation_noise, sample_fragments,
                                   stack_fragments)
from app.services.dynamics import MoSimDynamics
from app.services.nets import AdamState, adam_step, unflatten_params
from app.services.odeint import (IntegratorConfig, grid_adjoint, grid_backprop, integrate_grid,
                                 integrate_interval, model_field, rollout)

logger = logging.getLogger(__name__)

GRAD_PATHS = ('backprop_steps', 'adjoint')


@dataclass
class TrainConfig:
    segment_length: int = 8
    max_segment_length: int = 32
    batch_size: int = 16
    steps_per_stage: list = field(default_factory=lambda: [2000, 1000])
    grad_path: str = 'backprop_steps'
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    noise_sigma: float = 0.0
    warm_in: int = 100
    val_segments: int = 64
    val_horizons: list = field(default_factory=lambda: [16, 100])
    val_every: int = 500        # 0 disables periodic validation
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.segment_length < 1:
            raise ConfigError('segment_length must be at least 1')
        if self.max_segment_length < self.segment_length:
            raise ConfigError('max_segment_length must not be below segment_length')
        if self.batch_size < 1:
            raise ConfigError('batch_size must be at least 1')
        if not self.steps_per_stage or any(n < 0 for n in self.steps_per_stage):
            raise ConfigError('steps_per_stage needs one non-negative budget per stage')
        if self.grad_path not in GRAD_PATHS:
            raise ConfigError(f'Unknown gradient path {self.grad_path!r}')
        if self.noise_sigma < 0:
            raise ConfigError('noise_sigma must be non-negative')

    @property
    def total_steps(self):
        return int(sum(self.steps_per_stage))

    def curriculum(self):
        lengths = [self.segment_length]
        while lengths[-1] * 2 <= self.max_segment_length:
            lengths.append(lengths[-1] * 2)
        return lengths


def curriculum_length(cfg, step_in_phase, phase_steps):
    lengths = cfg.curriculum()
    if phase_steps <= 0:
        return lengths[0]
    return lengths[min(len(lengths) - 1, step_in_phase * len(lengths) // phase_steps)]


def flat_vjp(model, keys):
    """``vjp_f(z, a, u) -> (uᵀ∂f/∂z, uᵀ∂f/∂θ)`` with θ the flattened ``keys``."""
    sizes = {k: v.size for k, v in model.params.items()}

    def vjp_f(z, a, u):
        grads, grad_s, _ = model.vjp(z, a, u)
        parts = [np.ravel(grads[k]) if k in grads else np.zeros(sizes[k]) for k in keys]
        return grad_s, (np.concatenate(parts) if parts else np.zeros(0))

    return vjp_f


def _find_failing(model, fragments, cfg):
    for index, frag in enumerate(fragments):
        try:
            pred = rollout(model, frag.states[0], frag.actions, frag.dt, cfg)
        except IntegrationError:
            return index
        if not np.all(np.isfinite(pred)):
            return index
    return None


def segment_loss(model, fragments, grad_path='backprop_steps', trainable=None, cfg=None):
    """MSE of the model's rollout against every recorded boundary state.

    Returns ``(loss, grads)`` where ``grads`` covers every model parameter;
    keys outside ``trainable`` (default: all) are zero.
    """
    if grad_path not in GRAD_PATHS:
        raise ConfigError(f'Unknown gradient path {grad_path!r}')
    if not fragments or min(frag.n_steps for frag in fragments) < 1:
        raise ConfigError('segment_loss needs fragments of at least one step')
    cfg = cfg or IntegratorConfig()
    params = model.params
    wanted = set(params) if trainable is None else set(trainable)
    keys = [k for k in params if k in wanted]
    s0, actions, truth = stack_fragments(fragments)
    field_fn = model_field(model)
    dt = fragments[0].dt

    try:
        solution = integrate_grid(field_fn, s0, actions, dt, cfg, record=(grad_path == 'backprop_steps'))
    except IntegrationError as exc:
        raise TrainingFault(f'integration failed: {exc}', segment=_find_failing(model, fragments, cfg)) from exc
    diff = solution.states[1:] - truth[1:]
    loss = float(np.mean(diff ** 2))
    if not np.isfinite(loss):
        raise TrainingFault('non-finite loss', segment=_find_failing(model, fragments, cfg))

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    if keys:
        cotangents = np.zeros_like(solution.states)
        cotangents[1:] = 2.0 * diff / diff.size
        vjp_f = flat_vjp(model, keys)
        if grad_path == 'backprop_steps':
            g_flat, _ = grid_backprop(vjp_f, solution, cotangents)
        else:
            g_flat, _ = grid_adjoint(field_fn, vjp_f, solution, cotangents, cfg)
        grads.update(unflatten_params(g_flat, params, keys))
    return loss, grads


class TrainLog:
    """Per-step training records, mirrored to a JSON-lines file when ``path`` is set."""

    def __init__(self, path=None, append=False):
        self.path = path
        self.records = []
        if path and not append:
            self._open('w').close()

    def _open(self, mode):
        try:
            return open(self.path, mode, encoding='utf-8')
        except OSError as exc:
            raise ConfigError(f'cannot write training log {self.path}: {exc.strerror}') from exc

    def write(self, record):
        self.records.append(record)
        if self.path:
            with self._open('a') as handle:
                handle.write(json.dumps(record, sort_keys=True) + '\n')

    @property
    def losses(self):
        return [r['loss'] for r in self.records if 'loss' in r]

    @property
    def stage_boundaries(self):
        return [r['step'] for r in self.records if r.get('event') == 'stage_start']


@dataclass
class Stage:
    index: int
    active_correctors: int
    groups: tuple
    steps: int


class Trainer:
    """Runs the training schedule for one model on one dataset.

    Adam state, the global step and the stage index are checkpointed together
    with the parameters, so a run resumed from a checkpoint continues exactly
    where it stopped (every step draws its batch from ``default_rng([seed, step])``).
    """

    def __init__(self, cfg, dataset, model, val_dataset=None, integrator=None, log_path=None,
                 checkpoint_path=None, config_hash='', threads=1):
        if len(dataset) == 0:
            raise ConfigError('training dataset is empty')
        self.cfg = cfg
        self.model = model
        self.integrator = integrator or IntegratorConfig()
        self.val_dataset = val_dataset
        self.checkpoint_path = checkpoint_path
        self.config_hash = config_hash
        self.threads = threads
        self.dataset = dataset
        if cfg.noise_sigma > 0:
            self.dataset = add_observation_noise(dataset, cfg.noise_sigma, seed=cfg.seed)
        self.log_path = log_path
        self.log = None
        self.step = 0
        self.stage = 0
        self.adam = self._fresh_adam()
        self._started = None

    def _fresh_adam(self):
        return AdamState(lr=self.cfg.lr, beta1=self.cfg.beta1, beta2=self.cfg.beta2, eps=self.cfg.eps)

    # -- schedules ----------------------------------------------------------

    def multistage_schedule(self):
        n_corr = len(self.model.correctors)
        if not self.model.spec.use_predictor:
            raise ConfigError('multi-stage training needs the structured predictor; use end-to-end')
        if len(self.cfg.steps_per_stage) != 1 + n_corr:
            raise ConfigError(f'steps_per_stage has {len(self.cfg.steps_per_stage)} entries, '
                              f'model needs {1 + n_corr}')
        stages = [Stage(0, 0, ('predictor',), self.cfg.steps_per_stage[0])]
        for k in range(1, 1 + n_corr):
            stages.append(Stage(k, k, (f'corr{k - 1}',), self.cfg.steps_per_stage[k]))
        return stages

    def end_to_end_schedule(self):
        groups = tuple(self.model.networks())
        return [Stage(0, len(self.model.correctors), groups, self.cfg.total_steps)]

    # -- one optimizer step -------------------------------------------------

    def batch(self, step, length):
        rng = np.random.default_rng([self.cfg.seed, step])
        return sample_fragments(self.dataset, length, self.cfg.batch_size, rng, warm_in=self.cfg.warm_in)

    def train_step(self, trainable, length):
        fragments = self.batch(self.step, length)
        loss, grads = segment_loss(self.model, fragments, self.cfg.grad_path, trainable, self.integrator)
        self.adam, params = adam_step(self.adam, self.model.params, {k: grads[k] for k in trainable})
        self.model.set_params(params)
        return loss

    def validate(self):
        if self.val_dataset is None or len(self.val_dataset) == 0:
            return {}
        scores = {}
        for horizon in self.cfg.val_horizons:
            try:
                result = rollout_mse(self.model, self.val_dataset, horizon, self.cfg.val_segments,
                                     cfg=self.integrator, seed=self.cfg.seed, warm_in=self.cfg.warm_in,
                                     threads=self.threads)
            except ConfigError as exc:
                logger.debug('skipping validation horizon %d: %s', horizon, exc)
                continue
            scores[str(horizon)] = result.mse
        return scores

    # -- checkpoints --------------------------------------------------------

    def checkpoint_tensors(self):
        tensors = self.model.to_tensors(self.config_hash)
        tensors['meta.step'] = np.array(float(self.step))
        tensors['meta.stage'] = np.array(float(self.stage))
        tensors['meta.adam_t'] = np.array(float(self.adam.t))
        for name, value in self.adam.m.items():
            tensors[f'adam.m.{name}'] = value
        for name, value in self.adam.v.items():
            tensors[f'adam.v.{name}'] = value
        return tensors

    def save_checkpoint(self, path=None):
        path = path or self.checkpoint_path
        if path:
            write_checkpoint(path, self.checkpoint_tensors())
            logger.debug('checkpoint written to %s at step %d', path, self.step)

    def resume(self, path):
        tensors = read_checkpoint(path)
        restored = MoSimDynamics.from_tensors(tensors)
        if restored.spec != self.model.spec:
            raise ConfigError('checkpoint model does not match the configured model')
        self.model.set_params(restored.params)
        self.model.active_correctors = restored.active_correctors
        self.step = int(tensors.get('meta.step', 0))
        self.stage = int(tensors.get('meta.stage', 0))
        self.adam = self._fresh_adam()
        self.adam.t = int(tensors.get('meta.adam_t', 0))
        self.adam.m = {k[len('adam.m.'):]: v for k, v in tensors.items() if k.startswith('adam.m.')}
        self.adam.v = {k[len('adam.v.'):]: v for k, v in tensors.items() if k.startswith('adam.v.')}
        logger.info('resumed from %s at step %d (stage %d)', path, self.step, self.stage)

    # -- schedule driver ----------------------------------------------------

    def run(self, schedule):
        resuming = self.step > 0
        self.log = self.log or TrainLog(self.log_path, append=resuming)
        self._started = time.monotonic()
        stage_start = 0
        for stage in schedule:
            stage_end = stage_start + stage.steps
            if stage.index < self.stage or self.step >= stage_end:
                stage_start = stage_end
                continue
            if stage.index > self.stage:
                self.adam = self._fresh_adam()
            self.stage = stage.index
            self.model.active_correctors = stage.active_correctors
            trainable = self.model.group_keys(*stage.groups)
            if self.step == stage_start:
                self.log.write({'event': 'stage_start', 'stage': stage.index, 'step': self.step,
                                'trainable': len(trainable), 'config_hash': self.config_hash})
            last_loss = None
            while self.step < stage_end:
                is_first = stage.index == 0
                length = (curriculum_length(self.cfg, self.step - stage_start, stage.steps)
                          if is_first else self.cfg.max_segment_length)
                last_loss = self.train_step(trainable, length)
                self.step += 1
                record = {'step': self.step, 'stage': stage.index, 'loss': last_loss,
                          'segment_length': length, 'elapsed': time.monotonic() - self._started,
                          'config_hash': self.config_hash}
                if self.cfg.val_every and self.step % self.cfg.val_every == 0:
                    record['val'] = self.validate()
                self.log.write(record)
                logger.debug('step %d stage %d loss %.6e', self.step, stage.index, last_loss)
                if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save_checkpoint()
            logger.info('stage %d finished at step %d, last loss %s', stage.index, self.step,
                        'n/a' if last_loss is None else f'{last_loss:.4e}')
            stage_start = stage_end
        if schedule:
            self.model.active_correctors = schedule[-1].active_correctors
        self.save_checkpoint()
        return self.model, self.log


def train_multistage(cfg, dataset, model, **kwargs):
    trainer = Trainer(cfg, dataset, model, **kwargs)
    return trainer.run(trainer.multistage_schedule())


def train_end_to_end(cfg, dataset, model, **kwargs):
    trainer = Trainer(cfg, dataset, model, **kwargs)
    return trainer.run(trainer.end_to_end_schedule())


# ---------------------------------------------------------------------------
# Few-shot data collection
# ---------------------------------------------------------------------------

@dataclass
class FewShotConfig:
    virtual_window: int = 5000
    real_steps_per_window: int = 1000
    update_every: int = 100
    episode_length: int = 200
    total_virtual_steps: int = 20000
    collect: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ('virtual_window', 'update_every', 'episode_length'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be at least 1')
        if self.real_steps_per_window < 0 or self.total_virtual_steps < 0:
            raise ConfigError('step budgets must be non-negative')

    def to_dict(self):
        return asdict(self)


def _collect_real(env, model, planner, reward_fn, n_steps, episode_length, rng):
    """Drive the oracle with the model-based planner; returns policy-tagged segments."""
    segments = []
    remaining = n_steps
    while remaining > 0:
        length = min(episode_length, remaining)
        s = env.sample_initial_state(rng)
        planner.reset()
        states, actions = [s], []
        for _ in range(length):
            plan = planner.plan(model, s, reward_fn)
            a = plan.actions[0]
            s = env.step(s, a)
            states.append(s)
            actions.append(a)
        segments.append(TrajectorySegment(dt=env.dt, states=np.stack(states),
                                          actions=np.stack(actions), tag='policy'))
        remaining -= length
    return segments


def few_shot_loop(cfg, env, planner, model, dataset, train_cfg, reward_fn=None, integrator=None):
    """Planner-driven virtual interaction with periodic oracle data collection.

    Virtual episodes start from replay-buffer states and step the learned
    model; every ``update_every`` virtual steps the model takes one optimizer
    step on the replay buffer; every ``virtual_window`` virtual steps
    ``real_steps_per_window`` oracle steps are appended when ``collect`` is set.
    """
    integrator = integrator or IntegratorConfig()
    reward_fn = reward_fn or env.reward
    rng = np.random.default_rng(cfg.seed)
    replay = list(dataset.segments)
    trainer = Trainer(train_cfg, dataset, model, integrator=integrator)
    trainable = model.group_keys(*model.active_groups())
    field_fn = model_field(model)

    virtual_steps = oracle_steps = updates = 0
    virtual_returns = []
    episode_return, episode_steps = 0.0, 0
    s = None
    while virtual_steps < cfg.total_virtual_steps:
        if s is None or episode_steps >= cfg.episode_length:
            if s is not None:
                virtual_returns.append(episode_return)
            seg = replay[rng.integers(len(replay))]
            s = seg.states[rng.integers(len(seg.states))].copy()
            planner.reset()
            episode_return, episode_steps = 0.0, 0
        a = planner.plan(model, s, reward_fn).actions[0]
        try:
            s_next, _ = integrate_interval(field_fn, s, a, 0.0, env.dt, integrator, record=False)
        except IntegrationError:
            s_next = None
        if s_next is None or not np.all(np.isfinite(s_next)):
            s = None
        else:
            episode_return += float(reward_fn(s_next, a))
            s = s_next
        episode_steps += 1
        virtual_steps += 1

        if virtual_steps % cfg.update_every == 0:
            trainer.dataset = replace(trainer.dataset, segments=replay)
            trainer.train_step(trainable, train_cfg.segment_length)
            trainer.step += 1
            updates += 1
        if cfg.collect and virtual_steps % cfg.virtual_window == 0 and cfg.real_steps_per_window:
            fresh = _collect_real(env, model, planner, reward_fn, cfg.real_steps_per_window,
                                  cfg.episode_length, rng)
            replay.extend(fresh)
            oracle_steps += cfg.real_steps_per_window
            logger.info('collected %d oracle steps after %d virtual steps', cfg.real_steps_per_window,
                        virtual_steps)

    log = {
        'virtual_steps': virtual_steps,
        'oracle_steps': oracle_steps,
        'updates': updates,
        'replay_segments': len(replay),
        'virtual_returns': virtual_returns,
        'config': cfg.to_dict(),
    }
    return model, log
