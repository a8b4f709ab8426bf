# ===== app/services/planner.py =====
"""CEM model-predictive control inside a dynamics model and the zero-shot harness."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from app.errors import ConfigError, IntegrationError
from app.services.datasets import TrajectorySegment
from app.services.odeint import IntegratorConfig, integrate_interval, model_field
from app.utils.helpers import config_hash

logger = logging.getLogger(__name__)


@dataclass
class PlannerConfig:
    horizon: int = 20
    population: int = 64
    elite_fraction: float = 0.1
    iterations: int = 5
    smoothing: float = 0.0     # first-order low-pass along the planned mean sequence
    elite_retention: bool = True
    warm_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError('planner horizon must be at least 1')
        if self.iterations < 1:
            raise ConfigError('planner needs at least one iteration')
        if not 1 <= self.n_elite <= self.population:
            raise ConfigError(f'elite count {self.n_elite} outside [1, {self.population}]')
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError('smoothing must lie in [0, 1)')

    @property
    def n_elite(self):
        return max(1, int(round(self.elite_fraction * self.population)))

    def to_dict(self):
        return asdict(self)


@dataclass
class PlanResult:
    actions: np.ndarray
    predicted_return: float
    elite_returns: list = field(default_factory=list)


def evaluate_sequences(model, s0, sequences, reward_fn, dt, integrator):
    """Model return of each candidate ``(N, H, D_a)``; failed rollouts score -inf."""
    n, horizon, _ = sequences.shape
    field_fn = model_field(model)
    z = np.repeat(np.asarray(s0, dtype=np.float64)[None, :], n, axis=0)
    returns = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    for k in range(horizon):
        a = sequences[:, k]
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        try:
            z_next, _ = integrate_interval(field_fn, z[idx], a[idx], k * dt, dt, integrator, record=False)
        except IntegrationError:
            z_next = np.full((idx.size, z.shape[1]), np.nan)
            for j, i in enumerate(idx):
                try:
                    z_next[j], _ = integrate_interval(field_fn, z[i], a[i], k * dt, dt, integrator, record=False)
                except IntegrationError:
                    pass
        finite = np.all(np.isfinite(z_next), axis=1)
        z[idx[finite]] = z_next[finite]
        alive[idx[~finite]] = False
        rewards = np.asarray(reward_fn(z_next[finite], a[idx[finite]]), dtype=np.float64)
        returns[idx[finite]] += rewards
    returns[~alive] = -np.inf
    return returns


class CemPlanner:
    """Cross-entropy method over open-loop action sequences.

    The sampling distribution is a diagonal Gaussian (mean 0, std half the
    action range at start), clipped to the action bounds. With warm start
    the previous mean, shifted by one step, seeds the next call.
    """

    def __init__(self, cfg, action_low, action_high, dt, integrator=None):
        self.cfg = cfg
        self.low = np.atleast_1d(np.asarray(action_low, dtype=np.float64))
        self.high = np.atleast_1d(np.asarray(action_high, dtype=np.float64))
        self.dt = dt
        self.integrator = integrator or IntegratorConfig(rtol=1e-4, atol=1e-4)
        self.reset()

    @classmethod
    def for_env(cls, cfg, env, integrator=None):
        return cls(cfg, env.action_low, env.action_high, env.dt, integrator)

    def reset(self):
        self.rng = np.random.default_rng(self.cfg.seed)
        self._mean = None

    def _initial_mean(self, d_a):
        if self.cfg.warm_start and self._mean is not None:
            return np.concatenate([self._mean[1:], self._mean[-1:]])
        return np.zeros((self.cfg.horizon, d_a))

    def _smooth(self, mean):
        c = self.cfg.smoothing
        if c == 0.0:
            return mean
        out = mean.copy()
        for k in range(1, len(out)):
            out[k] = c * out[k - 1] + (1.0 - c) * mean[k]
        return out

    def plan(self, model, s0, reward_fn):
        cfg = self.cfg
        d_a = self.low.size
        mean = self._initial_mean(d_a)
        std = np.broadcast_to(0.5 * (self.high - self.low), mean.shape).copy()
        elites = elite_scores = None
        history = []
        for it in range(cfg.iterations):
            noise = self.rng.standard_normal((cfg.population, cfg.horizon, d_a))
            candidates = np.clip(mean + std * noise, self.low, self.high)
            scores = evaluate_sequences(model, s0, candidates, reward_fn, self.dt, self.integrator)
            if cfg.elite_retention and elites is not None:
                candidates = np.concatenate([candidates, elites])
                scores = np.concatenate([scores, elite_scores])
            n_bad = int(np.sum(~np.isfinite(scores)))
            if n_bad:
                logger.warning('%d CEM candidates failed to integrate', n_bad)
            order = np.argsort(-scores, kind='stable')[:cfg.n_elite]
            elites, elite_scores = candidates[order], scores[order]
            if np.all(np.isfinite(elite_scores)):
                mean = self._smooth(elites.mean(axis=0))
                std = elites.std(axis=0)
            history.append(float(np.mean(elite_scores)))
            logger.debug('CEM iteration %d: elite mean return %.4f', it, history[-1])

        self._mean = mean
        predicted = evaluate_sequences(model, s0, mean[None], reward_fn, self.dt, self.integrator)[0]
        return PlanResult(actions=mean.copy(), predicted_return=float(predicted), elite_returns=history)


def cem_plan(model, s0, reward_fn, cfg, action_low, action_high, dt, integrator=None):
    planner = CemPlanner(cfg, action_low, action_high, dt, integrator)
    result = planner.plan(model, s0, reward_fn)
    return result.actions, result.predicted_return


def _run_episode(plan_model, env, reward_fn, plan_reward, cfg, episode_length, seed, integrator,
                 guard_oracle, episode):
    rng = np.random.default_rng([seed, episode])
    s = env.sample_initial_state(rng)
    planner = CemPlanner(PlannerConfig(**{**cfg.to_dict(), 'seed': [cfg.seed, episode]}),
                         env.action_low, env.action_high, env.dt, integrator)
    rewards = []
    violations = 0
    for _ in range(episode_length):
        calls = env.derivative_calls
        a = planner.plan(plan_model, s, plan_reward).actions[0]
        if guard_oracle and env.derivative_calls != calls:
            violations += 1
        s = env.step(s, a)
        rewards.append(float(reward_fn(s, a)))
    return {'return': float(np.sum(rewards)), 'length': len(rewards), 'rewards': rewards}, violations


def _run_episodes(plan_model, env, reward_fn, plan_reward, cfg, n_episodes, episode_length, seed,
                  integrator, guard_oracle, threads=1):
    """Episodes are seeded by index, so the thread count never changes the result.

    With more than one worker every episode steps its own clone of ``env`` so
    the oracle-call guard only sees that episode's calls.
    """
    def one(episode):
        local = env.clone() if threads > 1 else env
        model = local if plan_model is env else plan_model
        return _run_episode(model, local, reward_fn, plan_reward, cfg, episode_length, seed, integrator,
                            guard_oracle, episode)

    if n_episodes == 0:
        return [], 0
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(one, range(n_episodes)))
    return [doc for doc, _ in results], sum(v for _, v in results)


def zero_shot_eval(model, env, reward_fn=None, cfg=None, n_episodes=5, episode_length=100, seed=0,
                   integrator=None, plan_reward=None, oracle_reference=True, threads=1,
                   model_ckpt=None):
    """MPC in ``model``, executed in ``env``; the same loop with the oracle as the reference.

    ``plan_reward`` (default ``reward_fn``) is what the planner optimizes;
    reported returns always use the raw ``reward_fn``.
    """
    cfg = cfg or PlannerConfig()
    reward_fn = reward_fn or env.reward
    plan_reward = plan_reward or reward_fn
    guard = model is not env
    episodes, violations = _run_episodes(model, env, reward_fn, plan_reward, cfg, n_episodes,
                                         episode_length, seed, integrator, guard, threads)
    report = {
        'env': env.name,
        'model_ckpt': model_ckpt,
        'planner_cfg_hash': config_hash(cfg.to_dict()),
        'mean_return': float(np.mean([e['return'] for e in episodes])) if episodes else 0.0,
        'episodes': episodes,
        'oracle_calls_during_planning': violations,
    }
    if oracle_reference:
        oracle_episodes, _ = _run_episodes(env, env, reward_fn, plan_reward, cfg, n_episodes,
                                           episode_length, seed, integrator, False, threads)
        report['oracle_planner_return'] = (float(np.mean([e['return'] for e in oracle_episodes]))
                                           if oracle_episodes else 0.0)
        report['oracle_episodes'] = oracle_episodes
    logger.info('zero-shot %s: mean return %.3f, oracle planner %s', env.name, report['mean_return'],
                report.get('oracle_planner_return'))
    return report


def policy_trajectory(env, cfg, index, n_steps, seed=0, explore=0.1, integrator=None):
    """Planner-driven oracle rollout with Gaussian exploration, tagged ``policy``."""
    rng = np.random.default_rng([seed, index])
    s = env.sample_initial_state(rng)
    planner = CemPlanner(PlannerConfig(**{**cfg.to_dict(), 'seed': [cfg.seed, seed, index]}),
                         env.action_low, env.action_high, env.dt, integrator)
    half_range = 0.5 * (env.action_high - env.action_low)
    states, actions = [s], []
    for _ in range(n_steps):
        a = planner.plan(env, s, env.reward).actions[0]
        a = env.clip_action(a + explore * half_range * rng.standard_normal(env.d_a))
        s = env.step(s, a)
        states.append(s)
        actions.append(a)
    actions = np.stack(actions) if actions else np.zeros((0, env.d_a))
    return TrajectorySegment(dt=env.dt, states=np.stack(states), actions=actions, tag='policy')


def generate_policy_dataset(env, n_traj, n_steps, cfg, seed=0, explore=0.1, threads=1, integrator=None):
    if n_traj == 0:
        return []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        segments = list(pool.map(
            lambda i: policy_trajectory(env, cfg, i, n_steps, seed, explore, integrator), range(n_traj)))
    logger.info('generated %d planner-driven %s trajectories of %d steps', n_traj, env.name, n_steps)
    return segments
