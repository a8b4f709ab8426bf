import numpy as np
import pytest

from app.errors import ConfigError
from app.services.dynamics import MoSimDynamics
from app.services.planner import (CemPlanner, PlannerConfig, cem_plan, evaluate_sequences,
                                  policy_trajectory, zero_shot_eval)
from app.services.odeint import IntegratorConfig


class NanAbove:
    """Zero dynamics that turn into NaN whenever the action exceeds 0.5."""

    d_a = 1

    def derivative(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        bad = np.any(a > 0.5, axis=-1, keepdims=True)
        return np.where(bad, np.nan, np.zeros_like(s))


def reach_one(s, a):
    return -(np.asarray(s)[..., 0] - 1.0) ** 2


def test_config_validation():
    with pytest.raises(ConfigError):
        PlannerConfig(horizon=0)
    with pytest.raises(ConfigError):
        PlannerConfig(iterations=0)
    with pytest.raises(ConfigError):
        PlannerConfig(population=10, elite_fraction=2.0)
    with pytest.raises(ConfigError):
        PlannerConfig(smoothing=1.0)
    assert PlannerConfig(population=6, elite_fraction=0.01).n_elite == 1


def test_failed_candidates_score_minus_infinity():
    sequences = np.array([[[0.0], [0.0]], [[1.0], [0.0]], [[0.0], [0.2]]])
    returns = evaluate_sequences(NanAbove(), np.array([0.5, 0.0]), sequences,
                                 lambda s, a: -np.asarray(s)[..., 0] ** 2, 0.1, IntegratorConfig())
    assert returns[1] == -np.inf
    np.testing.assert_allclose(returns[[0, 2]], [-0.5, -0.5])


def test_cem_pushes_toward_the_target(point_mass):
    cfg = PlannerConfig(horizon=10, population=64, iterations=5)
    actions, predicted = cem_plan(point_mass, np.zeros(2), reach_one, cfg, [-1.0], [1.0], 0.1)
    assert actions.shape == (10, 1)
    assert actions[0, 0] > 0.0
    assert np.all(np.abs(actions) <= 1.0)
    # doing nothing scores -1 per step
    assert predicted > -10.0


def test_reset_reproduces_the_plan(point_mass):
    planner = CemPlanner(PlannerConfig(horizon=5, population=16, iterations=2, seed=4), [-1.0], [1.0], 0.1)
    first = planner.plan(point_mass, np.zeros(2), reach_one)
    warm = planner.plan(point_mass, np.zeros(2), reach_one)
    planner.reset()
    again = planner.plan(point_mass, np.zeros(2), reach_one)
    np.testing.assert_array_equal(first.actions, again.actions)
    assert len(warm.elite_returns) == 2


def test_smoothing_keeps_the_plan_in_bounds(point_mass):
    cfg = PlannerConfig(horizon=6, population=16, iterations=3, smoothing=0.5)
    actions, _ = cem_plan(point_mass, np.zeros(2), reach_one, cfg, [-1.0], [1.0], 0.1)
    assert np.all(np.abs(actions) <= 1.0)


def test_zero_shot_report(pendulum, tiny_model):
    cfg = PlannerConfig(horizon=2, population=6, iterations=1)
    report = zero_shot_eval(tiny_model, pendulum, cfg=cfg, n_episodes=2, episode_length=3)
    assert report['env'] == 'pendulum'
    assert report['oracle_calls_during_planning'] == 0
    assert len(report['episodes']) == 2
    assert all(e['length'] == 3 and len(e['rewards']) == 3 for e in report['episodes'])
    assert report['mean_return'] == pytest.approx(np.mean([e['return'] for e in report['episodes']]))
    assert 'oracle_planner_return' in report and len(report['oracle_episodes']) == 2
    assert len(report['planner_cfg_hash']) == 16


def test_zero_shot_without_reference(pendulum, tiny_spec):
    model = MoSimDynamics(tiny_spec)
    report = zero_shot_eval(model, pendulum, cfg=PlannerConfig(horizon=2, population=6, iterations=1),
                            n_episodes=1, episode_length=2, oracle_reference=False)
    assert 'oracle_planner_return' not in report


def test_policy_trajectory_is_tagged_and_bounded(pendulum):
    cfg = PlannerConfig(horizon=3, population=8, iterations=1)
    segment = policy_trajectory(pendulum, cfg, 0, 5, seed=1, explore=0.5)
    assert segment.tag == 'policy'
    assert segment.states.shape == (6, 2) and segment.actions.shape == (5, 1)
    assert np.all(segment.actions >= pendulum.action_low) and np.all(segment.actions <= pendulum.action_high)
    again = policy_trajectory(pendulum, cfg, 0, 5, seed=1, explore=0.5)
    np.testing.assert_array_equal(segment.states, again.states)


def test_one_step_plan_finds_the_quadratic_optimum(point_mass):
    cfg = PlannerConfig(horizon=1, population=64, iterations=5, seed=2)
    actions, _ = cem_plan(point_mass, np.zeros(2), lambda s, a: -(np.asarray(a)[..., 0] - 0.3) ** 2,
                          cfg, [-1.0], [1.0], 0.1)
    assert actions[0, 0] == pytest.approx(0.3, abs=0.05)


def test_zero_shot_results_do_not_depend_on_thread_count(pendulum, tiny_model):
    cfg = PlannerConfig(horizon=2, population=6, iterations=1)
    one = zero_shot_eval(tiny_model, pendulum, cfg=cfg, n_episodes=3, episode_length=2, threads=1)
    three = zero_shot_eval(tiny_model, pendulum, cfg=cfg, n_episodes=3, episode_length=2, threads=3,
                           model_ckpt='model.msnn')
    assert one['episodes'] == three['episodes']
    assert one['oracle_episodes'] == three['oracle_episodes']
    assert three['oracle_calls_during_planning'] == 0
    assert (one['model_ckpt'], three['model_ckpt']) == (None, 'model.msnn')
