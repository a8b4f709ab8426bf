import numpy as np
import pytest

from app.errors import ConfigError
from app.services.envs import (ENVIRONMENTS, SUBSTEPS, ActionSamplerSpec, ZeroOrderHold, generate_random_dataset,
                               generate_trajectory, make_env, random_trajectory, sample_actions)
from app.services.odeint import rk4_integrate


def test_registry_names():
    assert set(ENVIRONMENTS) == {'pendulum', 'cartpole', 'reacher2', 'acrobot', 'wallpendulum'}
    with pytest.raises(ConfigError):
        make_env('hopper')
    with pytest.raises(ConfigError):
        make_env('pendulum', mass_of_sun=1.0)


def test_pendulum_rests_at_the_bottom(pendulum):
    np.testing.assert_array_equal(pendulum.derivative(np.zeros(2), np.zeros(1)), np.zeros(2))


def test_pendulum_upright_is_an_equilibrium(pendulum):
    np.testing.assert_allclose(pendulum.derivative(np.array([np.pi, 0.0]), np.zeros(1)), 0.0, atol=1e-12)


def test_pendulum_torque_balances_gravity(pendulum):
    theta = 0.4
    torque = pendulum.mass * pendulum.gravity * pendulum.length * np.sin(theta)
    dz = pendulum.derivative(np.array([theta, 0.0]), np.array([torque]))
    np.testing.assert_allclose(dz, 0.0, atol=1e-12)


def test_batch_derivative_matches_single(pendulum):
    rng = np.random.default_rng(0)
    s = pendulum.sample_initial_state(rng, 5)
    a = rng.uniform(-2, 2, size=(5, 1))
    batch = pendulum.derivative(s, a)
    for i in range(5):
        np.testing.assert_array_equal(pendulum.derivative(s[i], a[i]), batch[i])


def test_derivative_calls_are_counted(pendulum):
    before = pendulum.derivative_calls
    pendulum.step(np.zeros(2), np.zeros(1), substeps=3)
    assert pendulum.derivative_calls - before == 12


def test_acrobot_conserves_energy_without_torque():
    env = make_env('acrobot')
    s0 = np.array([1.0, -0.5, 0.0, 0.0])
    trajectory = rk4_integrate(env.derivative, s0, lambda _t: np.zeros(1), 1e-3, 10_000)
    energy = env.energy(trajectory)
    drift = np.max(np.abs(energy - energy[0])) / max(abs(energy[0]), 1.0)
    assert drift < 1e-6


def test_cartpole_conserves_energy_without_force():
    env = make_env('cartpole')
    s0 = np.array([0.0, 0.3, 0.0, 0.0])
    trajectory = rk4_integrate(env.derivative, s0, lambda _t: np.zeros(1), 1e-3, 2_000)
    energy = env.energy(trajectory)
    assert np.max(np.abs(energy - energy[0])) < 1e-6


def test_reacher_tip_and_reward():
    env = make_env('reacher2')
    s = np.array([np.pi / 2, 0.0, 0.0, 0.0])     # both links along +x
    np.testing.assert_allclose(env.tip(s), [2.0, 0.0], atol=1e-12)
    assert env.reward(s, np.zeros(2)) == pytest.approx(-np.sqrt(2.0))


def test_wall_pendulum_stays_within_penetration_bound():
    env = make_env('wallpendulum')
    for index in range(4):
        segment = random_trajectory(env, index, 100, ActionSamplerSpec(), seed=3)
        assert np.all(np.isfinite(segment.states))
        assert np.max(env.penetration(segment.states)) < env.max_penetration
    assert env.external_torque(np.array(0.0), np.array(0.0)) == 0.0
    assert env.external_torque(np.array(0.7), np.array(0.0)) < 0.0


def test_zero_order_hold_indexes_the_action_grid():
    hold = ZeroOrderHold(np.array([[1.0], [2.0], [3.0]]), 0.1)
    assert hold(0.0)[0] == 1.0
    assert hold(0.0999)[0] == 1.0
    assert hold(0.1)[0] == 2.0
    assert hold(5.0)[0] == 3.0


def test_uniform_sampler_shape_and_bounds():
    actions = sample_actions(ActionSamplerSpec(seed=0), 1.0, 0.05, [-2.0], [2.0])
    assert actions.shape == (20, 1)
    assert np.all(actions >= -2.0) and np.all(actions <= 2.0)
    assert len(np.unique(actions)) == 20


def test_poisson_sampler_switch_rate():
    spec = ActionSamplerSpec(mode='poisson_hold', rate=2.0, seed=0)
    actions = sample_actions(spec, 1000.0, 0.01, [-1.0], [1.0])
    switches = int(np.sum(actions[1:, 0] != actions[:-1, 0]))
    expected = 2.0 * 1000.0
    assert abs(switches - expected) < 3.0 * np.sqrt(expected) + 0.02 * expected


def test_sampler_rejects_bad_settings():
    with pytest.raises(ConfigError):
        ActionSamplerSpec(mode='brownian')
    with pytest.raises(ConfigError):
        ActionSamplerSpec(mode='poisson_hold', rate=0.0)
    with pytest.raises(ConfigError):
        sample_actions(ActionSamplerSpec(), 0.01, 0.05)


def test_zero_step_trajectory_holds_only_the_start(pendulum):
    segment = generate_trajectory(pendulum, np.array([0.1, 0.0]), np.zeros((0, 1)), 0)
    assert segment.states.shape == (1, 2) and segment.actions.shape == (0, 1)


def test_trajectory_records_control_boundaries(pendulum):
    actions = np.full((5, 1), 0.5)
    segment = generate_trajectory(pendulum, np.array([0.2, 0.0]), actions)
    assert segment.states.shape == (6, 2)
    s = np.array([0.2, 0.0])
    for k in range(5):
        s = pendulum.step(s, actions[k])
        np.testing.assert_allclose(segment.states[k + 1], s, atol=1e-12)


def test_generation_is_reproducible_and_thread_independent(pendulum):
    sampler = ActionSamplerSpec(mode='poisson_hold', rate=3.0)
    serial = generate_random_dataset(pendulum, 3, 20, sampler, seed=9, threads=1)
    parallel = generate_random_dataset(pendulum, 3, 20, sampler, seed=9, threads=3)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
    assert generate_random_dataset(pendulum, 0, 20, sampler) == []


def test_reacher_step_is_converged_in_the_substep_count():
    reacher = make_env('reacher2')
    rng = np.random.default_rng(0)
    coarse = fine = reacher.sample_initial_state(rng)
    for a in rng.uniform(reacher.action_low, reacher.action_high, size=(20, reacher.d_a)):
        coarse = reacher.step(coarse, a)
        fine = reacher.step(fine, a, substeps=2 * SUBSTEPS)
    np.testing.assert_allclose(coarse, fine, rtol=0, atol=1e-7)


def test_clone_keeps_constants_and_counts_separately():
    env = make_env('pendulum', damping=0.3)
    env.derivative(np.zeros(2))
    twin = env.clone()
    assert twin.constants == env.constants and twin is not env
    assert twin.derivative_calls == 0
    twin.derivative(np.zeros(2))
    assert env.derivative_calls == 1
