import numpy as np
import pytest

from app import create_app
from app.services.datasets import dataset_for_env
from app.services.dynamics import ModelSpec, MoSimDynamics
from app.services.envs import ActionSamplerSpec, generate_random_dataset, make_env
from config import TestConfig


@pytest.fixture
def app():
    app = create_app(TestConfig)
    yield app


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def pendulum():
    return make_env('pendulum')


@pytest.fixture
def tiny_spec():
    return ModelSpec.preset(1, 1, 1, 'tiny')


@pytest.fixture
def tiny_model(tiny_spec):
    model = MoSimDynamics(tiny_spec, seed=3, active_correctors=1)
    # zero-initialized correctors would hide their gradients
    rng = np.random.default_rng(11)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) if k.startswith('corr0.out') else v
              for k, v in model.params.items()}
    model.set_params(params)
    return model


@pytest.fixture
def pendulum_dataset(pendulum):
    sampler = ActionSamplerSpec(mode='uniform_per_step')
    segments = generate_random_dataset(pendulum, n_traj=4, n_steps=40, sampler=sampler, seed=5)
    return dataset_for_env(pendulum, segments, config_hash='0123456789abcdef')


class PointMass:
    """Double integrator q'' = a, usable wherever a dynamics model is expected."""

    d_a = 1
    d_state = 2

    def derivative(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), s.shape[:-1] + (1,))
        return np.concatenate([s[..., 1:2], a], axis=-1)


class Decay:
    """dz/dt = -rate·z."""

    d_a = 1

    def __init__(self, rate=1.0, dim=2):
        self.rate = rate
        self.d_state = dim

    def derivative(self, s, a):
        return -self.rate * np.asarray(s, dtype=np.float64)


@pytest.fixture
def point_mass():
    return PointMass()


@pytest.fixture
def decay():
    return Decay()
