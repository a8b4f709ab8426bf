import numpy as np
import pytest

from app.errors import ConfigError, DataFormatError, NumericalError
from app.services.bench import benchmark, estimate_lce, rollout_mse, validate_report
from app.services.dynamics import MoSimDynamics, matched_plain_spec
from app.services.odeint import IntegratorConfig


class Exploding:
    """Blows up well inside one control step, so every rollout fails."""

    d_a = 1

    def derivative(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        return 1e3 * (1.0 + s ** 2)


def test_oracle_benchmark_is_near_zero(pendulum, pendulum_dataset):
    results = benchmark(pendulum, pendulum_dataset, horizons=(3, 16), n_eval=8, warm_in=5,
                        cfg=IntegratorConfig(rtol=1e-9, atol=1e-9), model_name='oracle')
    assert [r.horizon for r in results] == [3, 16]
    for result in results:
        assert result.mse < 1e-10
        assert result.n_segments == 8 and result.n_failed == 0
        assert len(result.per_step_mse) == result.horizon
        validate_report(result.to_dict())


def test_zero_model_error_grows_with_horizon(tiny_spec, pendulum_dataset):
    # zero-initialized corrector on a predictor-free model: q'' = 0
    model = MoSimDynamics(matched_plain_spec(tiny_spec), active_correctors=1)
    short = rollout_mse(model, pendulum_dataset, 2, 16, warm_in=5)
    long = rollout_mse(model, pendulum_dataset, 20, 16, warm_in=5)
    assert long.mse > short.mse > 0.0


def test_results_do_not_depend_on_thread_count(tiny_model, pendulum_dataset):
    one = rollout_mse(tiny_model, pendulum_dataset, 4, 12, warm_in=5, threads=1)
    four = rollout_mse(tiny_model, pendulum_dataset, 4, 12, warm_in=5, threads=4)
    assert one.mse == four.mse
    assert one.per_step_mse == four.per_step_mse


def test_all_failures_raise_numerical_error(pendulum_dataset):
    with pytest.raises(NumericalError):
        rollout_mse(Exploding(), pendulum_dataset, 3, 4, warm_in=5,
                    cfg=IntegratorConfig(max_steps=50))


def test_validate_report_rejects_bad_documents():
    good = {'env': 'pendulum', 'model': 'oracle', 'horizon': 3, 'mse': 0.1, 'mse_normalized': 0.2,
            'n_segments': 4, 'n_failed': 0}
    assert validate_report(good)
    for key, value in (('horizon', 0), ('mse', float('nan')), ('n_segments', -1), ('env', 3)):
        with pytest.raises(DataFormatError):
            validate_report({**good, key: value})
    with pytest.raises(DataFormatError):
        validate_report({k: v for k, v in good.items() if k != 'mse'})


def test_lce_of_linear_decay(decay):
    def sampler(rng, n):
        return rng.normal(size=(n, 2))

    result = estimate_lce(decay, sampler, t_steps=200, n_traj=10, dt=0.05)
    assert result.value == pytest.approx(-1.0, abs=1e-3)
    assert result.n_used == 10 and result.n_dropped == 0
    assert result.stderr < 1e-3


def test_lce_of_damped_pendulum_is_negative(pendulum):
    def near_bottom(rng, n):
        return rng.uniform(-0.2, 0.2, size=(n, 2))

    result = estimate_lce(pendulum, near_bottom, t_steps=2000, n_traj=8, dt=pendulum.dt, seed=1)
    # small oscillations decay at damping / (2·I)
    assert result.value == pytest.approx(-0.05, abs=0.02)


def test_lce_rejects_bad_settings(decay):
    with pytest.raises(ConfigError):
        estimate_lce(decay, lambda rng, n: np.zeros((n, 2)), delta=0.0)
    with pytest.raises(ConfigError):
        estimate_lce(decay, lambda rng, n: np.zeros((n, 2)), t_steps=0)


def test_lce_does_not_depend_on_thread_count(pendulum):
    one = estimate_lce(pendulum, pendulum.sample_initial_state, t_steps=30, n_traj=7, dt=pendulum.dt, seed=2)
    three = estimate_lce(pendulum, pendulum.sample_initial_state, t_steps=30, n_traj=7, dt=pendulum.dt,
                         seed=2, threads=3)
    assert one.value == three.value and one.n_used == three.n_used
