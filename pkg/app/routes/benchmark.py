# ===== app/routes/benchmark.py =====
import sys

import click
from flask import Blueprint, current_app

from app.errors import ConfigError, MoSimError
from app.services.bench import ACROBOT_LCE_REFERENCE, benchmark, estimate_lce, validate_report
from app.services.checkpoint import read_checkpoint
from app.services.datasets import read_dataset
from app.services.dynamics import MoSimDynamics
from app.services.envs import make_env
from app.services.registry import error_document, fail_run, finish_run, record_benchmark, start_run
from app.utils.helpers import dump_report, parse_horizons
from app.utils.run_config import load_run_config

benchmark_bp = Blueprint('benchmark', __name__, cli_group=None)


def select_model(ckpt, oracle, env):
    """Checkpointed model or the environment itself; exactly one source is allowed."""
    if bool(ckpt) == bool(oracle):
        raise ConfigError('Give exactly one of --ckpt or --oracle')
    if oracle:
        return env, 'oracle'
    model = MoSimDynamics.from_tensors(read_checkpoint(ckpt))
    if model.d_state != env.d_state or model.d_a != env.d_a:
        raise ConfigError(f'checkpoint {ckpt} does not fit environment {env.name} '
                          f'(state {model.d_state}/{env.d_state}, action {model.d_a}/{env.d_a})')
    return model, ckpt


@benchmark_bp.cli.command('benchmark')
@click.option('--ckpt', type=click.Path(), help='MSNN checkpoint of the model under test.')
@click.option('--oracle', is_flag=True, default=False, help='Benchmark the ground-truth environment instead.')
@click.option('--dataset', required=True, type=click.Path(), help='Test MOSIMTRJ file.')
@click.option('--horizons', default='3,16,100', show_default=True, help='Comma-separated horizons.')
@click.option('--n-eval', type=int, default=64, show_default=True, help='Fragments per horizon.')
@click.option('--warm-in', type=int, default=100, show_default=True, help='Steps skipped at each segment start.')
@click.option('--seed', type=int, help='Run seed.')
@click.option('--config', 'config_path', type=click.Path(), help='Run config JSON (integrator section).')
@click.option('--threads', type=int, help='Worker threads.')
@click.option('--out', 'out_path', type=click.Path(), help='Report path; stdout when omitted.')
def benchmark_cmd(ckpt, oracle, dataset, horizons, n_eval, warm_in, seed, config_path, threads, out_path):
    """Rollout MSE of a model over fragments of a test dataset."""
    run = None
    try:
        cfg = load_run_config(config_path, {'seed': seed})
        horizon_list = parse_horizons(horizons)
        if n_eval < 1:
            raise ConfigError('--n-eval must be at least 1')
        test_set = read_dataset(dataset)
        env = make_env(test_set.env)
        model, model_name = select_model(ckpt, oracle, env)

        run = start_run('benchmark', cfg.hash, seed=cfg.seed, output_path=out_path)
        results = benchmark(model, test_set, horizon_list, n_eval, cfg=cfg.integrator, seed=cfg.seed,
                            warm_in=warm_in, threads=threads or current_app.config['MOSIM_THREADS'],
                            model_name=model_name)

        docs = []
        for result in results:
            doc = result.to_dict()
            doc['config_hash'] = cfg.hash
            validate_report(doc)
            record_benchmark(run, doc)
            docs.append(doc)
        text = dump_report(docs, out_path)
        finish_run(run, {'env': test_set.env, 'model': model_name, 'horizons': horizon_list,
                         'mse': [d['mse'] for d in docs]})
        current_app.logger.info('benchmark %s on %s: %d horizons', model_name, test_set.env, len(docs))
        click.echo(text)

    except MoSimError as e:
        fail_run(run, str(e))
        current_app.logger.error('benchmark failed: %s', e)
        click.echo(error_document(e))
        sys.exit(e.exit_code)


@benchmark_bp.cli.command('lce')
@click.option('--ckpt', type=click.Path(), help='MSNN checkpoint of the model under test.')
@click.option('--oracle', is_flag=True, default=False, help='Use the ground-truth environment.')
@click.option('--env', 'env_name', required=True, help='Environment whose initial-state distribution is sampled.')
@click.option('--delta', type=float, default=1e-5, show_default=True, help='Separation of the trajectory pair.')
@click.option('--steps', type=int, default=1000, show_default=True, help='Control steps per trajectory.')
@click.option('--n-traj', type=int, default=100, show_default=True, help='Number of trajectory pairs.')
@click.option('--seed', type=int, help='Run seed.')
@click.option('--config', 'config_path', type=click.Path(), help='Run config JSON.')
@click.option('--threads', type=int, help='Worker threads.')
@click.option('--out', 'out_path', type=click.Path(), help='Report path; stdout when omitted.')
def lce_cmd(ckpt, oracle, env_name, delta, steps, n_traj, seed, config_path, threads, out_path):
    """Largest Lyapunov exponent of a model's unforced dynamics."""
    run = None
    try:
        cfg = load_run_config(config_path, {'seed': seed})
        env = make_env(env_name)
        model, model_name = select_model(ckpt, oracle, env)

        run = start_run('lce', cfg.hash, seed=cfg.seed, output_path=out_path)
        result = estimate_lce(model, env.sample_initial_state, delta=delta, t_steps=steps, n_traj=n_traj,
                              dt=env.dt, seed=cfg.seed, threads=threads or current_app.config['MOSIM_THREADS'])
        doc = result.to_dict()
        doc.update(env=env.name, model=model_name, delta=delta, steps=steps, config_hash=cfg.hash)
        if env.name == 'acrobot' and ACROBOT_LCE_REFERENCE is not None:
            doc['reference'] = ACROBOT_LCE_REFERENCE
            doc['relative_error'] = abs(result.value / ACROBOT_LCE_REFERENCE - 1.0)
        text = dump_report(doc, out_path)
        finish_run(run, doc)
        click.echo(text)

    except MoSimError as e:
        fail_run(run, str(e))
        current_app.logger.error('lce failed: %s', e)
        click.echo(error_document(e))
        sys.exit(e.exit_code)
