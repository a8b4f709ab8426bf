# ===== app/routes/data.py =====
import sys

import click
from flask import Blueprint, current_app

from app.errors import MoSimError
from app.services.datasets import dataset_for_env, write_dataset
from app.services.envs import ActionSamplerSpec, generate_random_dataset, make_env
from app.services.planner import generate_policy_dataset
from app.services.registry import error_document, fail_run, finish_run, start_run
from app.utils.helpers import dump_report
from app.utils.run_config import load_run_config

data_bp = Blueprint('data', __name__, cli_group=None)

SAMPLER_MODES = {'uniform': 'uniform_per_step', 'poisson': 'poisson_hold'}


@data_bp.cli.command('gen-data')
@click.option('--env', 'env_name', help='Environment name (pendulum, cartpole, reacher2, acrobot, wallpendulum).')
@click.option('--mode', type=click.Choice(['random', 'policy']), help='Random actions (tag 0) or planner-driven (tag 1).')
@click.option('--sampler', type=click.Choice(['uniform', 'poisson']), help='Random action process.')
@click.option('--rate', type=float, help='Switching rate of the poisson sampler, per second.')
@click.option('--n-traj', type=int, help='Number of trajectories.')
@click.option('--duration', type=float, help='Seconds per trajectory.')
@click.option('--seed', type=int, help='Run seed.')
@click.option('--explore', type=float, default=0.1, show_default=True, help='Exploration noise of policy mode.')
@click.option('--config', 'config_path', type=click.Path(), help='Run config JSON.')
@click.option('--threads', type=int, help='Worker threads.')
@click.option('--out', 'out_path', required=True, type=click.Path(), help='Output MOSIMTRJ file.')
def gen_data(env_name, mode, sampler, rate, n_traj, duration, seed, explore, config_path, threads, out_path):
    """Generate a trajectory dataset from an oracle environment."""
    run = None
    try:
        cfg = load_run_config(config_path, {
            'data.env': env_name,
            'data.mode': mode,
            'data.sampler': sampler,
            'data.rate': rate,
            'data.n_traj': n_traj,
            'data.duration': duration,
            'seed': seed,
        })
        data = cfg.data
        threads = threads or current_app.config['MOSIM_THREADS']
        env = make_env(data.env)
        run = start_run('gen-data', cfg.hash, seed=cfg.seed, output_path=out_path)
        current_app.logger.info('gen-data %s: %d %s trajectories of %.2f s', env.name, data.n_traj,
                                data.mode, data.duration)

        n_steps = int(round(data.duration / env.dt))
        if data.mode == 'random':
            spec = ActionSamplerSpec(mode=SAMPLER_MODES[data.sampler], rate=data.rate, seed=cfg.seed)
            segments = generate_random_dataset(env, data.n_traj, n_steps, spec, seed=cfg.seed, threads=threads)
        else:
            segments = generate_policy_dataset(env, data.n_traj, n_steps, cfg.planner, seed=cfg.seed,
                                               explore=explore, threads=threads)

        dataset = dataset_for_env(env, segments, config_hash=cfg.hash)
        write_dataset(out_path, dataset)

        summary = dataset.summary()
        summary['env_constants_hash'] = env.constants_hash()
        summary['out'] = out_path
        finish_run(run, summary)
        click.echo(dump_report(summary))

    except MoSimError as e:
        fail_run(run, str(e))
        current_app.logger.error('gen-data failed: %s', e)
        click.echo(error_document(e))
        sys.exit(e.exit_code)
