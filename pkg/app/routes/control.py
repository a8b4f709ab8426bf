# ===== app/routes/control.py =====
import sys

import click
import numpy as np
from flask import Blueprint, current_app

from app.errors import ConfigError, MoSimError
from app.routes.benchmark import select_model
from app.services.checkpoint import read_checkpoint, text_tensor, write_checkpoint
from app.services.datasets import read_dataset
from app.services.envs import make_env
from app.services.flow import CouplingFlow, PenalizedReward, PenaltyConfig, default_penalty_config, fit_flow
from app.services.planner import zero_shot_eval
from app.services.registry import error_document, fail_run, finish_run, record_score, start_run
from app.utils.helpers import dump_report
from app.utils.run_config import load_run_config

control_bp = Blueprint('control', __name__, cli_group=None)


def _load_penalty(path, cfg):
    """Flow and penalty settings from a fit-flow checkpoint; the config's penalty section wins."""
    tensors = read_checkpoint(path)
    flow = CouplingFlow.from_tensors(tensors)
    if cfg.penalty is not None:
        return flow, cfg.penalty
    if 'flow.penalty' not in tensors:
        raise ConfigError(f'{path} carries no flow.penalty tensor and the config has no penalty section')
    tau, alpha = np.asarray(tensors['flow.penalty'], dtype=np.float64)
    return flow, PenaltyConfig(tau=float(tau), alpha=float(alpha))


@control_bp.cli.command('plan')
@click.option('--ckpt', type=click.Path(), help='MSNN checkpoint of the planning model.')
@click.option('--oracle', is_flag=True, default=False, help='Plan inside the ground-truth environment.')
@click.option('--env', 'env_name', required=True, help='Environment the plans are executed in.')
@click.option('--episodes', type=int, default=5, show_default=True, help='Evaluation episodes.')
@click.option('--episode-length', type=int, default=100, show_default=True, help='Control steps per episode.')
@click.option('--flow', 'flow_path', type=click.Path(), help='fit-flow output; adds the density penalty.')
@click.option('--horizon', type=int, help='Planning horizon in control steps.')
@click.option('--population', type=int, help='CEM samples per iteration.')
@click.option('--iterations', type=int, help='CEM iterations per control step.')
@click.option('--no-reference', is_flag=True, default=False, help='Skip the oracle-planner reference episodes.')
@click.option('--seed', type=int, help='Run seed.')
@click.option('--config', 'config_path', type=click.Path(), help='Run config JSON.')
@click.option('--threads', type=int, help='Worker threads.')
@click.option('--out', 'out_path', type=click.Path(), help='Report path; stdout when omitted.')
def plan(ckpt, oracle, env_name, episodes, episode_length, flow_path, horizon, population, iterations,
         no_reference, seed, config_path, threads, out_path):
    """Zero-shot MPC: plan in the model, act in the environment."""
    run = None
    try:
        cfg = load_run_config(config_path, {
            'planner.horizon': horizon,
            'planner.population': population,
            'planner.iterations': iterations,
            'seed': seed,
        })
        if episodes < 0 or episode_length < 0:
            raise ConfigError('--episodes and --episode-length must be non-negative')
        env = make_env(env_name)
        model, model_name = select_model(ckpt, oracle, env)
        plan_reward = None
        if flow_path:
            flow, pcfg = _load_penalty(flow_path, cfg)
            if flow.dim != env.d_state:
                raise ConfigError(f'flow in {flow_path} models {flow.dim} dimensions, {env.name} has {env.d_state}')
            plan_reward = PenalizedReward(env.reward, flow, pcfg)

        run = start_run('plan', cfg.hash, seed=cfg.seed, output_path=out_path)
        report = zero_shot_eval(model, env, env.reward, cfg.planner, n_episodes=episodes,
                                episode_length=episode_length, seed=cfg.seed, plan_reward=plan_reward,
                                oracle_reference=not no_reference, model_ckpt=ckpt,
                                threads=threads or current_app.config['MOSIM_THREADS'])
        report.update(model=model_name, penalized=bool(flow_path), config_hash=cfg.hash)
        record_score(run, report, model_ckpt=ckpt)
        text = dump_report(report, out_path)
        finish_run(run, {'env': env.name, 'mean_return': report['mean_return'],
                         'oracle_planner_return': report.get('oracle_planner_return')})
        click.echo(text)

    except MoSimError as e:
        fail_run(run, str(e))
        current_app.logger.error('plan failed: %s', e)
        click.echo(error_document(e))
        sys.exit(e.exit_code)


@control_bp.cli.command('fit-flow')
@click.option('--dataset', required=True, type=click.Path(), help='MOSIMTRJ file whose states are modelled.')
@click.option('--steps', type=int, help='Optimizer steps.')
@click.option('--layers', type=int, help='Coupling layers.')
@click.option('--hidden', type=int, help='Hidden width of the coupling networks.')
@click.option('--seed', type=int, help='Run seed.')
@click.option('--config', 'config_path', type=click.Path(), help='Run config JSON.')
@click.option('--out', 'out_path', required=True, type=click.Path(), help='Output MSNN file.')
def fit_flow_cmd(dataset, steps, layers, hidden, seed, config_path, out_path):
    """Fit a state-density flow for the planning penalty."""
    run = None
    try:
        cfg = load_run_config(config_path, {
            'flow.steps': steps,
            'flow.n_layers': layers,
            'flow.hidden': hidden,
            'seed': seed,
        })
        states = read_dataset(dataset).states()
        run = start_run('fit-flow', cfg.hash, seed=cfg.seed, output_path=out_path)
        flow = fit_flow(states, cfg.flow)
        pcfg = cfg.penalty or default_penalty_config(flow, states)

        tensors = flow.to_tensors()
        tensors['flow.penalty'] = np.array([pcfg.tau, pcfg.alpha])
        tensors['meta.config_hash'] = text_tensor(cfg.hash)
        write_checkpoint(out_path, tensors)

        summary = {
            'states': int(len(states)),
            'layers': len(flow.layers),
            'mean_log_density': float(np.mean(flow.log_density(states))),
            'penalty': pcfg.to_dict(),
            'out': out_path,
            'config_hash': cfg.hash,
        }
        finish_run(run, summary)
        click.echo(dump_report(summary))

    except MoSimError as e:
        fail_run(run, str(e))
        current_app.logger.error('fit-flow failed: %s', e)
        click.echo(error_document(e))
        sys.exit(e.exit_code)
