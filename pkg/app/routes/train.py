# ===== app/routes/train.py =====
import sys

import click
from flask import Blueprint, current_app

from app.errors import ConfigError, MoSimError
from app.services.checkpoint import read_checkpoint, write_checkpoint
from app.services.datasets import read_dataset, split_dataset
from app.services.dynamics import MoSimDynamics
from app.services.envs import make_env
from app.services.planner import CemPlanner
from app.services.registry import error_document, fail_run, finish_run, start_run
from app.services.training import Trainer, few_shot_loop
from app.utils.helpers import dump_report, validate_required_fields
from app.utils.run_config import load_run_config

train_bp = Blueprint('train', __name__, cli_group=None)


def _training_data(cfg):
    validate_required_fields({'dataset': cfg.data.dataset}, ['dataset'], where='section data')
    dataset = read_dataset(cfg.data.dataset)
    if cfg.data.val_dataset:
        return dataset, read_dataset(cfg.data.val_dataset)
    if cfg.data.val_fraction > 0 and len(dataset) > 1:
        return split_dataset(dataset, cfg.data.val_fraction, seed=cfg.seed)
    return dataset, None


@train_bp.cli.command('train')
@click.option('--config', 'config_path', type=click.Path(), help='Run config JSON.')
@click.option('--dataset', type=click.Path(), help='Training MOSIMTRJ file.')
@click.option('--val-dataset', type=click.Path(), help='Validation MOSIMTRJ file.')
@click.option('--mode', type=click.Choice(['multistage', 'end-to-end']),
              help='Schedule; defaults to multistage for structured models.')
@click.option('--grad-path', type=click.Choice(['backprop_steps', 'adjoint']), help='Gradient computation.')
@click.option('--noise', type=float, help='Observation noise sigma added to the training states.')
@click.option('--seed', type=int, help='Run seed.')
@click.option('--resume', type=click.Path(), help='Checkpoint to resume from.')
@click.option('--log', 'log_path', type=click.Path(), help='JSON-lines training log.')
@click.option('--threads', type=int, help='Worker threads.')
@click.option('--out', 'out_path', required=True, type=click.Path(), help='Output MSNN checkpoint.')
def train(config_path, dataset, val_dataset, mode, grad_path, noise, seed, resume, log_path, threads, out_path):
    """Train a MoSim dynamics model on a trajectory dataset."""
    run = None
    try:
        cfg = load_run_config(config_path, {
            'data.dataset': dataset,
            'data.val_dataset': val_dataset,
            'train.grad_path': grad_path,
            'train.noise_sigma': noise,
            'seed': seed,
        })
        train_set, val_set = _training_data(cfg)
        spec = cfg.model_spec(train_set.d_q, train_set.d_v, train_set.d_a)
        mode = mode or ('multistage' if spec.use_predictor else 'end-to-end')
        if mode == 'multistage' and not spec.use_predictor:
            raise ConfigError('multistage training needs a model with the predictor enabled')

        run = start_run('train', cfg.hash, seed=cfg.seed, output_path=out_path)
        model = MoSimDynamics(spec, seed=cfg.train.seed)
        trainer = Trainer(cfg.train, train_set, model, val_dataset=val_set, integrator=cfg.integrator,
                          log_path=log_path, checkpoint_path=out_path, config_hash=cfg.hash,
                          threads=threads or current_app.config['MOSIM_THREADS'])
        if resume:
            trainer.resume(resume)
        schedule = trainer.multistage_schedule() if mode == 'multistage' else trainer.end_to_end_schedule()
        current_app.logger.info('train %s: %s schedule with %d stages, %d steps', train_set.env, mode,
                                len(schedule), cfg.train.total_steps)
        _, log = trainer.run(schedule)

        losses = log.losses
        summary = {
            'env': train_set.env,
            'mode': mode,
            'steps': trainer.step,
            'stages': len(schedule),
            'final_loss': losses[-1] if losses else None,
            'checkpoint': out_path,
            'log': log_path,
            'config_hash': cfg.hash,
        }
        finish_run(run, summary)
        click.echo(dump_report(summary))

    except MoSimError as e:
        fail_run(run, str(e))
        current_app.logger.error('train failed: %s', e)
        click.echo(error_document(e))
        sys.exit(e.exit_code)


@train_bp.cli.command('few-shot')
@click.option('--config', 'config_path', type=click.Path(), help='Run config JSON.')
@click.option('--env', 'env_name', help='Oracle environment for data collection.')
@click.option('--dataset', type=click.Path(), help='Initial replay buffer (MOSIMTRJ).')
@click.option('--ckpt', type=click.Path(), help='Starting model; a fresh model when omitted.')
@click.option('--total-steps', type=int, help='Virtual interaction steps.')
@click.option('--no-collect', is_flag=True, default=False, help='Never query the oracle (zero-shot baseline).')
@click.option('--seed', type=int, help='Run seed.')
@click.option('--report', 'report_path', type=click.Path(), help='Write the loop log JSON here.')
@click.option('--out', 'out_path', required=True, type=click.Path(), help='Output MSNN checkpoint.')
def few_shot(config_path, env_name, dataset, ckpt, total_steps, no_collect, seed, report_path, out_path):
    """Fine-tune a model inside a planner loop with periodic oracle data collection."""
    run = None
    try:
        overrides = {
            'data.env': env_name,
            'data.dataset': dataset,
            'few_shot.total_virtual_steps': total_steps,
            'seed': seed,
        }
        if no_collect:
            overrides['few_shot.collect'] = False
        cfg = load_run_config(config_path, overrides)
        validate_required_fields({'dataset': cfg.data.dataset}, ['dataset'], where='section data')
        env = make_env(cfg.data.env)
        replay = read_dataset(cfg.data.dataset)
        if replay.env != env.name:
            raise ConfigError(f'dataset was recorded on {replay.env}, not {env.name}')

        if ckpt:
            model = MoSimDynamics.from_tensors(read_checkpoint(ckpt))
        else:
            model = MoSimDynamics(cfg.model_spec(env.d_q, env.d_v, env.d_a), seed=cfg.train.seed)
            model.active_correctors = model.spec.n_correctors
        if model.d_state != env.d_state or model.d_a != env.d_a:
            raise ConfigError(f'model dimensions do not match environment {env.name}')

        run = start_run('few-shot', cfg.hash, seed=cfg.seed, output_path=out_path)
        planner = CemPlanner.for_env(cfg.planner, env)
        model, log = few_shot_loop(cfg.few_shot, env, planner, model, replay, cfg.train,
                                   integrator=cfg.integrator)
        write_checkpoint(out_path, model.to_tensors(cfg.hash))

        log['config_hash'] = cfg.hash
        log['env'] = env.name
        text = dump_report(log, report_path)
        finish_run(run, {k: log[k] for k in ('virtual_steps', 'oracle_steps', 'updates', 'replay_segments')})
        click.echo(text)

    except MoSimError as e:
        fail_run(run, str(e))
        current_app.logger.error('few-shot failed: %s', e)
        click.echo(error_document(e))
        sys.exit(e.exit_code)
