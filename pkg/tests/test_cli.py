import json

import numpy as np

from app.models.report import BenchmarkReport, ScoreReport
from app.models.run import Run
from app.services.checkpoint import read_checkpoint
from app.services.datasets import read_dataset
from app.services.dynamics import MoSimDynamics

TINY = {
    'model': {'size': 'tiny'},
    'train': {'segment_length': 2, 'max_segment_length': 2, 'batch_size': 2, 'steps_per_stage': [2, 1],
              'warm_in': 2, 'val_every': 0, 'checkpoint_every': 0, 'val_segments': 2, 'val_horizons': [2]},
    'integrator': {'rtol': 1e-4, 'atol': 1e-4},
    'planner': {'horizon': 2, 'population': 6, 'iterations': 1},
    'flow': {'n_layers': 2, 'hidden': 8, 'n_blocks': 1, 'steps': 5, 'batch_size': 16, 'min_states': 10},
    'few_shot': {'virtual_window': 2, 'real_steps_per_window': 2, 'update_every': 1, 'episode_length': 2},
}


def _config(tmp_path, doc=None, name='run.json'):
    path = tmp_path / name
    path.write_text(json.dumps(doc or TINY), encoding='utf-8')
    return str(path)


def _gen(runner, path, n_traj=3, duration=2.0, seed=1, env='pendulum'):
    return runner.invoke(args=['gen-data', '--env', env, '--n-traj', str(n_traj), '--duration', str(duration),
                               '--seed', str(seed), '--out', str(path)])


def _runs(app):
    with app.app_context():
        return [r.to_dict() for r in Run.query.order_by(Run.id).all()]


def test_gen_data_is_reproducible(app, runner, tmp_path):
    first, second = tmp_path / 'a.mosimtrj', tmp_path / 'b.mosimtrj'
    assert _gen(runner, first).exit_code == 0
    assert _gen(runner, second).exit_code == 0
    assert first.read_bytes() == second.read_bytes()

    dataset = read_dataset(first)
    assert dataset.env == 'pendulum' and len(dataset) == 3
    assert all(seg.n_steps == 40 for seg in dataset.segments)
    assert len(dataset.config_hash) == 16
    runs = _runs(app)
    assert [(r['command'], r['status']) for r in runs] == [('gen-data', 'completed')] * 2
    assert runs[0]['summary']['trajectories'] == 3


def test_gen_data_with_zero_trajectories(runner, tmp_path):
    out = tmp_path / 'empty.mosimtrj'
    assert _gen(runner, out, n_traj=0).exit_code == 0
    assert len(read_dataset(out)) == 0


def test_gen_data_poisson_sampler(runner, tmp_path):
    out = tmp_path / 'poisson.mosimtrj'
    result = runner.invoke(args=['gen-data', '--env', 'cartpole', '--sampler', 'poisson', '--rate', '1.0',
                                 '--n-traj', '2', '--duration', '1.0', '--out', str(out)])
    assert result.exit_code == 0
    dataset = read_dataset(out)
    assert (dataset.env, dataset.d_q, dataset.d_a) == ('cartpole', 2, 1)


def test_unknown_env_exits_with_config_error(app, runner, tmp_path):
    result = _gen(runner, tmp_path / 'x.mosimtrj', env='hopper')
    assert result.exit_code == 2
    assert '"error"' in result.output
    assert _runs(app) == []


def test_oracle_benchmark(app, runner, tmp_path):
    data = tmp_path / 'test.mosimtrj'
    _gen(runner, data)
    config = _config(tmp_path, {'integrator': {'rtol': 1e-9, 'atol': 1e-9}})
    out = tmp_path / 'bench.json'
    result = runner.invoke(args=['benchmark', '--oracle', '--dataset', str(data), '--horizons', '3,8',
                                 '--n-eval', '4', '--warm-in', '5', '--config', config, '--out', str(out)])
    assert result.exit_code == 0
    docs = json.loads(out.read_text(encoding='utf-8'))
    assert [d['horizon'] for d in docs] == [3, 8]
    assert all(d['model'] == 'oracle' and d['mse'] < 1e-8 for d in docs)
    with app.app_context():
        rows = BenchmarkReport.query.order_by(BenchmarkReport.horizon).all()
        assert [r.horizon for r in rows] == [3, 8]
        assert rows[1].to_dict()['config_hash'] == docs[1]['config_hash']
    assert _runs(app)[-1]['status'] == 'completed'


def test_benchmark_model_source_is_exclusive(runner, tmp_path):
    data = tmp_path / 'test.mosimtrj'
    _gen(runner, data)
    neither = runner.invoke(args=['benchmark', '--dataset', str(data)])
    both = runner.invoke(args=['benchmark', '--oracle', '--ckpt', 'model.msnn', '--dataset', str(data)])
    missing = runner.invoke(args=['benchmark', '--ckpt', str(tmp_path / 'none.msnn'), '--dataset', str(data)])
    assert (neither.exit_code, both.exit_code, missing.exit_code) == (2, 2, 2)


def test_corrupt_dataset_exits_with_format_error(runner, tmp_path):
    data = tmp_path / 'broken.mosimtrj'
    data.write_bytes(b'MOSIMTRJ\x01')
    result = runner.invoke(args=['benchmark', '--oracle', '--dataset', str(data)])
    assert result.exit_code == 3


def test_failed_run_is_recorded(app, runner, tmp_path):
    data = tmp_path / 'short.mosimtrj'
    _gen(runner, data, duration=1.0)
    result = runner.invoke(args=['benchmark', '--oracle', '--dataset', str(data), '--horizons', '100'])
    assert result.exit_code == 2
    last = _runs(app)[-1]
    assert last['command'] == 'benchmark' and last['status'] == 'failed'
    assert 'error' in last['summary']


def test_train_writes_a_checkpoint_and_log(app, runner, tmp_path):
    data = tmp_path / 'train.mosimtrj'
    _gen(runner, data)
    out, log = tmp_path / 'model.msnn', tmp_path / 'train.jsonl'
    result = runner.invoke(args=['train', '--config', _config(tmp_path), '--dataset', str(data),
                                 '--log', str(log), '--out', str(out)])
    assert result.exit_code == 0
    model = MoSimDynamics.from_tensors(read_checkpoint(out))
    assert model.active_correctors == 1 and model.d_state == 2
    records = [json.loads(line) for line in log.read_text(encoding='utf-8').splitlines()]
    assert [r.get('event') for r in records] == ['stage_start', None, None, 'stage_start', None]
    summary = _runs(app)[-1]['summary']
    assert summary['mode'] == 'multistage' and summary['steps'] == 3


def test_zero_step_training_saves_the_initial_model(runner, tmp_path):
    data = tmp_path / 'train.mosimtrj'
    _gen(runner, data)
    doc = json.loads(json.dumps(TINY))
    doc['train']['steps_per_stage'] = [0, 0]
    out = tmp_path / 'init.msnn'
    result = runner.invoke(args=['train', '--config', _config(tmp_path, doc), '--dataset', str(data),
                                 '--out', str(out)])
    assert result.exit_code == 0
    trained = MoSimDynamics.from_tensors(read_checkpoint(out))
    fresh = MoSimDynamics(trained.spec, seed=0)
    for key, value in fresh.params.items():
        np.testing.assert_array_equal(trained.params[key], value)


def test_multistage_needs_the_predictor(runner, tmp_path):
    data = tmp_path / 'train.mosimtrj'
    _gen(runner, data)
    doc = json.loads(json.dumps(TINY))
    doc['model']['use_predictor'] = False
    result = runner.invoke(args=['train', '--config', _config(tmp_path, doc), '--dataset', str(data),
                                 '--mode', 'multistage', '--out', str(tmp_path / 'm.msnn')])
    assert result.exit_code == 2


def test_fit_flow_then_plan_with_the_penalty(app, runner, tmp_path):
    data = tmp_path / 'train.mosimtrj'
    _gen(runner, data)
    config = _config(tmp_path)
    ckpt, flow = tmp_path / 'model.msnn', tmp_path / 'flow.msnn'
    assert runner.invoke(args=['train', '--config', config, '--dataset', str(data),
                               '--out', str(ckpt)]).exit_code == 0
    result = runner.invoke(args=['fit-flow', '--dataset', str(data), '--config', config, '--out', str(flow)])
    assert result.exit_code == 0
    tensors = read_checkpoint(flow)
    assert tensors['flow.penalty'].shape == (2,) and tensors['flow.penalty'][1] > 0

    report_path = tmp_path / 'plan.json'
    result = runner.invoke(args=['plan', '--ckpt', str(ckpt), '--env', 'pendulum', '--flow', str(flow),
                                 '--episodes', '2', '--episode-length', '2', '--no-reference', '--threads', '2',
                                 '--config', config, '--out', str(report_path)])
    assert result.exit_code == 0
    report = json.loads(report_path.read_text(encoding='utf-8'))
    assert report['penalized'] is True
    assert report['model_ckpt'] == str(ckpt)
    assert {'env', 'planner_cfg_hash', 'mean_return', 'episodes'} <= set(report)
    assert report['oracle_calls_during_planning'] == 0
    assert [e['length'] for e in report['episodes']] == [2, 2]
    with app.app_context():
        score = ScoreReport.query.one()
        assert score.model_ckpt == str(ckpt) and score.oracle_planner_return is None


def test_plan_rejects_a_flow_of_the_wrong_dimension(runner, tmp_path):
    data = tmp_path / 'cartpole.mosimtrj'
    _gen(runner, data, env='cartpole')
    config = _config(tmp_path)
    flow = tmp_path / 'flow.msnn'
    assert runner.invoke(args=['fit-flow', '--dataset', str(data), '--config', config,
                               '--out', str(flow)]).exit_code == 0
    result = runner.invoke(args=['plan', '--oracle', '--env', 'pendulum', '--flow', str(flow),
                                 '--episodes', '1', '--episode-length', '1', '--config', config])
    assert result.exit_code == 2


def test_oracle_lce(runner, tmp_path):
    out = tmp_path / 'lce.json'
    result = runner.invoke(args=['lce', '--oracle', '--env', 'pendulum', '--steps', '20', '--n-traj', '2',
                                 '--threads', '2', '--out', str(out)])
    assert result.exit_code == 0
    doc = json.loads(out.read_text(encoding='utf-8'))
    assert doc['model'] == 'oracle' and doc['n_used'] + doc['n_dropped'] == 2
    assert np.isfinite(doc['value'])


def test_few_shot_collects_and_reports(app, runner, tmp_path):
    data = tmp_path / 'replay.mosimtrj'
    _gen(runner, data)
    report_path, out = tmp_path / 'few.json', tmp_path / 'few.msnn'
    result = runner.invoke(args=['few-shot', '--config', _config(tmp_path), '--env', 'pendulum',
                                 '--dataset', str(data), '--total-steps', '2', '--report', str(report_path),
                                 '--out', str(out)])
    assert result.exit_code == 0
    log = json.loads(report_path.read_text(encoding='utf-8'))
    assert (log['virtual_steps'], log['updates'], log['oracle_steps']) == (2, 2, 2)
    assert log['replay_segments'] == 4
    assert MoSimDynamics.from_tensors(read_checkpoint(out)).active_correctors == 1


def test_few_shot_without_collection(runner, tmp_path):
    data = tmp_path / 'replay.mosimtrj'
    _gen(runner, data)
    report_path = tmp_path / 'few.json'
    result = runner.invoke(args=['few-shot', '--config', _config(tmp_path), '--env', 'pendulum',
                                 '--dataset', str(data), '--total-steps', '2', '--no-collect',
                                 '--report', str(report_path), '--out', str(tmp_path / 'few.msnn')])
    assert result.exit_code == 0
    assert json.loads(report_path.read_text(encoding='utf-8'))['oracle_steps'] == 0


def test_few_shot_rejects_a_foreign_dataset(runner, tmp_path):
    data = tmp_path / 'replay.mosimtrj'
    _gen(runner, data)
    result = runner.invoke(args=['few-shot', '--config', _config(tmp_path), '--env', 'cartpole',
                                 '--dataset', str(data), '--out', str(tmp_path / 'few.msnn')])
    assert result.exit_code == 2
