# ===== app/services/registry.py =====
"""Run registry bookkeeping shared by the command handlers."""
import json

from app import db
from app.models.run import Run
from app.models.report import BenchmarkReport, ScoreReport


def start_run(command, config_hash, seed=0, output_path=None):
    run = Run(command=command, config_hash=config_hash, seed=seed, output_path=output_path)
    db.session.add(run)
    db.session.commit()
    return run


def finish_run(run, summary=None, output_path=None):
    run.complete(summary=summary, output_path=output_path)
    db.session.commit()
    return run


def fail_run(run, message):
    """Mark ``run`` failed; a run that never got created is simply skipped."""
    db.session.rollback()
    if run is None:
        return None
    run.fail(message)
    db.session.commit()
    return run


def record_benchmark(run, doc):
    report = BenchmarkReport(
        run_id=run.id,
        env=doc['env'],
        model=doc['model'],
        horizon=doc['horizon'],
        mse=doc['mse'],
        mse_normalized=doc['mse_normalized'],
        n_segments=doc['n_segments'],
        n_failed=doc['n_failed'],
        per_step_mse=doc.get('per_step_mse', []),
        config_hash=doc.get('config_hash'),
    )
    db.session.add(report)
    return report


def record_score(run, doc, model_ckpt=None):
    report = ScoreReport(
        run_id=run.id,
        env=doc['env'],
        planner_cfg_hash=doc['planner_cfg_hash'],
        mean_return=doc['mean_return'],
        oracle_planner_return=doc.get('oracle_planner_return'),
        episodes=doc.get('episodes', []),
        model_ckpt=model_ckpt,
        config_hash=doc.get('config_hash'),
    )
    db.session.add(report)
    return report


def error_document(exc):
    return json.dumps({'error': str(exc)})
