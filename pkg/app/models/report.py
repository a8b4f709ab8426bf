# ===== app/models/report.py =====
from app import db
from datetime import datetime
import json

class BenchmarkReport(db.Model):
    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('run.id'), nullable=False)

    env = db.Column(db.String(32), nullable=False)
    model = db.Column(db.String(255), nullable=False)
    horizon = db.Column(db.Integer, nullable=False)
    mse = db.Column(db.Float, nullable=False)
    mse_normalized = db.Column(db.Float, nullable=False)
    n_segments = db.Column(db.Integer, nullable=False)
    n_failed = db.Column(db.Integer, default=0)

    per_step_mse = db.Column(db.Text)  # JSON array, one entry per control step
    config_hash = db.Column(db.String(16))
    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    def __init__(self, run_id, env, model, horizon, mse, mse_normalized, n_segments, **kwargs):
        self.run_id = run_id
        self.env = env
        self.model = model
        self.horizon = horizon
        self.mse = mse
        self.mse_normalized = mse_normalized
        self.n_segments = n_segments
        self.per_step_mse = json.dumps([])

        for key, value in kwargs.items():
            if key == 'per_step_mse':
                value = json.dumps(value)
            setattr(self, key, value)

    def get_per_step_mse(self):
        return json.loads(self.per_step_mse) if self.per_step_mse else []

    def to_dict(self):
        """Flat report document; the keys are the published benchmark schema."""
        return {
            'env': self.env,
            'model': self.model,
            'horizon': self.horizon,
            'mse': self.mse,
            'mse_normalized': self.mse_normalized,
            'n_segments': self.n_segments,
            'n_failed': self.n_failed or 0,
            'per_step_mse': self.get_per_step_mse(),
            'config_hash': self.config_hash
        }


class ScoreReport(db.Model):
    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('run.id'), nullable=False)

    env = db.Column(db.String(32), nullable=False)
    model_ckpt = db.Column(db.String(255))
    planner_cfg_hash = db.Column(db.String(16), nullable=False)
    mean_return = db.Column(db.Float, nullable=False)
    oracle_planner_return = db.Column(db.Float)

    episodes = db.Column(db.Text)  # JSON array of {return, length, rewards}
    config_hash = db.Column(db.String(16))
    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    def __init__(self, run_id, env, planner_cfg_hash, mean_return, **kwargs):
        self.run_id = run_id
        self.env = env
        self.planner_cfg_hash = planner_cfg_hash
        self.mean_return = mean_return
        self.episodes = json.dumps([])

        for key, value in kwargs.items():
            if key == 'episodes':
                value = json.dumps(value)
            setattr(self, key, value)

    def get_episodes(self):
        return json.loads(self.episodes) if self.episodes else []

    def to_dict(self):
        return {
            'env': self.env,
            'model_ckpt': self.model_ckpt,
            'planner_cfg_hash': self.planner_cfg_hash,
            'mean_return': self.mean_return,
            'oracle_planner_return': self.oracle_planner_return,
            'episodes': self.get_episodes(),
            'config_hash': self.config_hash
        }
