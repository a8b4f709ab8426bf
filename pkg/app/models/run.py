# ===== app/models/run.py =====
from app import db
from app.utils.helpers import format_datetime
from datetime import datetime
import json

class Run(db.Model):
    id = db.Column(db.Integer, primary_key=True)
    command = db.Column(db.String(20), nullable=False)   # gen-data, train, benchmark, ...
    config_hash = db.Column(db.String(16), nullable=False)
    seed = db.Column(db.Integer, default=0)

    started_at = db.Column(db.DateTime, default=datetime.utcnow)
    ended_at = db.Column(db.DateTime)
    status = db.Column(db.String(20), default='active')  # active, completed, failed

    output_path = db.Column(db.String(255))
    summary = db.Column(db.Text)  # JSON string

    # Relationships
    benchmark_reports = db.relationship('BenchmarkReport', backref='run', cascade='all, delete-orphan')
    score_reports = db.relationship('ScoreReport', backref='run', cascade='all, delete-orphan')

    def __init__(self, command, config_hash, **kwargs):
        self.command = command
        self.config_hash = config_hash
        self.summary = json.dumps({})

        for key, value in kwargs.items():
            setattr(self, key, value)

    def complete(self, summary=None, output_path=None):
        self.status = 'completed'
        self.ended_at = datetime.utcnow()
        if output_path:
            self.output_path = output_path
        if summary is not None:
            self.update_summary(summary)

    def fail(self, message):
        self.status = 'failed'
        self.ended_at = datetime.utcnow()
        self.update_summary({'error': message})

    def update_summary(self, values):
        current = self.get_summary()
        current.update(values)
        self.summary = json.dumps(current, sort_keys=True)

    def get_summary(self):
        return json.loads(self.summary) if self.summary else {}

    def get_duration_seconds(self):
        if self.ended_at and self.started_at:
            return (self.ended_at - self.started_at).total_seconds()
        return 0

    def to_dict(self):
        return {
            'id': self.id,
            'command': self.command,
            'config_hash': self.config_hash,
            'seed': self.seed,
            'started_at': format_datetime(self.started_at),
            'ended_at': format_datetime(self.ended_at),
            'status': self.status,
            'duration_seconds': self.get_duration_seconds(),
            'output_path': self.output_path,
            'summary': self.get_summary()
        }
