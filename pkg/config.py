# ===== config.py =====
import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    SQLALCHEMY_DATABASE_URI = os.environ.get('MOSIM_DATABASE_URL') or 'sqlite:///mosim_runs.db'
    SQLALCHEMY_TRACK_MODIFICATIONS = False

    # Worker pool size for benchmark rollouts, CEM candidates and LCE batches
    MOSIM_THREADS = int(os.environ.get('MOSIM_THREADS') or os.cpu_count() or 1)

    MOSIM_LOG_LEVEL = os.environ.get('MOSIM_LOG_LEVEL') or 'INFO'

    # Default directory for checkpoints, logs and reports
    MOSIM_OUTPUT_DIR = os.environ.get('MOSIM_OUTPUT_DIR') or 'runs'


class TestConfig(Config):
    TESTING = True
    SQLALCHEMY_DATABASE_URI = 'sqlite:///:memory:'
    MOSIM_THREADS = 1
    MOSIM_LOG_LEVEL = 'WARNING'
