# ===== app/__init__.py =====
import logging

from flask import Flask
from flask_sqlalchemy import SQLAlchemy
from config import Config

db = SQLAlchemy()

def create_app(config_class=Config):
    app = Flask(__name__)
    app.config.from_object(config_class)

    # Services log through children of the 'app' logger, so they share Flask's handler
    app.logger.setLevel(app.config['MOSIM_LOG_LEVEL'])
    logging.getLogger('app').setLevel(app.config['MOSIM_LOG_LEVEL'])

    # Initialize extensions
    db.init_app(app)

    # Register command blueprints (top-level commands, no group prefix)
    from app.routes.data import data_bp
    from app.routes.train import train_bp
    from app.routes.benchmark import benchmark_bp
    from app.routes.control import control_bp
    app.register_blueprint(data_bp)
    app.register_blueprint(train_bp)
    app.register_blueprint(benchmark_bp)
    app.register_blueprint(control_bp)

    # Create registry tables
    with app.app_context():
        from app.models.run import Run
        from app.models.report import BenchmarkReport, ScoreReport
        db.create_all()

    return app
