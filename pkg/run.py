# ===== run.py =====
import click
from flask.cli import FlaskGroup

from app import create_app

@click.group(cls=FlaskGroup, create_app=create_app, add_default_commands=False)
def cli():
    """MoSim: neural motion simulation, benchmarking and model-based planning."""

if __name__ == '__main__':
    cli()
