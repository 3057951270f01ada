import logging
import os
from flask import Flask
from flask.logging import default_handler
from flask_sqlalchemy import SQLAlchemy
from config import config

# Initialize extensions
db = SQLAlchemy()

LOG_LEVELS = {'error': logging.ERROR, 'info': logging.INFO, 'debug': logging.DEBUG}


def configure_logging(app):
    """One stream handler on the root logger so module loggers and app.logger share it."""
    name = str(app.config.get('CARDIO_LOG', 'info')).lower()
    level = LOG_LEVELS.get(name)
    root = logging.getLogger()
    if not any(getattr(h, '_cardio', False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
        handler._cardio = True
        root.addHandler(handler)
    root.setLevel(level or logging.INFO)
    app.logger.removeHandler(default_handler)
    app.logger.setLevel(level or logging.INFO)
    if level is None:
        app.logger.warning(f"Unknown CARDIO_LOG value {name!r}, using 'info'")


def create_app(config_name=None):
    # Create and configure the app
    app = Flask(__name__)

    # Load configuration
    if config_name is None:
        config_name = os.environ.get('CARDIO_ENV', 'default')
    app.config.from_object(config[config_name])
    configure_logging(app)
    config[config_name].init_app(app)

    # Initialize extensions with app
    db.init_app(app)

    from models import Experiment, Artifact, OptimizationRun

    # Register blueprints
    from blueprints.pipeline import pipeline_bp
    from blueprints.api import api_bp

    app.register_blueprint(pipeline_bp)
    app.register_blueprint(api_bp, url_prefix='/api')

    # Create registry tables
    with app.app_context():
        try:
            db.create_all()
        except Exception as e:
            app.logger.error(f"Error during registry initialization: {e}")
            raise

    # Shell context
    @app.shell_context_processor
    def make_shell_context():
        return dict(db=db, Experiment=Experiment, Artifact=Artifact, OptimizationRun=OptimizationRun)

    return app
