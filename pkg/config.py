import hashlib
import json
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace

from dotenv import load_dotenv

from errors import ConfigError

basedir = os.path.abspath(os.path.dirname(__file__))
load_dotenv(os.path.join(basedir, '.env'))


class Config:
    # Registry database
    SQLALCHEMY_DATABASE_URI = os.environ.get('CARDIO_DATABASE_URL') or \
        'sqlite:///' + os.path.join(basedir, 'cardio.db')
    SQLALCHEMY_TRACK_MODIFICATIONS = False

    # Pipeline
    CARDIO_LOG = os.environ.get('CARDIO_LOG') or 'info'
    CARDIO_OUT = os.environ.get('CARDIO_OUT') or os.path.join(basedir, 'runs')
    CARDIO_JOBS = int(os.environ.get('CARDIO_JOBS') or 1)

    @staticmethod
    def init_app(app):
        pass


class DevelopmentConfig(Config):
    DEBUG = True


class TestingConfig(Config):
    TESTING = True
    SQLALCHEMY_DATABASE_URI = 'sqlite:///:memory:'
    CARDIO_LOG = 'error'


class ProductionConfig(Config):
    @classmethod
    def init_app(cls, app):
        Config.init_app(app)

        import logging
        from logging.handlers import RotatingFileHandler

        if not os.path.exists('logs'):
            os.mkdir('logs')

        file_handler = RotatingFileHandler('logs/cardio.log', maxBytes=10240, backupCount=10)
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'
        ))
        file_handler.setLevel(logging.INFO)
        app.logger.addHandler(file_handler)
        app.logger.info('cardio pipeline startup')


config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'production': ProductionConfig,
    'default': DevelopmentConfig
}


# Experiment configuration (TOML)

@dataclass(frozen=True)
class ExperimentSection:
    name: str = 'default'
    master_seed: int = 0
    out: str = ''


@dataclass(frozen=True)
class GeometrySection:
    source: str = 'shell'  # 'shell' or a path to a CSV / tensor-container point cloud
    n_vertices: int = 300
    axes: tuple = (1.0, 1.0, 1.6)
    thickness: float = 0.15
    spacing: float = 1.0
    k: int = 6
    depth: int = 3


@dataclass(frozen=True)
class SimulationSection:
    c: float = 8.0
    e0: float = 0.002
    mu1: float = 0.2
    mu2: float = 0.3
    d_coeff: float = 1.0
    dt: float = 0.1
    t_end: float = 120.0
    record_stride: int = 10


@dataclass(frozen=True)
class StimulusSection:
    sites: tuple = (0,)
    neighborhood: int = 1  # graph hops around each site that are stimulated too
    t_on: float = 0.0
    t_off: float = 1.0
    amplitude: float = 1.0


@dataclass(frozen=True)
class MeasurementSection:
    n_channels: int = 64
    snr_db: float = 20.0
    channel_stride: int = 1


@dataclass(frozen=True)
class DataSection:
    count: int = 2000
    fraction_min: float = 0.02
    fraction_max: float = 0.40
    theta_healthy: float = 0.15
    theta_abnormal: float = 0.5


@dataclass(frozen=True)
class ModelSection:
    latent_dim: int = 2
    channels: tuple = (16, 32, 64)
    kernel_size: tuple = (5, 5, 5)
    degree: int = 1


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kl_weight: float = 1.0


@dataclass(frozen=True)
class BoSection:
    budget: int = 100
    n_init: int = 10
    bound: float = 3.0
    n_restarts: int = 5


@dataclass(frozen=True)
class EvaluateSection:
    n_cases: int = 10
    pca_max_q: int = 20
    self_consistency: bool = True


@dataclass(frozen=True)
class TransferSection:
    source: str = 'shell'
    n_vertices: int = 300
    axes: tuple = (1.0, 1.2, 1.5)
    thickness: float = 0.15
    spacing: float = 1.0
    data_sizes: tuple = (500,)
    epochs: int | None = None  # omitted means train.epochs


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    stimulus: StimulusSection = field(default_factory=StimulusSection)
    measurement: MeasurementSection = field(default_factory=MeasurementSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    bo: BoSection = field(default_factory=BoSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    path: str = field(default='', compare=False)

    def to_dict(self):
        payload = asdict(self)
        payload.pop('path')
        payload['experiment'].pop('out')
        return payload

    def checksum(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def stage_seed(self, stage):
        return stage_seed(self.experiment.master_seed, stage)

    def resolve_path(self, value):
        """Paths in the file are relative to the file's directory."""
        if os.path.isabs(value) or not self.path:
            return value
        return os.path.join(os.path.dirname(os.path.abspath(self.path)), value)

    def with_overrides(self, seed=None, out=None):
        experiment = self.experiment
        if seed is not None:
            experiment = replace(experiment, master_seed=seed)
        if out:
            experiment = replace(experiment, out=out)
        return replace(self, experiment=experiment)


def stage_seed(master_seed, stage):
    digest = hashlib.sha256(f'{master_seed}:{stage}'.encode()).digest()
    return int.from_bytes(digest[:8], 'little') >> 1


def _coerce(section, key, value, default):
    if default is None:
        # optional keys are non-negative integers
        value = _coerce(section, key, value, 0)
        if value < 0:
            raise ConfigError(f'[{section}] {key} must be non-negative')
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f'[{section}] {key} must be true or false')
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'[{section}] {key} must be an integer')
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'[{section}] {key} must be a number')
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not value:
            raise ConfigError(f'[{section}] {key} must be a non-empty array')
        kind = type(default[0])
        try:
            return tuple(_coerce(section, key, v, default[0]) for v in value)
        except ConfigError as exc:
            raise ConfigError(f'[{section}] {key} must be an array of {kind.__name__}') from exc
    if not isinstance(value, str):
        raise ConfigError(f'[{section}] {key} must be a string')
    return value


def parse_experiment(payload, path=''):
    sections = {}
    known = {f.name: f for f in fields(ExperimentConfig) if f.name != 'path'}
    for name, table in payload.items():
        if name not in known:
            raise ConfigError(f'unknown config section [{name}]')
        if not isinstance(table, dict):
            raise ConfigError(f'[{name}] must be a table')
        cls = known[name].default_factory
        defaults = cls()
        keys = {f.name for f in fields(cls)}
        values = {}
        for key, value in table.items():
            if key not in keys:
                raise ConfigError(f'unknown key {key!r} in [{name}]')
            values[key] = _coerce(name, key, value, getattr(defaults, key))
        try:
            sections[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f'[{name}]: {exc}') from exc
    return ExperimentConfig(path=path, **sections)


def load_experiment(path):
    """Read and validate an experiment TOML file; unknown sections or keys are errors."""
    try:
        with open(path, 'rb') as handle:
            payload = tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f'config file not found: {path}') from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f'cannot parse {path}: {exc}') from exc
    return parse_experiment(payload, path)
