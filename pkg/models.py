from datetime import datetime
from app import db
import enum
import json


class Stage(enum.Enum):
    GEOMETRY = 'geometry'
    GENDATA = 'gendata'
    TRAIN = 'train'
    OPTIMIZE = 'optimize'
    EVALUATE = 'evaluate'
    TRANSFER = 'transfer'
    REPORT = 'report'


class Experiment(db.Model):
    __tablename__ = 'experiments'

    id = db.Column(db.Integer, primary_key=True)
    slug = db.Column(db.String(120), unique=True, index=True, nullable=False)
    name = db.Column(db.String(120), nullable=False)
    config_checksum = db.Column(db.String(64), nullable=False)
    master_seed = db.Column(db.BigInteger, nullable=False)
    out_dir = db.Column(db.String(255), nullable=False)

    # Timestamps
    created_at = db.Column(db.DateTime, default=datetime.utcnow)
    updated_at = db.Column(db.DateTime, default=datetime.utcnow, onupdate=datetime.utcnow)

    # Relationships
    artifacts = db.relationship('Artifact', backref='experiment', lazy='dynamic',
                                cascade='all, delete-orphan')
    runs = db.relationship('OptimizationRun', backref='experiment', lazy='dynamic',
                           cascade='all, delete-orphan')

    def latest_artifact(self, stage):
        return self.artifacts.filter_by(stage=stage).order_by(Artifact.id.desc()).first()

    def to_dict(self):
        return {
            'slug': self.slug,
            'name': self.name,
            'config_checksum': self.config_checksum,
            'master_seed': self.master_seed,
            'out_dir': self.out_dir,
            'created_at': self.created_at.isoformat() if self.created_at else None,
            'artifacts': [a.to_dict() for a in self.artifacts.order_by(Artifact.id)],
            'runs': [r.to_dict() for r in self.runs.order_by(OptimizationRun.case)],
        }

    def __repr__(self):
        return f'<Experiment {self.slug}> - {self.config_checksum[:12]}'


class Artifact(db.Model):
    __tablename__ = 'artifacts'

    id = db.Column(db.Integer, primary_key=True)
    stage = db.Column(db.Enum(Stage), nullable=False)
    path = db.Column(db.String(255), nullable=False)
    checksum = db.Column(db.String(64), nullable=False)
    upstream = db.Column(db.Text)  # JSON: name -> checksum

    # Foreign keys
    experiment_id = db.Column(db.Integer, db.ForeignKey('experiments.id'), nullable=False)

    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    def set_upstream(self, upstream_dict):
        self.upstream = json.dumps(upstream_dict, sort_keys=True)

    def get_upstream(self):
        if self.upstream:
            return json.loads(self.upstream)
        return {}

    def to_dict(self):
        return {
            'stage': self.stage.value,
            'path': self.path,
            'checksum': self.checksum,
            'upstream': self.get_upstream(),
        }

    def __repr__(self):
        return f'<Artifact {self.stage.value}> - {self.checksum[:12]}'


class OptimizationRun(db.Model):
    __tablename__ = 'optimization_runs'

    id = db.Column(db.Integer, primary_key=True)
    case = db.Column(db.String(32), nullable=False)
    best_value = db.Column(db.Float)
    evaluation_count = db.Column(db.Integer, default=0)
    sse = db.Column(db.Float)
    dice = db.Column(db.Float)
    wall_time = db.Column(db.Float)
    history_path = db.Column(db.String(255))

    # Foreign keys
    experiment_id = db.Column(db.Integer, db.ForeignKey('experiments.id'), nullable=False)

    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    __table_args__ = (db.UniqueConstraint('experiment_id', 'case'),)

    def to_dict(self):
        return {
            'case': self.case,
            'best_value': self.best_value,
            'evaluation_count': self.evaluation_count,
            'sse': self.sse,
            'dice': self.dice,
            'wall_time': self.wall_time,
        }

    def __repr__(self):
        return f'<OptimizationRun {self.case}> - {self.best_value}'
