from flask import current_app
from app import db
from models import Artifact, Experiment, OptimizationRun, Stage


def register_experiment(ws):
    """Create or refresh the registry row of the workspace's experiment."""
    experiment = Experiment.query.filter_by(slug=ws.slug).first()
    if experiment is None:
        experiment = Experiment(slug=ws.slug)
        db.session.add(experiment)
    experiment.name = ws.cfg.experiment.name
    experiment.config_checksum = ws.cfg.checksum()
    experiment.master_seed = ws.cfg.experiment.master_seed
    experiment.out_dir = ws.root
    try:
        db.session.commit()
    except Exception as e:
        db.session.rollback()
        current_app.logger.error(f"Error registering experiment {ws.slug}: {e}")
        raise
    return experiment


def record_artifact(ws, stage, manifest):
    experiment = register_experiment(ws)
    artifact = Artifact(stage=Stage(stage), path=ws.path(stage), checksum=manifest['checksum'],
                        experiment=experiment)
    artifact.set_upstream(manifest.get('upstream', {}))
    db.session.add(artifact)
    try:
        db.session.commit()
    except Exception as e:
        db.session.rollback()
        current_app.logger.error(f"Error recording {stage} artifact: {e}")
        raise
    return artifact


def record_runs(ws, manifest):
    """Upsert one OptimizationRun per case of an optimize manifest."""
    experiment = register_experiment(ws)
    wall_times = manifest.get('wall_times', {})
    for case, result in manifest['cases'].items():
        run = OptimizationRun.query.filter_by(experiment_id=experiment.id, case=case).first()
        if run is None:
            run = OptimizationRun(case=case, experiment=experiment)
            db.session.add(run)
        run.best_value = result['best_value']
        run.evaluation_count = result['evaluation_count']
        run.sse = result['sse']
        run.dice = result['dice']
        run.wall_time = wall_times.get(case)
        run.history_path = ws.path(result['history'])
    try:
        db.session.commit()
    except Exception as e:
        db.session.rollback()
        current_app.logger.error(f"Error recording optimization runs: {e}")
        raise


def registry_rows(ws):
    experiment = Experiment.query.filter_by(slug=ws.slug).first()
    return experiment.to_dict() if experiment else {}
