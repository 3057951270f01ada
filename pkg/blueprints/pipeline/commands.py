import json
from functools import wraps
import click
from flask import current_app
from . import pipeline_bp
from . import stages
from .registry import record_artifact, record_runs, registry_rows
from utils.decorators import exit_codes


def pipeline_options(f):
    """--config/--seed/--jobs/--out, resolved into a Workspace passed as the first argument."""
    @click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False),
                  help='Experiment TOML file.')
    @click.option('--seed', type=int, default=None, help='Override experiment.master_seed.')
    @click.option('--jobs', type=int, default=None, help='Worker cap (default CARDIO_JOBS).')
    @click.option('--out', type=click.Path(file_okay=False), default=None, help='Output root directory.')
    @wraps(f)
    def decorated_function(config_path, seed, jobs, out, **kwargs):
        if jobs is None:
            jobs = current_app.config['CARDIO_JOBS']
        ws = stages.Workspace.open(config_path, current_app.config['CARDIO_OUT'], seed=seed, jobs=jobs, out=out)
        current_app.logger.info(f"{f.__name__}: experiment {ws.slug} in {ws.root}")
        return f(ws, **kwargs)
    return decorated_function


def _done(stage, manifest):
    click.echo(f"{stage} {manifest['checksum']}")


@pipeline_bp.cli.command('geometry')
@exit_codes
@pipeline_options
def geometry(ws):
    """Build the point cloud, k-NN graph, coarsening hierarchy and lead field."""
    manifest = stages.run_geometry(ws)
    record_artifact(ws, 'geometry', manifest)
    _done('geometry', manifest)


@pipeline_bp.cli.command('gendata')
@exit_codes
@pipeline_options
def gendata(ws):
    """Generate the region-grown excitability dataset."""
    manifest = stages.run_gendata(ws)
    record_artifact(ws, 'gendata', manifest)
    _done('gendata', manifest)


@pipeline_bp.cli.command('train')
@exit_codes
@pipeline_options
def train(ws):
    """Train the graph-convolutional VAE."""
    manifest = stages.run_train(ws)
    record_artifact(ws, 'train', manifest)
    _done('train', manifest)


@pipeline_bp.cli.command('optimize')
@click.option('--case', 'cases', multiple=True, help='Case to run (caseNN or self); default all.')
@exit_codes
@pipeline_options
def optimize(ws, cases):
    """Estimate excitability fields of held-out cases by latent-space Bayesian optimization."""
    manifest = stages.run_optimize(ws, list(cases) if cases else None)
    record_artifact(ws, 'optimize', manifest)
    record_runs(ws, manifest)
    _done('optimize', manifest)


@pipeline_bp.cli.command('evaluate')
@exit_codes
@pipeline_options
def evaluate(ws):
    """Reconstruction and estimation metrics against ground truth and the PCA baseline."""
    manifest = stages.run_evaluate(ws)
    record_runs(ws, ws.manifest('optimize'))
    record_artifact(ws, 'evaluate', manifest)
    click.echo(json.dumps(manifest['report'], indent=2, sort_keys=True))


@pipeline_bp.cli.command('transfer')
@exit_codes
@pipeline_options
def transfer(ws):
    """Fine-tune the trained model on a second geometry against a scratch-trained control."""
    manifest = stages.run_transfer(ws)
    record_artifact(ws, 'transfer', manifest)
    _done('transfer', manifest)


@pipeline_bp.cli.command('report')
@exit_codes
@pipeline_options
def report(ws):
    """Write summary.json from every stage manifest and the registry."""
    summary = stages.run_report(ws, registry_rows(ws))
    click.echo(json.dumps(summary, indent=2, sort_keys=True))
