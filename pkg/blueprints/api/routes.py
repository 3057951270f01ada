import os
from flask import jsonify, send_file
from . import api_bp
from models import Experiment, OptimizationRun


@api_bp.route('/experiments')
def experiments():
    """Registered experiments, newest first"""
    rows = Experiment.query.order_by(Experiment.created_at.desc()).all()
    return jsonify([{'slug': e.slug, 'name': e.name, 'config_checksum': e.config_checksum,
                     'master_seed': e.master_seed} for e in rows])


@api_bp.route('/experiments/<string:slug>')
def experiment_detail(slug):
    experiment = Experiment.query.filter_by(slug=slug).first()
    if not experiment:
        return jsonify({'error': 'Experiment not found'}), 404
    return jsonify(experiment.to_dict())


@api_bp.route('/experiments/<string:slug>/runs/<string:case>/history.csv')
def run_history(slug, case):
    """BO history of one case as CSV"""
    experiment = Experiment.query.filter_by(slug=slug).first()
    if not experiment:
        return jsonify({'error': 'Experiment not found'}), 404
    run = OptimizationRun.query.filter_by(experiment_id=experiment.id, case=case).first()
    if not run or not run.history_path or not os.path.exists(run.history_path):
        return jsonify({'error': 'History not found'}), 404
    return send_file(os.path.abspath(run.history_path), mimetype='text/csv')
