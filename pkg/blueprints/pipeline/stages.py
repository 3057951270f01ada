"""Pipeline stages. Each one checks its upstream manifests, writes its artifacts and returns its manifest."""
import logging
import os
import time
from dataclasses import dataclass, replace

import numpy as np
from slugify import slugify

from bayesopt import MeasurementObjective, bayes_opt, default_bounds
from config import load_experiment
from ep_sim import (ApParams, LeadField, StimulusProtocol, graph_laplacian, measure, simulate, stimulus_sites,
                    synth_lead_field)
from errors import ConfigError, StaleArtifactError
from gvae import Architecture, GVae, TrainConfig, fine_tune, train
from mesh_graph import build_hierarchy, build_knn_graph, shell_point_cloud
from storage import (json_checksum, load_checkpoint, load_dataset, load_hierarchy, load_points, model_checksum,
                     read_json, read_tensor, save_checkpoint, save_dataset, save_field, save_hierarchy,
                     write_history_csv, write_json, write_rows, write_tensor)
from synth_data import dice, gen_dataset, otsu_region, pca_fit, pca_reconstruct, sse

logger = logging.getLogger(__name__)

STAGES = ('geometry', 'gendata', 'train', 'optimize', 'evaluate', 'transfer')

# config keys each stage's artifacts depend on; None takes the whole section
STAGE_SETTINGS = {
    'geometry': {'geometry': None, 'measurement': ('n_channels', 'channel_stride')},
    'gendata': {'data': None},
    'train': {'model': None, 'train': None},
    'optimize': {'simulation': None, 'stimulus': None, 'measurement': None, 'bo': None,
                 'evaluate': ('n_cases', 'self_consistency')},
    'evaluate': {'evaluate': None},
    'transfer': {'transfer': None, 'data': None, 'model': None, 'train': None},
}

SELF_CASE = 'self'


class Workspace:
    """Resolved experiment config plus its output directory <out>/<slug>/."""

    def __init__(self, cfg, out_root, jobs=1):
        self.cfg = cfg
        self.slug = slugify(cfg.experiment.name) or 'experiment'
        self.root = os.path.join(cfg.experiment.out or out_root, self.slug)
        self.jobs = max(int(jobs), 1)

    @classmethod
    def open(cls, config_path, out_root, seed=None, jobs=1, out=None):
        cfg = load_experiment(config_path).with_overrides(seed=seed, out=out)
        return cls(cfg, out_root, jobs)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def seed(self, stage):
        return self.cfg.stage_seed(stage)

    def settings(self, stage):
        payload = self.cfg.to_dict()
        selected = {}
        for name, keys in STAGE_SETTINGS[stage].items():
            section = payload[name]
            selected[name] = section if keys is None else {key: section[key] for key in keys}
        selected['master_seed'] = self.cfg.experiment.master_seed
        return json_checksum(selected)

    def manifest(self, stage):
        return read_json(self.path(stage, 'manifest.json'))

    def has_manifest(self, stage):
        return os.path.exists(self.path(stage, 'manifest.json'))

    def write_manifest(self, stage, content, upstream, started, **extra):
        """Checksum covers content, upstream and settings; wall-times and extras stay outside it."""
        body = dict(content, stage=stage, upstream=upstream, settings=self.settings(stage))
        manifest = dict(body, checksum=json_checksum(body), wall_time=time.perf_counter() - started, **extra)
        write_json(self.path(stage, 'manifest.json'), manifest)
        logger.info('%s done in %.1fs, checksum %s', stage, manifest['wall_time'], manifest['checksum'][:12])
        return manifest

    def check_fresh(self, stage, manifest=None):
        manifest = manifest or self.manifest(stage)
        if manifest['settings'] != self.settings(stage):
            raise StaleArtifactError(self.path(stage), f'configuration changed since it was built; rerun {stage}')
        for name, checksum in manifest['upstream'].items():
            if self.manifest(name)['checksum'] != checksum:
                raise StaleArtifactError(self.path(stage), f'built from an older {name} artifact; rerun {stage}')
        return manifest

    def upstream(self, *stages):
        """Checksums of the named stages, each verified fresh against the current config."""
        return {stage: self.check_fresh(stage)['checksum'] for stage in stages}


@dataclass(frozen=True, eq=False)
class SimContext:
    graph: object
    params: ApParams
    stim: StimulusProtocol
    lap: object
    lead: LeadField


@dataclass(frozen=True, eq=False)
class Case:
    name: str
    theta: np.ndarray
    truth: set
    measured: object
    z0: np.ndarray = None


def _point_cloud(cfg, section, seed):
    if section.source == 'shell':
        return shell_point_cloud(section.n_vertices, section.axes, section.thickness, section.spacing, seed)
    return load_points(cfg.resolve_path(section.source))


def run_geometry(ws):
    started = time.perf_counter()
    cfg = ws.cfg
    points = _point_cloud(cfg, cfg.geometry, ws.seed('geometry'))
    graph = build_knn_graph(points, cfg.geometry.k)
    hierarchy = build_hierarchy(graph, cfg.geometry.depth)
    save_hierarchy(ws.path('geometry', 'hierarchy'), hierarchy)
    lead = synth_lead_field(graph, cfg.measurement.n_channels, ws.seed('leadfield'))
    lead = lead.subsample(cfg.measurement.channel_stride)
    content = {
        'sizes': list(hierarchy.sizes),
        'n_edges': graph.n_edges,
        'graph_checksum': graph.checksum(),
        'hierarchy_checksum': hierarchy.checksum(),
        'n_channels': lead.n_channels,
        'points_sha256': write_tensor(ws.path('geometry', 'points.bin'), points),
        'lead_field_sha256': write_tensor(ws.path('geometry', 'lead_field.bin'), lead.h),
    }
    return ws.write_manifest('geometry', content, {}, started)


def load_geometry(ws):
    manifest = ws.check_fresh('geometry')
    hierarchy = load_hierarchy(ws.path('geometry', 'hierarchy'), manifest['hierarchy_checksum'])
    lead = LeadField(read_tensor(ws.path('geometry', 'lead_field.bin'), manifest['lead_field_sha256']))
    return hierarchy, lead


def run_gendata(ws):
    started = time.perf_counter()
    upstream = ws.upstream('geometry')
    hierarchy, _ = load_geometry(ws)
    data = ws.cfg.data
    dataset = gen_dataset(hierarchy.graphs[0], data.count, (data.fraction_min, data.fraction_max),
                          ws.seed('gendata'), ws.jobs, data.theta_healthy, data.theta_abnormal)
    saved = save_dataset(ws.path('gendata'), dataset)
    content = {
        'count': len(dataset),
        'split_sizes': {name: int(np.sum(dataset.splits == name)) for name in ('train', 'val', 'test')},
        'dataset_checksum': saved['checksum'],
    }
    return ws.write_manifest('gendata', content, upstream, started)


def load_data(ws, hierarchy):
    manifest = ws.check_fresh('gendata')
    dataset = load_dataset(ws.path('gendata'), hierarchy.graphs[0].checksum())
    if dataset.checksum() != manifest['dataset_checksum']:
        raise StaleArtifactError(ws.path('gendata'), 'dataset files differ from the recorded checksum')
    return dataset


def architecture(ws, seed_name='model'):
    model = ws.cfg.model
    return Architecture(model.latent_dim, model.channels, model.kernel_size, model.degree, ws.seed(seed_name))


def train_config(ws, seed_name='train', epochs=None):
    t = ws.cfg.train
    return TrainConfig(t.learning_rate, t.batch_size, t.epochs if epochs is None else epochs,
                       t.beta1, t.beta2, t.eps, ws.seed(seed_name), t.kl_weight)


def _loss_rows(history):
    return [[h['epoch'], _fmt(h['train_loss']), _fmt(h['val_loss'])] for h in history]


def _fmt(value):
    return '' if value is None else repr(float(value))


def run_train(ws):
    started = time.perf_counter()
    upstream = ws.upstream('geometry', 'gendata')
    hierarchy, _ = load_geometry(ws)
    dataset = load_data(ws, hierarchy)
    model = GVae(hierarchy, architecture(ws))
    result = train(model, dataset, train_config(ws))
    saved = save_checkpoint(ws.path('train', 'checkpoint'), model)
    write_rows(ws.path('train', 'loss_curve.csv'), ['epoch', 'train_loss', 'val_loss'], _loss_rows(result.history))
    content = {
        'model_checksum': saved['checksum'],
        'n_parameters': saved['n_parameters'],
        'epochs': len(result.history) - 1,
        'final_train_loss': result.history[-1]['train_loss'],
        'final_val_loss': result.history[-1]['val_loss'],
    }
    return ws.write_manifest('train', content, upstream, started)


def load_model(ws, hierarchy):
    manifest = ws.check_fresh('train')
    model = load_checkpoint(ws.path('train', 'checkpoint'), hierarchy)
    if model_checksum(model) != manifest['model_checksum']:
        raise StaleArtifactError(ws.path('train', 'checkpoint'), 'weights differ from the recorded checksum')
    model.eval()
    return model


def sim_context(ws, graph, lead):
    s, st = ws.cfg.simulation, ws.cfg.stimulus
    params = ApParams(s.c, s.e0, s.mu1, s.mu2, s.d_coeff, s.dt, s.t_end, s.record_stride)
    sites = stimulus_sites(graph, st.sites, st.neighborhood)
    stim = StimulusProtocol(sites, st.t_on, st.t_off, st.amplitude)
    stim.validate(graph.size, params.t_end)
    return SimContext(graph, params, stim, graph_laplacian(graph, params.d_coeff), lead)


def case_names(ws, dataset):
    """First n_cases test fields, then the noise-free decoded case when enabled."""
    n_test = int(np.sum(dataset.splits == 'test'))
    names = [f'case{i:02d}' for i in range(min(ws.cfg.evaluate.n_cases, n_test))]
    if ws.cfg.evaluate.self_consistency:
        names.append(SELF_CASE)
    return names


def build_case(ws, name, ctx, dataset, model):
    fields, labels = dataset.split('test')
    if name == SELF_CASE:
        if len(fields):
            z0 = model.encode_mean_numpy(fields[0])
        else:
            z0 = np.zeros(model.architecture.latent_dim)
        theta = np.clip(model.decode_numpy(z0), 0.0, 1.0)
        truth, snr_db = otsu_region(theta), None
    else:
        try:
            index = int(name.removeprefix('case'))
        except ValueError:
            raise ConfigError(f'unknown case {name!r}; expected caseNN or {SELF_CASE!r}') from None
        if not name.startswith('case') or not 0 <= index < len(fields):
            raise ConfigError(f'unknown case {name!r}; the test split has {len(fields)} fields')
        theta, truth, z0, snr_db = fields[index], labels[index].as_set(), None, ws.cfg.measurement.snr_db
    history = simulate(ctx.graph, theta, ctx.params, ctx.stim, lap=ctx.lap)
    measured = measure(ctx.lead, history, snr_db, seed=ws.seed(f'noise:{name}'), dt_frame=ctx.params.dt_frame)
    return Case(name, theta, truth, measured, z0)


def optimize_case(ws, case, ctx, model):
    objective = MeasurementObjective(model, ctx.graph, ctx.params, ctx.stim, ctx.lead, case.measured, lap=ctx.lap)
    bo = ws.cfg.bo
    q = model.architecture.latent_dim
    result = bayes_opt(objective, q, bo.budget, default_bounds(q, bo.bound), bo.n_init,
                       ws.seed(f'bo:{case.name}'), decode=model.decode_numpy,
                       n_restarts=bo.n_restarts, jobs=ws.jobs)
    theta_hat = np.clip(result.best_theta, 0.0, 1.0)
    directory = ws.path('optimize', case.name)
    write_history_csv(os.path.join(directory, 'history.csv'), result)
    checksum = ctx.graph.checksum()
    save_field(os.path.join(directory, 'theta_hat.bin'), theta_hat, checksum)
    save_field(os.path.join(directory, 'theta_true.bin'), case.theta, checksum)
    write_tensor(os.path.join(directory, 'measurements.bin'), case.measured.frames, snr_db=case.measured.snr_db)
    curve = result.best_so_far()
    record = {
        'best_z': result.best_z.tolist(),
        'best_value': result.best_value,
        'evaluation_count': result.evaluation_count,
        'flagged': int(sum(h['flagged'] for h in result.history)),
        'sse': sse(theta_hat, case.theta),
        'dice': dice(otsu_region(theta_hat), case.truth),
        'monotone': bool(np.all(np.diff(curve) >= 0)),
        'history': os.path.join('optimize', case.name, 'history.csv'),
        'wall_time': result.history[-1]['wall_time'],
    }
    if case.z0 is not None:
        # best_* describe the BO optimum, true_z_* the code the measurements were simulated from
        record['true_z'] = case.z0.tolist()
        record['true_z_objective'] = objective(case.z0)
        record['true_z_dice'] = dice(otsu_region(np.clip(model.decode_numpy(case.z0), 0.0, 1.0)), case.truth)
        record['true_z_distance'] = float(np.linalg.norm(result.best_z - case.z0))
    write_json(os.path.join(directory, 'result.json'), record)
    logger.info('%s: best %.6g after %d evaluations, SSE %.4f, Dice %.3f', case.name, record['best_value'],
                record['evaluation_count'], record['sse'], record['dice'])
    return record


def _previous_cases(ws, upstream):
    """Case records of an optimize manifest still valid for the current upstream and settings."""
    if not ws.has_manifest('optimize'):
        return {}, {}
    manifest = ws.manifest('optimize')
    if manifest['upstream'] != upstream or manifest['settings'] != ws.settings('optimize'):
        return {}, {}
    return dict(manifest['cases']), dict(manifest.get('wall_times', {}))


def run_optimize(ws, cases=None):
    started = time.perf_counter()
    upstream = ws.upstream('geometry', 'gendata', 'train')
    hierarchy, lead = load_geometry(ws)
    dataset = load_data(ws, hierarchy)
    model = load_model(ws, hierarchy)
    ctx = sim_context(ws, hierarchy.graphs[0], lead)
    names = case_names(ws, dataset) if cases is None else list(cases)
    records, wall_times = _previous_cases(ws, upstream)
    for name in names:
        record = optimize_case(ws, build_case(ws, name, ctx, dataset, model), ctx, model)
        wall_times[name] = record.pop('wall_time')
        records[name] = record
    content = {'cases': {name: records[name] for name in sorted(records)}}
    return ws.write_manifest('optimize', content, upstream, started, wall_times=wall_times)


def reconstruction_metrics(model, fields, labels):
    """Per-field SSE and Otsu Dice of decode(encoder mean)."""
    recon = model.decode_numpy(model.encode_mean_numpy(fields)).reshape(fields.shape)
    sse_values = np.array([sse(r, f) for r, f in zip(recon, fields)])
    dice_values = np.array([dice(otsu_region(r), label.as_set()) for r, label in zip(recon, labels)])
    return sse_values, dice_values


def _pca_metrics(pca, fields, labels, q):
    recon = [pca_reconstruct(pca, f, q) for f in fields]
    return (np.array([sse(r, f) for r, f in zip(recon, fields)]),
            np.array([dice(otsu_region(r), label.as_set()) for r, label in zip(recon, labels)]))


def run_evaluate(ws):
    started = time.perf_counter()
    base = ws.upstream('geometry', 'gendata', 'train')
    hierarchy, _ = load_geometry(ws)
    dataset = load_data(ws, hierarchy)
    model = load_model(ws, hierarchy)
    fields, labels = dataset.split('test')
    if len(fields) == 0:
        raise ConfigError('the test split is empty; increase data.count')

    done, _ = _previous_cases(ws, base)
    missing = [name for name in case_names(ws, dataset) if name not in done]
    if missing or not ws.has_manifest('optimize'):
        run_optimize(ws, missing)
    upstream = ws.upstream('geometry', 'gendata', 'train', 'optimize')
    optimize = ws.manifest('optimize')

    q = model.architecture.latent_dim
    gvae_sse, gvae_dice = reconstruction_metrics(model, fields, labels)
    pca = pca_fit(dataset)
    pca_sse, pca_dice = _pca_metrics(pca, fields, labels, min(q, pca.q))
    write_rows(ws.path('evaluate', 'reconstruction.csv'), ['index', 'gvae_sse', 'gvae_dice', 'pca_sse', 'pca_dice'],
               [[i, repr(a), repr(b), repr(c), repr(d)]
                for i, (a, b, c, d) in enumerate(zip(gvae_sse, gvae_dice, pca_sse, pca_dice))])

    sweep, crossover = [], None
    for qq in range(1, min(ws.cfg.evaluate.pca_max_q, pca.q) + 1):
        s, d = _pca_metrics(pca, fields, labels, qq)
        sweep.append([qq, repr(float(s.mean())), repr(float(d.mean()))])
        if crossover is None and s.mean() <= gvae_sse.mean():
            crossover = qq
    write_rows(ws.path('evaluate', 'pca_sweep.csv'), ['q', 'mean_sse', 'mean_dice'], sweep)

    codes = model.encode_mean_numpy(fields).reshape(len(fields), q)
    positions = hierarchy.graphs[0].positions
    write_rows(ws.path('evaluate', 'latent_codes.csv'),
               ['index'] + [f'z{j}' for j in range(q)] + ['fraction', 'centroid_x', 'centroid_y', 'centroid_z'],
               [[i] + [repr(float(v)) for v in codes[i]] + [repr(label.fraction)]
                + [repr(float(v)) for v in positions[label.abnormal].mean(axis=0)]
                for i, label in enumerate(labels)])

    cases = optimize['cases']
    write_rows(ws.path('evaluate', 'estimation.csv'),
               ['case', 'sse', 'dice', 'best_value', 'evaluation_count', 'wall_time'],
               [[name, repr(c['sse']), repr(c['dice']), repr(c['best_value']), c['evaluation_count'],
                 f"{optimize['wall_times'].get(name, 0.0):.3f}"] for name, c in cases.items()])
    data_cases = [c['dice'] for name, c in cases.items() if name != SELF_CASE]

    report = {
        'experiment': ws.slug,
        'config_checksum': ws.cfg.checksum(),
        'n_parameters': ws.manifest('train')['n_parameters'],
        'reconstruction': {
            'n_test': len(fields),
            'gvae': {'q': q, 'mean_sse': float(gvae_sse.mean()), 'mean_dice': float(gvae_dice.mean())},
            'pca': {'q': min(q, pca.q), 'mean_sse': float(pca_sse.mean()), 'mean_dice': float(pca_dice.mean())},
            'pca_crossover_q': crossover,
        },
        'estimation': {
            'cases': cases,
            'median_dice': float(np.median(data_cases)) if data_cases else None,
            'all_monotone': all(c['monotone'] for c in cases.values()),
        },
        'artifacts': {
            'reconstruction': 'evaluate/reconstruction.csv',
            'estimation': 'evaluate/estimation.csv',
            'pca_sweep': 'evaluate/pca_sweep.csv',
            'latent_codes': 'evaluate/latent_codes.csv',
            'loss_curve': 'train/loss_curve.csv',
        },
    }
    report['checksum'] = json_checksum(report)
    write_json(ws.path('evaluate', 'report.json'), dict(report, wall_times=optimize['wall_times']))
    return ws.write_manifest('evaluate', {'report_checksum': report['checksum']}, upstream, started, report=report)


def run_transfer(ws):
    """Fine-tune the trained model on a second geometry next to a scratch model with the same budget."""
    started = time.perf_counter()
    upstream = ws.upstream('geometry', 'gendata', 'train')
    hierarchy, _ = load_geometry(ws)
    source = load_model(ws, hierarchy)
    cfg = ws.cfg
    points = _point_cloud(cfg, cfg.transfer, ws.seed('transfer:geometry'))
    graph = build_knn_graph(points, cfg.geometry.k)
    target = build_hierarchy(graph, cfg.geometry.depth)
    save_hierarchy(ws.path('transfer', 'hierarchy'), target)

    frozen = {name for name, _ in source.named_parameters() if name.startswith('encoder.')}
    before = model_checksum(source, frozen)
    epochs = cfg.train.epochs if cfg.transfer.epochs is None else cfg.transfer.epochs
    data = cfg.data
    runs = {}
    for size in cfg.transfer.data_sizes:
        dataset = gen_dataset(graph, size, (data.fraction_min, data.fraction_max), ws.seed(f'transfer:data:{size}'),
                              ws.jobs, data.theta_healthy, data.theta_abnormal)
        schedule = train_config(ws, 'transfer:train', epochs)
        tuned = fine_tune(source, target, dataset, schedule)
        scratch = train(GVae(target, replace(architecture(ws), seed=ws.seed('transfer:scratch'))), dataset, schedule)
        directory = ws.path('transfer', f'n{size}')
        save_checkpoint(os.path.join(directory, 'checkpoint'), tuned.model, frozen=sorted(frozen))
        write_rows(os.path.join(directory, 'curves.csv'),
                   ['epoch', 'fine_tune_train', 'fine_tune_val', 'scratch_train', 'scratch_val'],
                   [[a['epoch'], _fmt(a['train_loss']), _fmt(a['val_loss']), _fmt(b['train_loss']), _fmt(b['val_loss'])]
                    for a, b in zip(tuned.history, scratch.history)])
        fields, labels = dataset.split('test')
        summary = {}
        for name, result in (('fine_tune', tuned), ('scratch', scratch)):
            entry = {'final_train_loss': result.history[-1]['train_loss'],
                     'final_val_loss': result.history[-1]['val_loss']}
            if len(fields):
                s, d = reconstruction_metrics(result.model, fields, labels)
                entry.update(mean_sse=float(s.mean()), mean_dice=float(d.mean()))
            summary[name] = entry
        runs[str(size)] = dict(summary, epochs=epochs, frozen_unchanged=model_checksum(tuned.model, frozen) == before,
                               curves=os.path.join('transfer', f'n{size}', 'curves.csv'))
        logger.info('transfer n=%d: fine-tuned val %s, scratch val %s', size,
                    summary['fine_tune']['final_val_loss'], summary['scratch']['final_val_loss'])
    content = {'hierarchy_checksum': target.checksum(), 'sizes': list(target.sizes), 'runs': runs}
    write_json(ws.path('transfer', 'report.json'), content)
    return ws.write_manifest('transfer', content, upstream, started)


def run_report(ws, registry=None):
    """Gather every stage manifest of the experiment into summary.json."""
    stages = {stage: ws.manifest(stage) for stage in STAGES if ws.has_manifest(stage)}
    summary = {'experiment': ws.slug, 'config_checksum': ws.cfg.checksum(), 'stages': stages,
               'registry': registry or {}}
    write_json(ws.path('summary.json'), summary)
    return summary
