"""On-disk artifact formats: tensor container, hierarchies, datasets, fields, checkpoints, BO histories."""
import csv
import hashlib
import json
import logging
import os

import numpy as np
import torch

from errors import GeometryError, StaleArtifactError
from gvae import Architecture, GVae, count_parameters
from mesh_graph import AssignmentMatrix, CoarseningHierarchy, MeshGraph, compute_pseudo_coords, load_point_cloud
from synth_data import Dataset, RegionLabel

logger = logging.getLogger(__name__)

DTYPES = {'float64': '<f8', 'int64': '<i8', 'uint8': 'u1', 'int8': 'i1'}


def canonical_json(payload):
    return json.dumps(payload, sort_keys=True, separators=(',', ':'))


def json_checksum(payload):
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


def write_json(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write('\n')


def read_json(path):
    try:
        with open(path) as handle:
            return json.load(handle)
    except FileNotFoundError as exc:
        raise StaleArtifactError(path, 'missing; run the upstream stage first') from exc


def _stem(path):
    root, ext = os.path.splitext(path)
    return root if ext in ('.bin', '.json') else path


def write_tensor(path, array, **meta):
    """Flat little-endian binary plus a JSON sidecar with shape, dtype and sha256."""
    stem = _stem(path)
    array = np.asarray(array)
    name = str(array.dtype)
    if name not in DTYPES:
        raise ValueError(f'unsupported tensor dtype {name}')
    blob = np.ascontiguousarray(array, dtype=DTYPES[name]).tobytes()
    checksum = hashlib.sha256(blob).hexdigest()
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    with open(stem + '.bin', 'wb') as handle:
        handle.write(blob)
    write_json(stem + '.json', dict(meta, shape=list(array.shape), dtype=name, sha256=checksum))
    return checksum


def read_tensor(path, expected_checksum=None):
    stem = _stem(path)
    sidecar = read_json(stem + '.json')
    try:
        with open(stem + '.bin', 'rb') as handle:
            blob = handle.read()
    except FileNotFoundError as exc:
        raise StaleArtifactError(stem + '.bin', 'missing binary payload') from exc
    checksum = hashlib.sha256(blob).hexdigest()
    if checksum != sidecar['sha256']:
        raise StaleArtifactError(stem + '.bin', 'content does not match its sidecar checksum')
    if expected_checksum is not None and checksum != expected_checksum:
        raise StaleArtifactError(stem + '.bin', 'checksum differs from the one recorded upstream')
    array = np.frombuffer(blob, dtype=DTYPES[sidecar['dtype']]).reshape(sidecar['shape'])
    return array.astype(sidecar['dtype'])


def tensor_meta(path):
    return read_json(_stem(path) + '.json')


def load_points(path):
    """Point cloud from CSV (x,y,z per line) or from a tensor container."""
    if not os.path.exists(path):
        raise GeometryError(f'point cloud not found: {path}')
    if path.endswith(('.bin', '.json')):
        return np.asarray(read_tensor(path), dtype=np.float64)
    return load_point_cloud(path)


def save_hierarchy(directory, hierarchy):
    os.makedirs(directory, exist_ok=True)
    files = {}
    for level, graph in enumerate(hierarchy.graphs):
        files[f'level{level}_positions'] = write_tensor(
            os.path.join(directory, f'level{level}_positions.bin'), graph.positions.astype(np.float64))
        files[f'level{level}_adjacency'] = write_tensor(
            os.path.join(directory, f'level{level}_adjacency.bin'), graph.adjacency().toarray().astype(np.uint8))
    for level, assignment in enumerate(hierarchy.assignments):
        files[f'level{level}_P'] = write_tensor(
            os.path.join(directory, f'level{level}_P.bin'), assignment.to_dense())
    manifest = {'sizes': list(hierarchy.sizes), 'k': hierarchy.graphs[0].k,
                'depth': hierarchy.depth, 'checksum': hierarchy.checksum(), 'files': files}
    write_json(os.path.join(directory, 'hierarchy.json'), manifest)
    logger.debug('hierarchy written to %s', directory)
    return manifest


def load_hierarchy(directory, expected_checksum=None):
    manifest = read_json(os.path.join(directory, 'hierarchy.json'))
    graphs, assignments = [], []
    for level in range(manifest['depth'] + 1):
        positions = read_tensor(os.path.join(directory, f'level{level}_positions.bin'),
                                manifest['files'][f'level{level}_positions'])
        adjacency = read_tensor(os.path.join(directory, f'level{level}_adjacency.bin'),
                                manifest['files'][f'level{level}_adjacency'])
        rows, cols = np.nonzero(adjacency)
        edges = np.stack([rows, cols], axis=1).astype(np.int64)
        graphs.append(compute_pseudo_coords(MeshGraph(positions, edges, None, manifest['k'])))
    for level in range(manifest['depth']):
        dense = read_tensor(os.path.join(directory, f'level{level}_P.bin'), manifest['files'][f'level{level}_P'])
        assignments.append(AssignmentMatrix.from_dense(dense))
    hierarchy = CoarseningHierarchy(tuple(graphs), tuple(assignments))
    if hierarchy.checksum() != manifest['checksum']:
        raise StaleArtifactError(directory, 'rebuilt hierarchy does not match its manifest checksum')
    if expected_checksum is not None and manifest['checksum'] != expected_checksum:
        raise StaleArtifactError(directory, 'hierarchy checksum differs from the one recorded upstream')
    return hierarchy


def save_dataset(directory, dataset):
    os.makedirs(directory, exist_ok=True)
    fields_checksum = write_tensor(os.path.join(directory, 'fields.bin'), dataset.fields.astype(np.float64))
    with open(os.path.join(directory, 'labels.txt'), 'w') as handle:
        for label in dataset.labels:
            handle.write(' '.join(str(i) for i in label.abnormal.tolist()) + '\n')
    manifest = {'count': len(dataset), 'n': int(dataset.fields.shape[1]),
                'graph_checksum': dataset.graph_checksum, 'splits': dataset.splits.tolist(),
                'theta_healthy': dataset.theta_healthy, 'theta_abnormal': dataset.theta_abnormal,
                'fields_sha256': fields_checksum, 'checksum': dataset.checksum()}
    write_json(os.path.join(directory, 'dataset.json'), manifest)
    return manifest


def load_dataset(directory, graph_checksum=None):
    manifest = read_json(os.path.join(directory, 'dataset.json'))
    if graph_checksum is not None and manifest['graph_checksum'] != graph_checksum:
        raise StaleArtifactError(directory, 'dataset was generated on another geometry')
    fields = read_tensor(os.path.join(directory, 'fields.bin'), manifest['fields_sha256'])
    with open(os.path.join(directory, 'labels.txt')) as handle:
        lines = handle.read().splitlines()
    if len(lines) != manifest['count']:
        raise StaleArtifactError(os.path.join(directory, 'labels.txt'), 'label count does not match the fields')
    labels = [RegionLabel(np.array([int(t) for t in line.split()], dtype=np.int64), manifest['n'])
              for line in lines]
    dataset = Dataset(fields, labels, manifest['graph_checksum'], np.array(manifest['splits']),
                      manifest['theta_healthy'], manifest['theta_abnormal'])
    if dataset.checksum() != manifest['checksum']:
        raise StaleArtifactError(directory, 'dataset content does not match its manifest checksum')
    return dataset


def save_field(path, theta, graph_checksum, units='dimensionless'):
    theta = np.asarray(theta, dtype=np.float64)
    return write_tensor(path, theta, length=int(theta.shape[0]), units=units, graph_checksum=graph_checksum)


def load_field(path, graph_checksum=None):
    meta = tensor_meta(path)
    if graph_checksum is not None and meta.get('graph_checksum') != graph_checksum:
        raise StaleArtifactError(path, 'field belongs to another geometry')
    return read_tensor(path)


def model_checksum(model, names=None):
    digest = hashlib.sha256()
    for name, value in model.state_dict().items():
        if names is None or name in names:
            digest.update(name.encode())
            digest.update(value.detach().cpu().numpy().astype('<f8').tobytes())
    return digest.hexdigest()


def save_checkpoint(directory, model, **extra):
    """Architecture manifest plus one binary blob per parameter tensor."""
    os.makedirs(directory, exist_ok=True)
    parameters = []
    for name, value in model.state_dict().items():
        blob = name.replace('.', '_')
        checksum = write_tensor(os.path.join(directory, f'{blob}.bin'), value.detach().cpu().numpy())
        parameters.append({'name': name, 'file': f'{blob}.bin', 'shape': list(value.shape), 'sha256': checksum})
    manifest = dict(extra, architecture=model.architecture.to_dict(),
                    hierarchy_checksum=model.hierarchy_checksum,
                    n_parameters=count_parameters(model), parameters=parameters,
                    checksum=model_checksum(model))
    write_json(os.path.join(directory, 'checkpoint.json'), manifest)
    return manifest


def load_checkpoint(directory, hierarchy, fine_tune=False):
    """Model bound to hierarchy; a geometry other than the training one needs fine_tune=True."""
    manifest = read_json(os.path.join(directory, 'checkpoint.json'))
    if manifest['hierarchy_checksum'] != hierarchy.checksum() and not fine_tune:
        raise StaleArtifactError(directory, 'checkpoint was trained on another hierarchy')
    arch = manifest['architecture']
    model = GVae(hierarchy, Architecture(**{k: tuple(v) if isinstance(v, list) else v for k, v in arch.items()}))
    own = model.state_dict()
    for entry in manifest['parameters']:
        value = torch.as_tensor(read_tensor(os.path.join(directory, entry['file']), entry['sha256']))
        if entry['name'] in own and own[entry['name']].shape == value.shape:
            own[entry['name']] = value
        elif not fine_tune:
            raise StaleArtifactError(directory, f'parameter {entry["name"]} does not fit the model')
    model.load_state_dict(own)
    return model


def write_history_csv(path, result):
    """Iteration, latent components, objective, best-so-far and wall-time per evaluation."""
    q = result.history[0]['z'].shape[0] if result.history else 0
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['iteration'] + [f'z{i}' for i in range(q)] + ['objective', 'best_so_far', 'wall_time'])
        for row in result.history:
            writer.writerow([row['iteration']] + [repr(float(v)) for v in row['z']]
                            + [repr(row['value']), repr(row['best_so_far']), f'{row["wall_time"]:.6f}'])


def read_history_csv(path):
    with open(path, newline='') as handle:
        rows = list(csv.DictReader(handle))
    return [{key: float(value) for key, value in row.items()} for row in rows]


def write_rows(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
