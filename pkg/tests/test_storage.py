import numpy as np
import pytest

from bayesopt import random_search
from errors import GeometryError, StaleArtifactError
from gvae import Architecture, GVae
from mesh_graph import build_hierarchy, build_knn_graph, shell_point_cloud
from storage import (load_checkpoint, load_dataset, load_field, load_hierarchy, load_points, model_checksum,
                     read_history_csv, read_json, read_tensor, save_checkpoint, save_dataset, save_field,
                     save_hierarchy, tensor_meta, write_history_csv, write_tensor)
from synth_data import gen_dataset

SMALL = Architecture(latent_dim=2, channels=(4, 8), kernel_size=(3, 3, 3), seed=1)


def test_tensor_container_sidecar(tmp_path):
    array = np.arange(12, dtype=np.float64).reshape(3, 4)
    checksum = write_tensor(str(tmp_path / 'a.bin'), array, units='mV')
    meta = tensor_meta(str(tmp_path / 'a.json'))
    assert meta == {'shape': [3, 4], 'dtype': 'float64', 'sha256': checksum, 'units': 'mV'}
    assert (tmp_path / 'a.bin').stat().st_size == 12 * 8
    loaded = read_tensor(str(tmp_path / 'a'), checksum)
    assert loaded.dtype == np.float64
    assert np.array_equal(loaded, array)


def test_tensor_corruption_detected(tmp_path):
    path = tmp_path / 'b.bin'
    write_tensor(str(path), np.ones(4, dtype=np.int64))
    path.write_bytes(b'\x00' * 32)
    with pytest.raises(StaleArtifactError, match='sidecar checksum'):
        read_tensor(str(path))


def test_tensor_checksum_must_match_upstream(tmp_path):
    write_tensor(str(tmp_path / 'c.bin'), np.zeros(3))
    with pytest.raises(StaleArtifactError, match='upstream'):
        read_tensor(str(tmp_path / 'c.bin'), 'feed' * 16)


def test_tensor_rejects_float32(tmp_path):
    with pytest.raises(ValueError, match='dtype'):
        write_tensor(str(tmp_path / 'd.bin'), np.zeros(3, dtype=np.float32))


def test_missing_artifact_is_stale(tmp_path):
    with pytest.raises(StaleArtifactError, match='missing'):
        read_json(str(tmp_path / 'nowhere' / 'manifest.json'))


def test_load_points_from_csv_and_tensor(tmp_path):
    points = shell_point_cloud(20, seed=0)
    np.savetxt(tmp_path / 'cloud.csv', points, delimiter=',')
    write_tensor(str(tmp_path / 'cloud.bin'), points)
    assert np.allclose(load_points(str(tmp_path / 'cloud.csv')), points)
    assert np.array_equal(load_points(str(tmp_path / 'cloud.bin')), points)
    with pytest.raises(GeometryError, match='ghost.csv'):
        load_points(str(tmp_path / 'ghost.csv'))


def test_hierarchy_reloads_with_same_checksum(tmp_path, small_hierarchy):
    manifest = save_hierarchy(str(tmp_path / 'h'), small_hierarchy)
    loaded = load_hierarchy(str(tmp_path / 'h'), manifest['checksum'])
    assert loaded.checksum() == small_hierarchy.checksum()
    assert loaded.sizes == small_hierarchy.sizes
    assert np.allclose(loaded.graphs[0].pseudo, small_hierarchy.graphs[0].pseudo)
    with pytest.raises(StaleArtifactError):
        load_hierarchy(str(tmp_path / 'h'), 'other')


def test_dataset_reloads(tmp_path, small_graph):
    dataset = gen_dataset(small_graph, 10, rng_seed=3)
    save_dataset(str(tmp_path / 'data'), dataset)
    loaded = load_dataset(str(tmp_path / 'data'), small_graph.checksum())
    assert np.array_equal(loaded.fields, dataset.fields)
    assert [l.abnormal.tolist() for l in loaded.labels] == [l.abnormal.tolist() for l in dataset.labels]
    assert loaded.splits.tolist() == dataset.splits.tolist()
    with pytest.raises(StaleArtifactError, match='another geometry'):
        load_dataset(str(tmp_path / 'data'), 'not-this-graph')


def test_field_carries_geometry(tmp_path):
    theta = np.linspace(0.1, 0.5, 7)
    save_field(str(tmp_path / 'theta.bin'), theta, 'abc')
    assert tensor_meta(str(tmp_path / 'theta.bin'))['length'] == 7
    assert np.array_equal(load_field(str(tmp_path / 'theta.bin'), 'abc'), theta)
    with pytest.raises(StaleArtifactError):
        load_field(str(tmp_path / 'theta.bin'), 'xyz')


def test_checkpoint_reloads_identically(tmp_path, small_hierarchy):
    model = GVae(small_hierarchy, SMALL)
    manifest = save_checkpoint(str(tmp_path / 'ckpt'), model, epochs=0)
    assert manifest['epochs'] == 0
    loaded = load_checkpoint(str(tmp_path / 'ckpt'), small_hierarchy)
    assert model_checksum(loaded) == model_checksum(model) == manifest['checksum']
    z = np.array([0.3, -0.8])
    assert np.array_equal(loaded.decode_numpy(z), model.decode_numpy(z))


def test_checkpoint_bound_to_its_hierarchy(tmp_path, small_hierarchy):
    save_checkpoint(str(tmp_path / 'ckpt'), GVae(small_hierarchy, SMALL))
    other = build_hierarchy(build_knn_graph(shell_point_cloud(50, seed=9), 6), 2)
    with pytest.raises(StaleArtifactError, match='another hierarchy'):
        load_checkpoint(str(tmp_path / 'ckpt'), other)
    adapted = load_checkpoint(str(tmp_path / 'ckpt'), other, fine_tune=True)
    assert adapted.n_vertices == 50


def test_history_csv_columns(tmp_path):
    result = random_search(lambda z: -float(np.sum(z ** 2)), 3, budget=5, rng_seed=0)
    write_history_csv(str(tmp_path / 'history.csv'), result)
    header = (tmp_path / 'history.csv').read_text().splitlines()[0]
    assert header == 'iteration,z0,z1,z2,objective,best_so_far,wall_time'
    rows = read_history_csv(str(tmp_path / 'history.csv'))
    assert [r['iteration'] for r in rows] == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert [r['objective'] for r in rows] == [h['value'] for h in result.history]
    assert rows[-1]['best_so_far'] == result.best_value
