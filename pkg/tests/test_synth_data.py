import numpy as np
import pytest
from scipy.sparse.csgraph import connected_components

from errors import GeometryError
from mesh_graph import build_knn_graph
from synth_data import (Dataset, RegionLabel, dice, gen_dataset, grow_region, make_field, otsu_region,
                        otsu_threshold, pca_fit, pca_reconstruct, split_tags, sse)


def _is_connected(graph, vertices):
    sub = graph.adjacency()[vertices][:, vertices]
    n_components, _ = connected_components(sub, directed=False)
    return n_components == 1


def _exhaustive_otsu_region(theta, bins=256):
    edges = np.linspace(theta.min(), theta.max(), bins + 1)
    best, region = -np.inf, None
    for t in edges[1:-1]:
        low, high = theta[theta < t], theta[theta >= t]
        if not len(low) or not len(high):
            continue
        score = len(low) * len(high) * (low.mean() - high.mean()) ** 2
        if score > best * (1 + 1e-12):
            best, region = score, set(np.nonzero(theta >= t)[0].tolist())
    return region


def test_grow_region_single_vertex(small_graph):
    label = grow_region(small_graph, 5, 1.0 / small_graph.size, rng_seed=0)
    assert label.abnormal.tolist() == [5]


@pytest.mark.parametrize('fraction', [0.1, 0.25, 0.4])
def test_grow_region_size_and_connectivity(shell_graph, fraction):
    label = grow_region(shell_graph, 17, fraction, rng_seed=3)
    assert len(label.abnormal) == int(np.ceil(fraction * shell_graph.size))
    assert 17 in label.as_set()
    assert _is_connected(shell_graph, label.abnormal)


def test_grow_region_whole_graph(small_graph):
    label = grow_region(small_graph, 0, 1.0, rng_seed=1)
    assert label.abnormal.tolist() == list(range(small_graph.size))


def test_grow_region_rejects_fraction(small_graph):
    with pytest.raises(ValueError):
        grow_region(small_graph, 0, 0.0, rng_seed=0)


def test_grow_region_stalls_on_disconnected_graph():
    points = np.array([[0.0, 0, 0], [1.0, 0, 0], [10.0, 0, 0], [11.0, 0, 0]])
    graph = build_knn_graph(points, k=1)
    with pytest.raises(GeometryError, match='disconnected'):
        grow_region(graph, 0, 0.75, rng_seed=0)


def test_make_field_values():
    field = make_field(RegionLabel(np.array([1, 3]), 5), 0.15, 0.5)
    assert field.theta.tolist() == [0.15, 0.5, 0.15, 0.5, 0.15]


def test_gen_dataset_is_deterministic(small_graph):
    a = gen_dataset(small_graph, 12, rng_seed=9)
    b = gen_dataset(small_graph, 12, rng_seed=9, jobs=3)
    assert np.array_equal(a.fields, b.fields)
    assert a.checksum() == b.checksum()
    assert not np.array_equal(a.fields, gen_dataset(small_graph, 12, rng_seed=10).fields)


def test_dataset_checksum_covers_labels(small_graph):
    dataset = gen_dataset(small_graph, 4, rng_seed=5)
    labels = list(dataset.labels)
    labels[0] = RegionLabel(labels[0].abnormal[:-1], labels[0].n)
    relabelled = Dataset(dataset.fields, labels, dataset.graph_checksum, dataset.splits)
    assert relabelled.checksum() != dataset.checksum()


def test_gen_dataset_draws_are_valid(small_graph):
    dataset = gen_dataset(small_graph, 20, (0.05, 0.3), rng_seed=2)
    assert dataset.fields.shape == (20, small_graph.size)
    assert set(np.unique(dataset.fields)) <= {0.15, 0.5}
    for theta, label in zip(dataset.fields, dataset.labels):
        assert np.array_equal(np.nonzero(theta == 0.5)[0], label.abnormal)
        assert 0.05 - 1e-9 <= label.fraction <= 0.3 + 1.0 / small_graph.size
        assert _is_connected(small_graph, label.abnormal)


def test_gen_dataset_single_draw(small_graph):
    dataset = gen_dataset(small_graph, 1, rng_seed=0)
    assert len(dataset) == 1
    assert dataset.splits.tolist() == ['train']


def test_split_tags_proportions():
    tags = split_tags(100)
    assert [int(np.sum(tags == name)) for name in ('train', 'val', 'test')] == [70, 15, 15]


def test_otsu_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(5):
        theta = np.concatenate([rng.normal(0.2, 0.05, 150), rng.normal(0.6, 0.1, 60)])
        assert otsu_region(theta) == _exhaustive_otsu_region(theta)


def test_otsu_separates_two_levels():
    theta = np.array([0.15] * 30 + [0.5] * 10)
    assert otsu_region(theta) == set(range(30, 40))
    assert 0.15 < otsu_threshold(theta) <= 0.5


def test_otsu_shift_invariant():
    theta = np.random.default_rng(3).random(80)
    assert otsu_region(theta) == otsu_region(theta + 2.0)


def test_otsu_degenerate_field():
    assert otsu_region(np.full(10, 0.3)) == set()
    with pytest.raises(ValueError, match='degenerate'):
        otsu_threshold(np.full(10, 0.3))


def test_dice_values():
    assert dice({1, 2}, {1, 2}) == 1.0
    assert dice({1, 2}, {3}) == 0.0
    assert dice({1, 2, 3}, {2, 3, 4}) == pytest.approx(2 / 3)
    assert dice(set(), set()) == 1.0


def test_sse_value_and_mismatch():
    assert sse([0.0, 1.0], [1.0, 1.0]) == 1.0
    with pytest.raises(ValueError, match='mismatch'):
        sse([0.0], [0.0, 1.0])


def test_pca_full_rank_reconstructs_training_fields(small_graph):
    dataset = gen_dataset(small_graph, 20, rng_seed=4)
    model = pca_fit(dataset)
    train = dataset.split('train')[0]
    assert np.allclose(model.components.T @ model.components, np.eye(model.q), atol=1e-10)
    for theta in train:
        assert np.allclose(pca_reconstruct(model, theta, model.q), theta, atol=1e-10)
    assert np.allclose(pca_reconstruct(model, train[0], 0), model.mean)


def test_pca_error_non_increasing_in_q(small_graph):
    dataset = gen_dataset(small_graph, 30, rng_seed=5)
    model = pca_fit(dataset)
    theta = dataset.split('test')[0][0]
    errors = [sse(pca_reconstruct(model, theta, q), theta) for q in range(model.q + 1)]
    assert all(b <= a + 1e-10 for a, b in zip(errors, errors[1:]))
    with pytest.raises(ValueError):
        pca_reconstruct(model, theta, model.q + 1)
