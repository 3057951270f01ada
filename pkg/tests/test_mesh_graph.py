import math

import numpy as np
import pytest

from errors import GeometryError
from mesh_graph import (AssignmentMatrix, build_hierarchy, build_knn_graph, coarsen, load_point_cloud, pool,
                        shell_point_cloud, unpool)


def _edge_set(graph):
    return {tuple(e) for e in graph.edges.tolist()}


def _grid(nx, ny):
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing='ij')
    return np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)


def test_two_points_single_symmetric_pair():
    graph = build_knn_graph(np.array([[0.0, 0, 0], [1.0, 0, 0]]), k=1)
    assert _edge_set(graph) == {(0, 1), (1, 0)}
    assert graph.degrees().tolist() == [1, 1]


def test_knn_matches_brute_force(cube_points):
    k = 3
    graph = build_knn_graph(cube_points, k=k)
    expected = set()
    n = cube_points.shape[0]
    for i in range(n):
        dists = sorted((np.linalg.norm(cube_points[i] - cube_points[j]), j) for j in range(n) if j != i)
        for _, j in dists[:k]:
            expected.add((i, j))
            expected.add((j, i))
    assert _edge_set(graph) == expected
    assert np.all(graph.degrees() >= k)


def test_distance_tie_goes_to_lower_index():
    # vertex 1 is equidistant from 0 and 2; nothing else links 0 and 1
    points = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [-0.5, 0, 0]])
    graph = build_knn_graph(points, k=1)
    assert (1, 0) in _edge_set(graph)
    assert _edge_set(graph) == {(0, 1), (1, 0), (0, 3), (3, 0), (1, 2), (2, 1)}


def test_duplicate_points_name_indices():
    points = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]])
    with pytest.raises(GeometryError, match='0/2'):
        build_knn_graph(points, k=1)


@pytest.mark.parametrize('k', [0, 3, 5])
def test_k_out_of_range(k):
    with pytest.raises(GeometryError):
        build_knn_graph(np.random.default_rng(1).random((3, 3)), k=k)


def test_pseudo_coordinates_extremal_offset():
    graph = build_knn_graph(np.array([[0.0, 0, 0], [2.0, 0, 0]]), k=1)
    forward = graph.pseudo[graph.edges.tolist().index([0, 1])]
    assert forward.tolist() == [1.0, 0.5, 0.5]


def test_pseudo_coordinates_range_and_reflection(shell_graph):
    pseudo = shell_graph.pseudo
    assert np.all((pseudo >= 0.0) & (pseudo <= 1.0))
    index = {edge: row for row, edge in enumerate(map(tuple, shell_graph.edges.tolist()))}
    for (i, j), row in index.items():
        assert np.allclose(pseudo[index[(j, i)]], 1.0 - pseudo[row], atol=1e-12)


def test_adjacency_symmetric(shell_graph):
    adj = shell_graph.adjacency()
    assert (adj != adj.T).nnz == 0


def test_coarsen_two_vertices():
    graph = build_knn_graph(np.array([[0.0, 0, 0], [1.0, 0, 0]]), k=1)
    coarse, assignment = coarsen(graph)
    assert coarse.size == 1
    assert assignment.to_dense().tolist() == [[1], [1]]


def test_coarsen_cycle_halves():
    angles = 2 * math.pi * np.arange(8) / 8
    points = np.stack([np.cos(angles), np.sin(angles), np.zeros(8)], axis=1)
    graph = build_knn_graph(points, k=2)
    coarse, assignment = coarsen(graph)
    assert coarse.size == 4
    assert assignment.cluster_sizes().tolist() == [2, 2, 2, 2]


def test_coarsen_size_bound_and_partition(shell_graph):
    hierarchy = build_hierarchy(shell_graph, 3)
    for graph, assignment in hierarchy.levels:
        dense = assignment.to_dense()
        assert np.all(dense.sum(axis=1) == 1)
        assert np.all(dense.sum(axis=0) >= 1)
        n_coarse = assignment.shape[1]
        assert math.ceil(graph.size / 2) <= n_coarse <= graph.size - 1
    assert list(hierarchy.sizes) == sorted(hierarchy.sizes, reverse=True)
    assert len(set(hierarchy.sizes)) == len(hierarchy.sizes)


def test_hierarchy_depth_zero_is_identity(small_graph):
    hierarchy = build_hierarchy(small_graph, 0)
    assert hierarchy.depth == 0
    assert hierarchy.graphs[0] is small_graph


def test_grid_hierarchy_sizes():
    hierarchy = build_hierarchy(build_knn_graph(_grid(4, 4), k=4), 2)
    assert hierarchy.sizes[0] == 16
    for fine, coarse in zip(hierarchy.sizes, hierarchy.sizes[1:]):
        assert math.ceil(fine / 2) <= coarse <= fine - 1


def test_depth_beyond_halving_bound():
    graph = build_knn_graph(_grid(4, 4), k=4)
    with pytest.raises(GeometryError, match='achievable depth'):
        build_hierarchy(graph, 16)


def test_hierarchy_is_deterministic():
    points = shell_point_cloud(120, seed=3)
    a = build_hierarchy(build_knn_graph(points, 6), 3)
    b = build_hierarchy(build_knn_graph(points.copy(), 6), 3)
    assert a.checksum() == b.checksum()


def test_pool_two_members():
    assignment = AssignmentMatrix(np.array([0, 0]), 1)
    assert pool(assignment, np.array([[1.0], [3.0]])).tolist() == [[2.0]]
    assert unpool(assignment, np.array([[2.0]])).tolist() == [[2.0], [2.0]]


def test_pool_matches_cluster_loop():
    rng = np.random.default_rng(5)
    cluster = np.concatenate([np.arange(6), rng.integers(0, 6, 14)])
    assignment = AssignmentMatrix(cluster, 6)
    features = rng.normal(size=(20, 3))
    expected = np.stack([features[cluster == c].mean(axis=0) for c in range(6)])
    assert np.allclose(pool(assignment, features), expected, atol=1e-14)


def test_pool_unpool_fix_constants(small_hierarchy):
    assignment = small_hierarchy.assignments[0]
    constant = np.full((assignment.shape[0], 2), 0.7)
    assert np.allclose(pool(assignment, constant), 0.7)
    assert np.allclose(unpool(assignment, pool(assignment, constant)), constant)
    coarse = np.random.default_rng(2).normal(size=(assignment.shape[1], 2))
    assert np.allclose(pool(assignment, unpool(assignment, coarse)), coarse)


def test_pool_dimension_mismatch(small_hierarchy):
    with pytest.raises(GeometryError):
        pool(small_hierarchy.assignments[0], np.zeros((3, 1)))


def test_assignment_rejects_empty_cluster():
    with pytest.raises(GeometryError, match='empty cluster'):
        AssignmentMatrix(np.array([0, 0, 2, 2]), 3)


def test_shell_point_cloud_deterministic():
    a = shell_point_cloud(200, seed=4)
    b = shell_point_cloud(200, seed=4)
    assert a.shape == (200, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, shell_point_cloud(200, seed=5))


def test_missing_point_cloud_names_path(tmp_path):
    path = tmp_path / 'absent.csv'
    with pytest.raises(GeometryError, match='absent.csv'):
        load_point_cloud(str(path))
