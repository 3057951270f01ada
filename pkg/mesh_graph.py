"""Geometric graphs over point clouds and their Graclus-style coarsening ladder."""
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from errors import GeometryError

logger = logging.getLogger(__name__)

DEFAULT_K = 6


@dataclass(frozen=True, eq=False)
class MeshGraph:
    positions: np.ndarray  # (N, 3)
    edges: np.ndarray  # (E, 2) rows (i, j), lexicographically sorted
    pseudo: np.ndarray = field(default=None)  # (E, 3) in [0, 1]
    k: int = DEFAULT_K

    @property
    def size(self):
        return self.positions.shape[0]

    @property
    def n_edges(self):
        return self.edges.shape[0]

    def adjacency(self):
        n = self.size
        data = np.ones(self.n_edges, dtype=np.int8)
        return scipy.sparse.csr_matrix((data, (self.edges[:, 0], self.edges[:, 1])), shape=(n, n))

    def degrees(self):
        return np.bincount(self.edges[:, 0], minlength=self.size)

    def neighbors(self):
        """Neighbor lists in ascending index order."""
        adj = self.adjacency()
        return [adj.indices[adj.indptr[i]:adj.indptr[i + 1]].tolist() for i in range(self.size)]

    def edge_lengths(self):
        delta = self.positions[self.edges[:, 1]] - self.positions[self.edges[:, 0]]
        return np.linalg.norm(delta, axis=1)

    def n_components(self):
        count, _ = connected_components(self.adjacency(), directed=False)
        return count

    def checksum(self):
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.positions, dtype='<f8').tobytes())
        digest.update(np.ascontiguousarray(self.edges, dtype='<i8').tobytes())
        digest.update(str(self.k).encode())
        return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class AssignmentMatrix:
    """One-hot fine-to-coarse membership, stored as a cluster index per fine vertex."""

    cluster: np.ndarray  # (N1,) coarse index of each fine vertex
    n_coarse: int

    def __post_init__(self):
        if self.cluster.ndim != 1 or self.n_coarse >= self.cluster.shape[0]:
            raise GeometryError('assignment must map N1 vertices onto fewer than N1 clusters')
        if np.any(np.bincount(self.cluster, minlength=self.n_coarse) == 0):
            raise GeometryError('assignment has an empty cluster')

    @property
    def shape(self):
        return (self.cluster.shape[0], self.n_coarse)

    def to_sparse(self):
        n_fine = self.cluster.shape[0]
        return scipy.sparse.csr_matrix(
            (np.ones(n_fine), (np.arange(n_fine), self.cluster)), shape=self.shape)

    def to_dense(self):
        return self.to_sparse().toarray().astype(np.uint8)

    def cluster_sizes(self):
        return np.bincount(self.cluster, minlength=self.n_coarse)

    def normalized(self):
        """P with each column divided by its sum."""
        p = self.to_sparse()
        return p @ scipy.sparse.diags(1.0 / self.cluster_sizes())

    @classmethod
    def from_dense(cls, matrix):
        matrix = np.asarray(matrix)
        if np.any(matrix.sum(axis=1) != 1) or not np.isin(matrix, (0, 1)).all():
            raise GeometryError('assignment rows must be one-hot')
        return cls(np.argmax(matrix, axis=1).astype(np.int64), matrix.shape[1])


@dataclass(frozen=True, eq=False)
class CoarseningHierarchy:
    graphs: tuple  # MeshGraph per level, finest first
    assignments: tuple  # AssignmentMatrix between level l and l + 1

    @property
    def depth(self):
        return len(self.assignments)

    @property
    def sizes(self):
        return tuple(g.size for g in self.graphs)

    @property
    def levels(self):
        return list(zip(self.graphs, self.assignments))

    def checksum(self):
        digest = hashlib.sha256()
        for graph in self.graphs:
            digest.update(graph.checksum().encode())
        for assignment in self.assignments:
            digest.update(np.ascontiguousarray(assignment.cluster, dtype='<i8').tobytes())
        return digest.hexdigest()


def _check_points(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise GeometryError(f'expected an (N, 3) point array, got shape {points.shape}')
    if not np.all(np.isfinite(points)):
        raise GeometryError('point coordinates must be finite')
    return points


def _find_duplicates(points):
    _, first, inverse = np.unique(points, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    clashes = np.nonzero(first[inverse] != np.arange(points.shape[0]))[0]
    return [(int(first[inverse[i]]), int(i)) for i in clashes]


def build_knn_graph(points, k=DEFAULT_K):
    """Symmetrized k-nearest-neighbour graph; distance ties go to the lower index."""
    points = _check_points(points)
    n = points.shape[0]
    if n < 2:
        raise GeometryError('need at least 2 points')
    if k < 1 or k >= n:
        raise GeometryError(f'k must satisfy 1 <= k < N (k={k}, N={n})')
    duplicates = _find_duplicates(points)
    if duplicates:
        shown = ', '.join(f'{a}/{b}' for a, b in duplicates[:5])
        raise GeometryError(f'duplicate points at indices {shown}')

    dist = cdist(points, points)
    np.fill_diagonal(dist, np.inf)
    # stable sort keeps the lower index first among equal distances
    nearest = np.argsort(dist, axis=1, kind='stable')[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = nearest.reshape(-1)
    edges = _symmetric_edges(rows, cols, n)
    graph = MeshGraph(points, edges, None, k)
    logger.debug('k-NN graph: %d vertices, %d directed edges, k=%d', n, edges.shape[0], k)
    return compute_pseudo_coords(graph)


def _symmetric_edges(rows, cols, n):
    adj = scipy.sparse.coo_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n)).tocsr()
    adj = ((adj + adj.T) > 0).tocoo()
    edges = np.stack([adj.row, adj.col], axis=1).astype(np.int64)
    edges = edges[edges[:, 0] != edges[:, 1]]
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


def compute_pseudo_coords(graph):
    """Affine map of edge offsets into [0, 1]^3 using one scale per graph."""
    if graph.n_edges == 0:
        return MeshGraph(graph.positions, graph.edges, np.zeros((0, 3)), graph.k)
    delta = graph.positions[graph.edges[:, 1]] - graph.positions[graph.edges[:, 0]]
    scale = np.max(np.abs(delta))
    if scale == 0.0:
        raise GeometryError('all edge offsets are zero; points coincide')
    pseudo = np.clip(delta / (2.0 * scale) + 0.5, 0.0, 1.0)
    return MeshGraph(graph.positions, graph.edges, pseudo, graph.k)


def edge_weights(graph):
    return 1.0 / graph.edge_lengths()


def coarsen(graph):
    """One level of greedy normalized-cut matching, vertices visited in index order."""
    n = graph.size
    if n < 2:
        raise GeometryError('cannot coarsen a single-vertex graph')
    weights = edge_weights(graph)
    adj = scipy.sparse.csr_matrix((weights, (graph.edges[:, 0], graph.edges[:, 1])), shape=(n, n))
    degree = np.asarray(adj.sum(axis=1)).reshape(-1)

    cluster = np.full(n, -1, dtype=np.int64)
    n_clusters = 0
    for i in range(n):
        if cluster[i] >= 0:
            continue
        start, stop = adj.indptr[i], adj.indptr[i + 1]
        best, best_score = -1, 0.0
        for j, w in zip(adj.indices[start:stop], adj.data[start:stop]):
            if cluster[j] >= 0:
                continue
            score = w * (1.0 / degree[i] + 1.0 / degree[j])
            if score > best_score:
                best, best_score = j, score
        cluster[i] = n_clusters
        if best >= 0:
            cluster[best] = n_clusters
        n_clusters += 1

    if n_clusters == n:
        raise GeometryError('graph has no edges to contract')
    assignment = AssignmentMatrix(cluster, n_clusters)

    p = assignment.to_sparse()
    positions = (assignment.normalized().T @ graph.positions)
    coarse_adj = (p.T @ graph.adjacency().astype(np.float64) @ p).tocoo()
    keep = coarse_adj.row != coarse_adj.col
    edges = np.stack([coarse_adj.row[keep], coarse_adj.col[keep]], axis=1).astype(np.int64)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    coarse = compute_pseudo_coords(MeshGraph(np.asarray(positions), edges, None, graph.k))
    return coarse, assignment


def build_hierarchy(graph, depth):
    if depth < 0:
        raise GeometryError('depth must be non-negative')
    graphs, assignments = [graph], []
    for level in range(depth):
        current = graphs[-1]
        if current.size < 2:
            raise GeometryError(
                f'graph collapses to one vertex; achievable depth is {level}, requested {depth}')
        try:
            coarse, assignment = coarsen(current)
        except GeometryError as exc:
            raise GeometryError(f'{exc}; achievable depth is {level}, requested {depth}') from exc
        graphs.append(coarse)
        assignments.append(assignment)
    hierarchy = CoarseningHierarchy(tuple(graphs), tuple(assignments))
    logger.info('coarsening hierarchy sizes %s', hierarchy.sizes)
    return hierarchy


def pool(assignment, features):
    """Cluster-average pooling P_n^T F."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != assignment.shape[0]:
        raise GeometryError(
            f'feature rows {features.shape[0]} do not match assignment rows {assignment.shape[0]}')
    return np.asarray(assignment.normalized().T @ features)


def unpool(assignment, coarse_features):
    """Broadcast every cluster value back to its members, P F_c."""
    coarse_features = np.asarray(coarse_features, dtype=np.float64)
    if coarse_features.shape[0] != assignment.shape[1]:
        raise GeometryError(
            f'feature rows {coarse_features.shape[0]} do not match assignment columns {assignment.shape[1]}')
    return np.asarray(assignment.to_sparse() @ coarse_features)


def fibonacci_sphere(n):
    """Near-uniform unit vectors on a golden-angle spiral."""
    index = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * index / n)
    azimuth = math.pi * (1.0 + 5.0 ** 0.5) * index
    return np.stack([np.cos(azimuth) * np.sin(polar),
                     np.sin(azimuth) * np.sin(polar),
                     np.cos(polar)], axis=1)


def shell_point_cloud(n, axes=(1.0, 1.0, 1.6), thickness=0.15, spacing=1.0, seed=0):
    """Ellipsoidal shell sampled on a Fibonacci lattice with seeded depth inside the wall.

    The cloud is scaled so that the outer surface area per point is about spacing**2.
    """
    if n < 4:
        raise GeometryError('shell needs at least 4 vertices')
    rng = np.random.default_rng(seed)
    unit = fibonacci_sphere(n)
    axes = np.asarray(axes, dtype=np.float64)
    # Knud Thomsen's approximation of the ellipsoid surface area
    p = 1.6075
    a, b, c = axes
    area = 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)
    scale = spacing * math.sqrt(n / area)
    depth = 1.0 - thickness * rng.random(n)
    return unit * axes * scale * depth[:, None]


def load_point_cloud(path):
    try:
        points = np.loadtxt(path, delimiter=',', ndmin=2)
    except OSError as exc:
        raise GeometryError(f'cannot read point cloud {path}: {exc}') from exc
    return _check_points(points)
