"""Region-grown excitability datasets, segmentation metrics and the PCA baseline."""
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ep_sim import THETA_ABNORMAL, THETA_HEALTHY, ExcitabilityField
from errors import GeometryError

logger = logging.getLogger(__name__)

FRACTION_RANGE = (0.02, 0.40)
SPLITS = ('train', 'val', 'test')
OTSU_BINS = 256


@dataclass(frozen=True, eq=False)
class RegionLabel:
    abnormal: np.ndarray  # sorted vertex indices
    n: int

    @property
    def fraction(self):
        return self.abnormal.shape[0] / self.n

    def as_set(self):
        return set(self.abnormal.tolist())

    def mask(self):
        out = np.zeros(self.n, dtype=bool)
        out[self.abnormal] = True
        return out


@dataclass(frozen=True, eq=False)
class Dataset:
    fields: np.ndarray  # (count, N)
    labels: list
    graph_checksum: str
    splits: np.ndarray  # split tag per draw
    theta_healthy: float = THETA_HEALTHY
    theta_abnormal: float = THETA_ABNORMAL

    def __len__(self):
        return self.fields.shape[0]

    def split(self, name):
        index = np.nonzero(self.splits == name)[0]
        return self.fields[index], [self.labels[i] for i in index]

    def checksum(self):
        digest = hashlib.sha256()
        digest.update(self.graph_checksum.encode())
        digest.update(np.ascontiguousarray(self.fields, dtype='<f8').tobytes())
        digest.update(','.join(self.splits.tolist()).encode())
        for label in self.labels:
            digest.update(np.ascontiguousarray(label.abnormal, dtype='<i8').tobytes())
            digest.update(b';')
        return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (N, q_max), orthonormal columns

    @property
    def q(self):
        return self.components.shape[1]


def grow_region(graph, seed_vertex, target_fraction, rng_seed, neighbors=None):
    """Connected region grown by absorbing uniformly drawn frontier vertices."""
    n = graph.size
    if not 1.0 / n - 1e-12 <= target_fraction <= 1.0:
        raise ValueError(f'target fraction {target_fraction} outside [1/N, 1]')
    target = min(n, math.ceil(target_fraction * n - 1e-9))
    if neighbors is None:
        neighbors = graph.neighbors()
    rng = np.random.default_rng(rng_seed)

    region = {int(seed_vertex)}
    frontier = []
    in_frontier = set()

    def extend(vertex):
        for j in neighbors[vertex]:
            if j not in region and j not in in_frontier:
                in_frontier.add(j)
                frontier.append(j)

    extend(int(seed_vertex))
    while len(region) < target:
        if not frontier:
            raise GeometryError(
                f'region stalled at {len(region)} of {target} vertices; graph is disconnected')
        pick = int(rng.integers(len(frontier)))
        frontier[pick], frontier[-1] = frontier[-1], frontier[pick]
        vertex = frontier.pop()
        in_frontier.discard(vertex)
        region.add(vertex)
        extend(vertex)
    return RegionLabel(np.array(sorted(region), dtype=np.int64), n)


def make_field(label, theta_healthy=THETA_HEALTHY, theta_abnormal=THETA_ABNORMAL, n=None):
    n = label.n if n is None else n
    theta = np.full(n, float(theta_healthy))
    theta[label.abnormal] = theta_abnormal
    return ExcitabilityField(theta)


def split_tags(count):
    n_train = int(round(0.70 * count))
    n_val = int(round(0.15 * count))
    n_train = min(n_train, count)
    n_val = min(n_val, count - n_train)
    tags = ['train'] * n_train + ['val'] * n_val + ['test'] * (count - n_train - n_val)
    return np.array(tags)


def _draw(graph, neighbors, fraction_range, rng_seed, index, theta_healthy, theta_abnormal):
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, index]))
    seed_vertex = int(rng.integers(graph.size))
    low = max(fraction_range[0], 1.0 / graph.size)
    fraction = float(rng.uniform(low, fraction_range[1]))
    label = grow_region(graph, seed_vertex, fraction, rng.integers(2 ** 63), neighbors)
    return make_field(label, theta_healthy, theta_abnormal).theta, label


def gen_dataset(graph, count, fraction_range=FRACTION_RANGE, rng_seed=0, jobs=1,
                theta_healthy=THETA_HEALTHY, theta_abnormal=THETA_ABNORMAL):
    """count region-grown fields; draw i depends only on (rng_seed, i)."""
    if count < 1:
        raise ValueError('dataset needs at least one draw')
    if not 0.0 < fraction_range[0] <= fraction_range[1] <= 1.0:
        raise ValueError(f'bad fraction range {fraction_range}')
    neighbors = graph.neighbors()

    def draw(index):
        return _draw(graph, neighbors, fraction_range, rng_seed, index, theta_healthy, theta_abnormal)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            draws = list(pool.map(draw, range(count)))
    else:
        draws = [draw(i) for i in range(count)]
    fields = np.stack([d[0] for d in draws])
    labels = [d[1] for d in draws]
    logger.info('generated %d fields on %d vertices', count, graph.size)
    return Dataset(fields, labels, graph.checksum(), split_tags(count), theta_healthy, theta_abnormal)


def _between_class_variance(theta, edges):
    counts, _ = np.histogram(theta, bins=edges)
    sums, _ = np.histogram(theta, bins=edges, weights=theta)
    w0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    total_n, total_s = counts.sum(), sums.sum()
    w1 = total_n - w0
    s1 = total_s - s0
    with np.errstate(divide='ignore', invalid='ignore'):
        score = w0 * w1 * (s0 / w0 - s1 / w1) ** 2
    return np.where((w0 > 0) & (w1 > 0), score, -np.inf)


def otsu_threshold(theta, bins=OTSU_BINS):
    """Bin boundary maximizing between-class variance; ties resolve to the lower boundary."""
    theta = np.asarray(theta, dtype=np.float64)
    low, high = theta.min(), theta.max()
    if low == high:
        raise ValueError('degenerate field: all values equal')
    edges = np.linspace(low, high, bins + 1)
    score = _between_class_variance(theta, edges)
    return float(edges[1 + int(np.argmax(score))])


def otsu_region(theta):
    """Abnormal vertex set (values at or above the Otsu threshold)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.min() == theta.max():
        return set()
    return set(np.nonzero(theta >= otsu_threshold(theta))[0].tolist())


def dice(a, b):
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def sse(estimate, truth):
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError(f'length mismatch: {estimate.shape} vs {truth.shape}')
    return float(np.sum((estimate - truth) ** 2))


def pca_fit(dataset):
    """Mean and principal axes of the training fields via SVD of the centered data."""
    fields = dataset.split('train')[0] if isinstance(dataset, Dataset) else np.asarray(dataset)
    if fields.shape[0] == 0:
        raise ValueError('PCA needs at least one training field')
    mean = fields.mean(axis=0)
    _, _, vt = np.linalg.svd(fields - mean, full_matrices=False)
    return PcaModel(mean, vt.T)


def pca_reconstruct(model, theta, q):
    if q < 0 or q > model.q:
        raise ValueError(f'q={q} exceeds the available {model.q} components')
    basis = model.components[:, :q]
    centered = np.asarray(theta, dtype=np.float64) - model.mean
    return model.mean + basis @ (basis.T @ centered)
