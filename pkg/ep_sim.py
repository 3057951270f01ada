"""Aliev-Panfilov excitation on a mesh graph and linear surface measurements."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
from scipy.spatial.transform import Rotation

from errors import GeometryError, SimulationError
from mesh_graph import fibonacci_sphere

logger = logging.getLogger(__name__)

THETA_HEALTHY = 0.15
THETA_ABNORMAL = 0.5


@dataclass(frozen=True)
class ApParams:
    c: float = 8.0
    e0: float = 0.002
    mu1: float = 0.2
    mu2: float = 0.3
    d_coeff: float = 1.0
    dt: float = 0.1
    t_end: float = 120.0
    record_stride: int = 10

    def __post_init__(self):
        values = (self.c, self.e0, self.mu1, self.mu2, self.d_coeff, self.dt, self.t_end)
        if not all(math.isfinite(v) for v in values):
            raise ValueError('simulation parameters must be finite')
        if self.dt <= 0 or self.t_end < self.dt:
            raise ValueError(f'need dt > 0 and t_end >= dt (dt={self.dt}, t_end={self.t_end})')
        if self.d_coeff < 0:
            raise ValueError('diffusion coefficient must be non-negative')
        if self.record_stride < 1:
            raise ValueError('record_stride must be at least 1')

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))

    @property
    def dt_frame(self):
        return self.dt * self.record_stride


@dataclass(frozen=True, eq=False)
class ExcitabilityField:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 1:
            raise ValueError('excitability field must be a vector')
        if np.any(theta < 0.0) or np.any(theta > 1.0) or not np.all(np.isfinite(theta)):
            raise ValueError('excitability values must lie in [0, 1]')
        object.__setattr__(self, 'theta', theta)

    def __len__(self):
        return self.theta.shape[0]


@dataclass(frozen=True, eq=False)
class SimState:
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def rest(cls, n):
        return cls(np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class StimulusProtocol:
    sites: tuple = (0,)
    t_on: float = 0.0
    t_off: float = 1.0
    amplitude: float = 1.0

    def validate(self, n, t_end):
        if not self.sites:
            raise ValueError('stimulus needs at least one site')
        if min(self.sites) < 0 or max(self.sites) >= n:
            raise ValueError(f'stimulus sites must lie in [0, {n})')
        if not self.t_on < self.t_off <= t_end:
            raise ValueError('stimulus window must satisfy t_on < t_off <= t_end')

    def current(self, n, t):
        out = np.zeros(n)
        if self.t_on <= t < self.t_off:
            out[list(self.sites)] = self.amplitude
        return out


def stimulus_sites(graph, sites, hops=0):
    """Sites plus every vertex within `hops` graph edges of one, ascending."""
    if hops < 0:
        raise ValueError('stimulus neighborhood must be non-negative')
    if sites and (min(sites) < 0 or max(sites) >= graph.size):
        raise ValueError(f'stimulus sites must lie in [0, {graph.size})')
    reached = np.zeros(graph.size, dtype=bool)
    reached[list(sites)] = True
    adj = graph.adjacency()
    for _ in range(hops):
        reached |= (adj @ reached.astype(np.int8)) > 0
    return tuple(np.flatnonzero(reached).tolist())


@dataclass(frozen=True, eq=False)
class LeadField:
    h: np.ndarray  # (L, N)
    electrodes: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.h.ndim != 2 or self.h.shape[0] < 1 or not np.all(np.isfinite(self.h)):
            raise ValueError('lead field must be a finite (L >= 1, N) matrix')

    @property
    def n_channels(self):
        return self.h.shape[0]

    def subsample(self, stride):
        """Keep every stride-th channel."""
        electrodes = None if self.electrodes is None else self.electrodes[::stride]
        return LeadField(self.h[::stride], electrodes)


@dataclass(frozen=True, eq=False)
class MeasurementSeries:
    frames: np.ndarray  # (L, T)
    dt_frame: float
    snr_db: float = None


def _theta_vector(theta, n=None):
    if isinstance(theta, ExcitabilityField):
        theta = theta.theta
    theta = np.asarray(theta, dtype=np.float64)
    if n is not None and theta.shape != (n,):
        raise ValueError(f'excitability field has length {theta.shape[0]}, graph has {n} vertices')
    return theta


def graph_laplacian(graph, d_coeff):
    """Row-normalized inverse-square-distance graph Laplacian with zero row sums."""
    n = graph.size
    if graph.n_components() > 1:
        logger.warning('graph is disconnected; waves cannot cross components')
    rows, cols = graph.edges[:, 0], graph.edges[:, 1]
    w = 1.0 / graph.edge_lengths() ** 2
    global_mean = w.mean()
    row_mean = np.bincount(rows, weights=w, minlength=n) / np.maximum(graph.degrees(), 1)
    off = d_coeff * global_mean * w / row_mean[rows]
    lap = scipy.sparse.csr_matrix((off, (rows, cols)), shape=(n, n))
    diagonal = -np.asarray(lap.sum(axis=1)).reshape(-1)
    return (lap + scipy.sparse.diags(diagonal)).tocsr()


def step(state, theta, params, lap, stim, t):
    """One explicit Euler step of the two-variable model."""
    u, v = state.u, state.v
    theta = _theta_vector(theta, u.shape[0])
    current = stim.current(u.shape[0], t) if stim is not None else 0.0
    du = lap @ u - params.c * u * (u - theta) * (u - 1.0) - u * v + current
    eps = params.e0 + params.mu1 * v / (u + params.mu2)
    dv = eps * (-v - params.c * u * (u - theta - 1.0))
    u_next = u + params.dt * du
    v_next = v + params.dt * dv
    if not (np.all(np.isfinite(u_next)) and np.all(np.isfinite(v_next))):
        raise SimulationError(f'instability at t={t:.3f}; reduce dt')
    return SimState(u_next, v_next)


def simulate(graph, theta, params, stim, lap=None):
    """Potential history (N, T) from rest, one frame every record_stride steps."""
    n = graph.size
    theta = _theta_vector(theta, n)
    stim.validate(n, params.t_end)
    if lap is None:
        lap = graph_laplacian(graph, params.d_coeff)
    state = SimState.rest(n)
    frames = []
    for index in range(params.n_steps):
        state = step(state, theta, params, lap, stim, index * params.dt)
        if (index + 1) % params.record_stride == 0:
            frames.append(state.u)
    if not frames:
        frames.append(state.u)
    return np.stack(frames, axis=1)


def activation_times(history, dt_frame, threshold=0.5):
    """First frame time with u above threshold per vertex, inf when never reached."""
    above = history > threshold
    first = np.argmax(above, axis=1).astype(np.float64)
    times = (first + 1) * dt_frame
    times[~above.any(axis=1)] = np.inf
    return times


def synth_lead_field(graph, n_channels, seed=0):
    """Inverse-distance lead field to electrodes on a sphere twice the cloud radius."""
    if n_channels < 1:
        raise GeometryError('need at least one measurement channel')
    centroid = graph.positions.mean(axis=0)
    radius = np.max(np.linalg.norm(graph.positions - centroid, axis=1))
    rotation = Rotation.random(random_state=seed)
    electrodes = centroid + 2.0 * radius * rotation.apply(fibonacci_sphere(n_channels))
    distance = np.linalg.norm(electrodes[:, None, :] - graph.positions[None, :, :], axis=2)
    h = 1.0 / distance
    h -= h.mean(axis=1, keepdims=True)
    return LeadField(h, electrodes)


def measure(lead_field, history, snr_db=None, seed=0, dt_frame=1.0):
    h = lead_field.h if isinstance(lead_field, LeadField) else np.asarray(lead_field)
    if h.shape[1] != history.shape[0]:
        raise ValueError(f'lead field has {h.shape[1]} columns, history has {history.shape[0]} rows')
    frames = h @ history
    if snr_db is not None:
        power = np.mean(frames ** 2)
        sigma = math.sqrt(power * 10.0 ** (-snr_db / 10.0))
        rng = np.random.default_rng(seed)
        frames = frames + sigma * rng.standard_normal(frames.shape)
    return MeasurementSeries(frames, dt_frame, snr_db)
