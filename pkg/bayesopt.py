"""Gaussian-process surrogate, expected improvement and the latent-space optimization loop."""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from ep_sim import graph_laplacian, measure, simulate
from errors import GpFitError, SimulationError

logger = logging.getLogger(__name__)

SENTINEL = -1e12
LENGTHSCALE_BOUNDS = (1e-2, 1e2)
AMPLITUDE_BOUNDS = (1e-4, 1e4)
JITTER = 1e-8
MAX_JITTER = 1e-4
SIGMA_FLOOR = 1e-12
SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True, eq=False)
class GpHyperparams:
    lengthscales: np.ndarray
    amplitude: float
    noise: float

    def __post_init__(self):
        lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        if np.any(lengthscales <= 0) or self.amplitude <= 0 or self.noise <= 0:
            raise ValueError('GP hyperparameters must be strictly positive')
        object.__setattr__(self, 'lengthscales', lengthscales)

    def to_log(self):
        return np.concatenate([np.log(self.lengthscales), [math.log(self.amplitude)]])

    @classmethod
    def from_log(cls, x, noise):
        return cls(np.exp(x[:-1]), float(np.exp(x[-1])), noise)


def _scaled_sqdiff(a, b, lengthscales):
    """Per-dimension (a_i - b_j)^2 / l^2, shape (n_a, n_b, q)."""
    return ((a[:, None, :] - b[None, :, :]) / lengthscales) ** 2


def _matern_from_sqdist(r2, amplitude):
    r = np.sqrt(r2)
    return amplitude * (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * np.exp(-SQRT5 * r)


def matern52(z1, z2, hyp):
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError('latent points must have equal length')
    r2 = float(np.sum(((z1 - z2) / hyp.lengthscales) ** 2))
    return float(_matern_from_sqdist(r2, hyp.amplitude))


def kernel_matrix(a, b, hyp):
    return _matern_from_sqdist(_scaled_sqdiff(a, b, hyp.lengthscales).sum(axis=-1), hyp.amplitude)


def _cholesky(matrix):
    """Lower Cholesky factor with diagonal jitter escalated from 1e-8 up to 1e-4."""
    jitter = JITTER
    eye = np.eye(matrix.shape[0])
    while jitter <= MAX_JITTER * (1 + 1e-9):
        try:
            return linalg.cholesky(matrix + jitter * eye, lower=True), jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise GpFitError('kernel matrix is not positive definite even with jitter 1e-4')


def log_marginal_likelihood(log_params, inputs, y, noise):
    """Log evidence of centered targets y and its gradient in (log l, log sigma_f^2)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    n, q = inputs.shape
    lengthscales = np.exp(log_params[:q])
    amplitude = float(np.exp(log_params[q]))
    d2 = _scaled_sqdiff(inputs, inputs, lengthscales)
    r2 = d2.sum(axis=-1)
    r = np.sqrt(r2)
    decay = np.exp(-SQRT5 * r)
    k0 = amplitude * (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * decay
    chol, _ = _cholesky(k0 + noise * np.eye(n))
    alpha = linalg.cho_solve((chol, True), y)
    value = -0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * n * math.log(2 * math.pi)

    inner = np.outer(alpha, alpha) - linalg.cho_solve((chol, True), np.eye(n))
    radial = amplitude * (5.0 / 3.0) * (1.0 + SQRT5 * r) * decay
    grad = np.empty(q + 1)
    for j in range(q):
        grad[j] = 0.5 * np.sum(inner * radial * d2[:, :, j])
    grad[q] = 0.5 * np.sum(inner * k0)
    return float(value), grad


@dataclass(eq=False)
class GpSurrogate:
    inputs: np.ndarray
    values: np.ndarray
    hyperparams: GpHyperparams
    center: float = 0.0
    chol: np.ndarray = None
    alpha: np.ndarray = None
    restarts: list = field(default_factory=list)  # (start, start_lml, end, end_lml)

    @classmethod
    def condition(cls, inputs, values, hyperparams, restarts=None):
        """Factorize K + noise I for fixed hyperparameters; values are centered by their mean."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        values = np.asarray(values, dtype=np.float64)
        center = float(values.mean())
        gram = kernel_matrix(inputs, inputs, hyperparams) + hyperparams.noise * np.eye(inputs.shape[0])
        chol, _ = _cholesky(gram)
        alpha = linalg.cho_solve((chol, True), values - center)
        return cls(inputs, values, hyperparams, center, chol, alpha, restarts or [])

    def predict(self, z):
        """Posterior mean and standard deviation at one point (q,) or many (m, q)."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z = np.atleast_2d(z)
        cross = kernel_matrix(z, self.inputs, self.hyperparams)
        mu = self.center + cross @ self.alpha
        v = linalg.solve_triangular(self.chol, cross.T, lower=True)
        var = np.maximum(self.hyperparams.amplitude - np.sum(v ** 2, axis=0), 0.0)
        sigma = np.sqrt(var)
        if single:
            return float(mu[0]), float(sigma[0])
        return mu, sigma


def _check_distinct(inputs):
    distance = np.sqrt(((inputs[:, None, :] - inputs[None, :, :]) ** 2).sum(axis=-1))
    np.fill_diagonal(distance, np.inf)
    if np.any(distance == 0.0):
        i, j = np.argwhere(distance == 0.0)[0]
        raise ValueError(f'duplicate GP inputs at rows {i} and {j}')


def default_hyperparams(inputs, values):
    q = np.asarray(inputs).shape[1]
    spread = float(np.var(values))
    return GpHyperparams(np.ones(q),
                         float(np.clip(spread, *AMPLITUDE_BOUNDS)) if spread > 0 else 1.0,
                         max(1e-6 * spread, 1e-10))


def gp_fit(inputs, values, init=None, n_restarts=5, rng_seed=0):
    """Multi-start L-BFGS-B ascent of the log marginal likelihood; noise stays fixed."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    values = np.asarray(values, dtype=np.float64)
    if inputs.shape[0] < 2 or inputs.shape[0] != values.shape[0]:
        raise ValueError('GP fit needs at least two (input, value) pairs of matching count')
    _check_distinct(inputs)
    init = init or default_hyperparams(inputs, values)
    q = inputs.shape[1]
    y = values - values.mean()
    bounds = [tuple(np.log(LENGTHSCALE_BOUNDS))] * q + [tuple(np.log(AMPLITUDE_BOUNDS))]
    low = np.array([b[0] for b in bounds])
    high = np.array([b[1] for b in bounds])
    rng = np.random.default_rng(rng_seed)
    starts = [np.clip(init.to_log(), low, high)]
    starts += [rng.uniform(low, high) for _ in range(max(n_restarts, 1) - 1)]

    def negative(x):
        try:
            value, grad = log_marginal_likelihood(x, inputs, y, init.noise)
        except GpFitError:
            return 1e25, np.zeros_like(x)
        return -value, -grad

    restarts = []
    best_x, best_value = None, -np.inf
    for start in starts:
        start_value = -negative(start)[0]
        result = minimize(negative, start, jac=True, method='L-BFGS-B', bounds=bounds)
        end, end_value = result.x, -float(result.fun)
        if end_value < start_value:
            end, end_value = start, start_value
        restarts.append((start, start_value, end, end_value))
        # strict comparison keeps the lowest restart index on ties
        if end_value > best_value:
            best_x, best_value = end, end_value
    if best_x is None or best_value <= -1e25:
        raise GpFitError('every GP restart failed to factorize')
    hyp = GpHyperparams.from_log(best_x, init.noise)
    logger.debug('GP fit: log evidence %.4f, lengthscales %s, amplitude %.4g',
                 best_value, np.array2string(hyp.lengthscales, precision=3), hyp.amplitude)
    return GpSurrogate.condition(inputs, values, hyp, restarts)


def gp_predict(gp, z):
    return gp.predict(z)


def expected_improvement(gp, z, f_plus):
    """EI for maximization; the sigma -> 0 limit is max(mu - f+, 0)."""
    mu, sigma = gp.predict(z)
    mu, sigma = np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
    delta = mu - f_plus
    safe = np.where(sigma > SIGMA_FLOOR, sigma, 1.0)
    u = delta / safe
    ei = np.where(sigma > SIGMA_FLOOR, delta * norm.cdf(u) + sigma * norm.pdf(u), np.maximum(delta, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def _pattern_search(score, start, low, high, tol, max_iter=2000):
    x = start.copy()
    fx = score(x)
    step = 0.25 * (high - low)
    for _ in range(max_iter):
        if np.max(step) < tol:
            break
        improved = False
        for d in range(x.shape[0]):
            for sign in (1.0, -1.0):
                candidate = x.copy()
                candidate[d] = np.clip(x[d] + sign * step[d], low[d], high[d])
                value = score(candidate)
                if value > fx:
                    x, fx, improved = candidate, value, True
                    break
        if not improved:
            step = step / 2.0
    return x, fx


def maximize_ei(gp, bounds, rng_seed=0, f_plus=None, n_samples=1024, n_refine=8, tol=1e-4):
    """Sobol screening of the box followed by compass-search refinement of the best few."""
    bounds = np.asarray(bounds, dtype=np.float64)
    low, high = bounds[:, 0], bounds[:, 1]
    if f_plus is None:
        f_plus = float(np.max(gp.values))
    sobol = qmc.Sobol(d=bounds.shape[0], scramble=True, seed=rng_seed)
    samples = qmc.scale(sobol.random(n_samples), low, high)
    screened = expected_improvement(gp, samples, f_plus)
    best_z = samples[int(np.argmax(screened))]
    best_ei = float(np.max(screened))
    for index in np.argsort(-screened, kind='stable')[:n_refine]:
        z, ei = _pattern_search(lambda x: expected_improvement(gp, x, f_plus), samples[index], low, high, tol)
        if ei > best_ei:
            best_z, best_ei = z, ei
    return best_z


class MeasurementObjective:
    """Negative squared misfit between measured and simulated surface signals of decode(z)."""

    def __init__(self, model, graph, params, stim, lead_field, measured, lap=None):
        self.model = model
        self.graph = graph
        self.params = params
        self.stim = stim
        self.lead_field = lead_field
        self.measured = measured.frames if hasattr(measured, 'frames') else np.asarray(measured)
        self.lap = lap if lap is not None else graph_laplacian(graph, params.d_coeff)

    def predict_measurements(self, theta):
        history = simulate(self.graph, theta, self.params, self.stim, lap=self.lap)
        return measure(self.lead_field, history, None, dt_frame=self.params.dt_frame).frames

    def misfit(self, theta):
        predicted = self.predict_measurements(theta)
        if predicted.shape != self.measured.shape:
            raise ValueError(f'measurement shape {self.measured.shape} does not match {predicted.shape}')
        return -float(np.sum((self.measured - predicted) ** 2))

    def __call__(self, z):
        theta = np.clip(self.model.decode_numpy(z), 0.0, 1.0)
        try:
            return self.misfit(theta)
        except SimulationError as exc:
            logger.warning('objective at z=%s failed: %s', np.array2string(np.asarray(z), precision=4), exc)
            return SENTINEL


@dataclass(eq=False)
class BoResult:
    best_z: np.ndarray
    best_value: float
    best_theta: np.ndarray
    history: list  # dicts: iteration, z, value, best_so_far, flagged, wall_time

    @property
    def evaluation_count(self):
        return len(self.history)

    def best_so_far(self):
        return [h['best_so_far'] for h in self.history]


def _record(history, z, value, started):
    best = value if not history else max(history[-1]['best_so_far'], value)
    history.append({'iteration': len(history), 'z': np.asarray(z, dtype=np.float64).copy(),
                    'value': float(value), 'best_so_far': float(best),
                    'flagged': value <= SENTINEL, 'wall_time': time.perf_counter() - started})


def _finish(history, decode):
    best = max(range(len(history)), key=lambda i: (history[i]['value'], -i))
    best_z = history[best]['z']
    best_theta = decode(best_z) if decode is not None else None
    return BoResult(best_z, history[best]['value'], best_theta, history)


def default_bounds(q, half_width=3.0):
    return np.tile([-half_width, half_width], (q, 1)).astype(np.float64)


def bayes_opt(objective, q, budget=100, bounds=None, n_init=10, rng_seed=0, decode=None, n_restarts=5, jobs=1):
    """Latin-hypercube start, then GP fit / EI maximization / evaluation until the budget is spent."""
    if not budget >= n_init >= 2:
        raise ValueError(f'need budget >= n_init >= 2 (budget={budget}, n_init={n_init})')
    bounds = default_bounds(q) if bounds is None else np.asarray(bounds, dtype=np.float64)
    low, high = bounds[:, 0], bounds[:, 1]
    history = []
    started = time.perf_counter()

    design = qmc.scale(qmc.LatinHypercube(d=q, seed=rng_seed).random(n_init), low, high)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            initial = list(executor.map(objective, design))
    else:
        initial = [objective(z) for z in design]
    for z, value in zip(design, initial):
        _record(history, z, value, started)
        logger.debug('init %d: value %.6g', len(history) - 1, history[-1]['value'])

    hyp = None
    while len(history) < budget:
        iteration = len(history)
        inputs = np.stack([h['z'] for h in history])
        values = np.array([h['value'] for h in history])
        flagged = np.array([h['flagged'] for h in history])
        if flagged.all():
            values = np.zeros_like(values)
        elif flagged.any():
            values = np.where(flagged, values[~flagged].min(), values)
        base = default_hyperparams(inputs, values)
        init = base if hyp is None else GpHyperparams(hyp.lengthscales, base.amplitude, base.noise)
        gp = gp_fit(inputs, values, init, n_restarts, rng_seed=[rng_seed, iteration])
        hyp = gp.hyperparams
        z = maximize_ei(gp, bounds, rng_seed=np.random.default_rng([rng_seed, iteration]),
                        f_plus=float(values.max()))
        if np.min(np.linalg.norm(inputs - z, axis=1)) < 1e-9:
            z = np.random.default_rng([rng_seed, iteration, 1]).uniform(low, high)
        _record(history, z, objective(z), started)
        logger.debug('iteration %d: value %.6g best %.6g', iteration, history[-1]['value'],
                     history[-1]['best_so_far'])

    result = _finish(history, decode)
    logger.info('optimization finished after %d evaluations, best %.6g', len(history), result.best_value)
    return result


def random_search(objective, q, budget, bounds=None, rng_seed=0, decode=None):
    """Uniform random baseline with the same bookkeeping as bayes_opt."""
    bounds = default_bounds(q) if bounds is None else np.asarray(bounds, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    history = []
    started = time.perf_counter()
    for _ in range(budget):
        z = rng.uniform(bounds[:, 0], bounds[:, 1])
        _record(history, z, objective(z), started)
    return _finish(history, decode)
