import math

import numpy as np
import pytest

from bayesopt import (JITTER, SENTINEL, GpHyperparams, GpSurrogate, MeasurementObjective, bayes_opt,
                      default_bounds, expected_improvement, gp_fit, gp_predict, kernel_matrix,
                      log_marginal_likelihood, matern52, maximize_ei, random_search)
from ep_sim import ApParams, StimulusProtocol, measure, simulate, synth_lead_field


class FixedPrediction:
    """Stands in for a fitted surrogate with a given posterior."""

    def __init__(self, mu, sigma):
        self.mu, self.sigma = mu, sigma

    def predict(self, z):
        return self.mu, self.sigma


class StepDecoder:
    """Healthy tissue with the first ten vertices abnormal whenever z[0] > 0."""

    def __init__(self, n):
        self.n = n

    def decode_numpy(self, z):
        theta = np.full(self.n, 0.15)
        if z[0] > 0:
            theta[:10] = 0.5
        return theta


def _quadratic(center):
    return lambda z: -float(np.sum((np.asarray(z) - center) ** 2))


def _training_points(seed=0, n=8, q=2):
    rng = np.random.default_rng(seed)
    inputs = rng.uniform(-2, 2, (n, q))
    values = np.sin(inputs[:, 0]) + 0.5 * np.cos(2 * inputs[:, 1])
    return inputs, values


def test_matern_at_unit_distance():
    hyp = GpHyperparams(np.ones(2), 1.0, 1e-6)
    assert matern52([0.0, 0.0], [1.0, 0.0], hyp) == pytest.approx(0.52399, abs=1e-5)
    assert matern52([0.3, 0.1], [0.3, 0.1], hyp) == 1.0


def test_kernel_scales_with_lengthscale_and_amplitude():
    hyp = GpHyperparams(np.array([2.0, 1.0]), 3.0, 1e-6)
    assert matern52([0.0, 0.0], [2.0, 0.0], hyp) == pytest.approx(3 * 0.52399, abs=1e-4)
    k = kernel_matrix(np.zeros((1, 2)), np.array([[2.0, 0.0], [0.0, 1.0]]), hyp)
    assert np.allclose(k, [[matern52([0, 0], [2, 0], hyp), matern52([0, 0], [0, 1], hyp)]])


def test_log_evidence_gradient_matches_finite_differences():
    inputs, values = _training_points()
    y = values - values.mean()
    x = np.log([0.8, 1.3, 0.7])
    _, grad = log_marginal_likelihood(x, inputs, y, 1e-4)
    h = 1e-6
    for j in range(x.shape[0]):
        step = np.zeros_like(x)
        step[j] = h
        upper, _ = log_marginal_likelihood(x + step, inputs, y, 1e-4)
        lower, _ = log_marginal_likelihood(x - step, inputs, y, 1e-4)
        assert grad[j] == pytest.approx((upper - lower) / (2 * h), rel=1e-5, abs=1e-7)


def test_every_restart_ascends():
    inputs, values = _training_points(1)
    gp = gp_fit(inputs, values, n_restarts=4, rng_seed=3)
    assert len(gp.restarts) == 4
    for _, start_value, _, end_value in gp.restarts:
        assert end_value >= start_value
    assert max(r[3] for r in gp.restarts) == pytest.approx(
        log_marginal_likelihood(gp.hyperparams.to_log(), inputs, values - values.mean(), gp.hyperparams.noise)[0])


def test_fit_rejects_duplicate_inputs():
    inputs = np.array([[0.0, 1.0], [0.5, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError, match='duplicate'):
        gp_fit(inputs, np.array([1.0, 2.0, 3.0]))


def test_fit_needs_two_points():
    with pytest.raises(ValueError):
        gp_fit(np.zeros((1, 2)), np.zeros(1))


def test_posterior_interpolates_training_data():
    inputs, values = _training_points(2)
    gp = gp_fit(inputs, values, rng_seed=0)
    mu, sigma = gp_predict(gp, inputs)
    assert np.allclose(mu, values, atol=1e-3)
    assert np.all(sigma < 1e-2 * math.sqrt(gp.hyperparams.amplitude))


def test_posterior_reverts_to_prior_far_away():
    inputs, values = _training_points(3)
    hyp = GpHyperparams(np.ones(2), 2.0, 1e-6)
    gp = GpSurrogate.condition(inputs, values, hyp)
    mu, sigma = gp.predict(np.array([100.0, -100.0]))
    assert mu == pytest.approx(values.mean(), abs=1e-9)
    assert sigma == pytest.approx(math.sqrt(2.0), rel=1e-9)


def test_posterior_matches_dense_formula():
    inputs, values = _training_points(4)
    hyp = GpHyperparams(np.array([0.7, 1.4]), 1.5, 1e-4)
    gp = GpSurrogate.condition(inputs, values, hyp)
    z = np.random.default_rng(5).uniform(-2, 2, (6, 2))
    gram = kernel_matrix(inputs, inputs, hyp) + (hyp.noise + JITTER) * np.eye(len(inputs))
    cross = kernel_matrix(z, inputs, hyp)
    mean = values.mean() + cross @ np.linalg.solve(gram, values - values.mean())
    var = hyp.amplitude - np.einsum('ij,ji->i', cross, np.linalg.solve(gram, cross.T))
    mu, sigma = gp.predict(z)
    assert np.allclose(mu, mean, atol=1e-8)
    assert np.allclose(sigma, np.sqrt(np.maximum(var, 0.0)), atol=1e-6)


def test_expected_improvement_limits():
    assert expected_improvement(FixedPrediction(2.0, 0.0), None, 1.5) == pytest.approx(0.5)
    assert expected_improvement(FixedPrediction(1.0, 0.0), None, 1.5) == 0.0
    assert expected_improvement(FixedPrediction(1.0, 0.3), None, 1.0) == pytest.approx(0.3 / math.sqrt(2 * math.pi))


def test_expected_improvement_matches_monte_carlo():
    mu, sigma, f_plus = 0.4, 0.8, 0.9
    samples = np.random.default_rng(0).normal(mu, sigma, 400000)
    estimate = np.mean(np.maximum(samples - f_plus, 0.0))
    assert expected_improvement(FixedPrediction(mu, sigma), None, f_plus) == pytest.approx(estimate, rel=0.02)


def test_expected_improvement_vectorized_non_negative():
    inputs, values = _training_points(6)
    gp = GpSurrogate.condition(inputs, values, GpHyperparams(np.ones(2), 1.0, 1e-6))
    ei = expected_improvement(gp, np.random.default_rng(1).uniform(-3, 3, (50, 2)), values.max())
    assert ei.shape == (50,)
    assert np.all(ei >= 0)


def test_maximize_ei_stays_in_bounds():
    inputs, values = _training_points(7)
    gp = GpSurrogate.condition(inputs, values, GpHyperparams(np.ones(2), 1.0, 1e-6))
    bounds = np.array([[-1.0, 0.5], [0.0, 2.0]])
    z = maximize_ei(gp, bounds, rng_seed=2, n_samples=256)
    assert np.all(z >= bounds[:, 0]) and np.all(z <= bounds[:, 1])


def test_single_observation_moves_away():
    gp = GpSurrogate.condition(np.zeros((1, 2)), np.zeros(1), GpHyperparams(np.ones(2), 1.0, 1e-6))
    z = maximize_ei(gp, default_bounds(2), rng_seed=0, n_samples=256)
    assert np.linalg.norm(z) > 0.5


def test_budget_equal_to_initial_design():
    result = bayes_opt(_quadratic(np.zeros(2)), 2, budget=5, n_init=5, rng_seed=1)
    assert result.evaluation_count == 5
    assert result.best_value == max(h['value'] for h in result.history)


def test_budget_must_cover_initial_design():
    with pytest.raises(ValueError, match='budget'):
        bayes_opt(_quadratic(np.zeros(2)), 2, budget=3, n_init=5)


def test_history_is_consistent_and_seeded():
    a = bayes_opt(_quadratic(np.array([1.0, -0.5])), 2, budget=9, n_init=4, rng_seed=3, n_restarts=2)
    b = bayes_opt(_quadratic(np.array([1.0, -0.5])), 2, budget=9, n_init=4, rng_seed=3, n_restarts=2, jobs=2)
    assert [h['iteration'] for h in a.history] == list(range(9))
    assert a.best_so_far() == sorted(a.best_so_far())
    assert a.best_so_far()[-1] == a.best_value
    assert np.allclose([h['value'] for h in a.history], [h['value'] for h in b.history])
    for h in a.history:
        assert np.all(np.abs(h['z']) <= 3.0)


def test_failed_evaluations_are_flagged():
    def objective(z):
        return SENTINEL if z[0] < 0 else -float(np.sum(z ** 2))

    result = bayes_opt(objective, 2, budget=8, n_init=4, rng_seed=0, n_restarts=2)
    assert result.evaluation_count == 8
    assert any(h['flagged'] for h in result.history[:4])
    assert result.best_value > SENTINEL


def test_decode_applied_to_best():
    result = random_search(_quadratic(np.zeros(2)), 2, budget=6, rng_seed=2, decode=lambda z: 2 * z)
    assert np.array_equal(result.best_theta, 2 * result.best_z)
    assert result.evaluation_count == 6


@pytest.mark.slow
def test_beats_random_search_on_quadratic():
    center = np.array([0.7, -1.2])
    for seed in range(10):
        bo = bayes_opt(_quadratic(center), 2, budget=50, n_init=10, rng_seed=seed, n_restarts=2)
        rs = random_search(_quadratic(center), 2, budget=50, rng_seed=seed)
        assert np.linalg.norm(bo.best_z - center) <= 0.1
        assert bo.best_value >= rs.best_value


@pytest.fixture(scope='module')
def measured_case(small_graph):
    params = ApParams(t_end=20.0)
    stim = StimulusProtocol((0, 1, 2), 0.0, 1.0, 1.0)
    lead = synth_lead_field(small_graph, 6, seed=0)
    decoder = StepDecoder(small_graph.size)
    truth = decoder.decode_numpy(np.array([1.0, 0.0]))
    measured = measure(lead, simulate(small_graph, truth, params, stim))
    return small_graph, params, stim, lead, decoder, measured


def test_objective_zero_at_the_truth(measured_case):
    graph, params, stim, lead, decoder, measured = measured_case
    objective = MeasurementObjective(decoder, graph, params, stim, lead, measured)
    assert objective(np.array([1.0, 0.0])) == 0.0
    assert objective(np.array([-1.0, 0.0])) <= 0.0


def test_objective_reports_unstable_simulation(measured_case):
    graph, _, stim, lead, decoder, _ = measured_case
    unstable = ApParams(dt=5.0, t_end=2000.0, d_coeff=5.0, record_stride=1)
    objective = MeasurementObjective(decoder, graph, unstable, stim, lead, np.zeros((6, 400)))
    with np.errstate(all='ignore'):
        assert objective(np.array([1.0, 0.0])) == SENTINEL
