"""
Statistical acceptance experiments on the toy linear-Gaussian model and the
malaria model. Slow; deselect with `pytest -m "not slow"`.
"""
import time

import numpy as np
import pytest

from estimators import RUNNERS, MifConfig, aif_run, evaluate_loglik, replicate_search
from models.linear_gaussian import kalman_fd_gradient, kalman_loglik, kalman_mle
from models.malaria import MalariaSpec, euler_maruyama_simulate, malaria_model, synthetic_rainfall
from pomp_core import RngStream
from smc import PerturbSpec, bootstrap_filter, estimate_score, perturbed_filter

pytestmark = pytest.mark.slow

SCORE_POINT = {"alpha_2": -0.3, "alpha_3": 0.1}


def toy_scores(toy_model, toy_data, sigma, J, seeds):
    theta = toy_model.params(list(SCORE_POINT.values()))
    spec = PerturbSpec(np.full(2, sigma), 0.9)
    return np.array([estimate_score(perturbed_filter(toy_model, theta, toy_data, J, spec, 1, seed), theta, spec, 1)
                     for seed in seeds])


def test_particle_filter_matches_kalman(toy_spec, toy_model, toy_data):
    exact = kalman_loglik(toy_spec, toy_data).loglik
    estimates = np.array([bootstrap_filter(toy_model, toy_model.defaults, toy_data, 1000, seed).loglik
                          for seed in range(30)])
    assert abs(estimates.mean() - exact) <= 1.0
    assert estimates.std(ddof=1) <= 1.0


def test_score_points_along_the_exact_gradient(toy_spec, toy_model, toy_data):
    exact = kalman_fd_gradient(toy_spec.with_params(SCORE_POINT), toy_data)
    scores = toy_scores(toy_model, toy_data, 0.02, 1000, range(10))
    cosines = scores @ exact / (np.linalg.norm(scores, axis=1) * np.linalg.norm(exact))
    assert cosines.mean() > 0.5


def test_filter_mean_drift_follows_the_exact_gradient(toy_spec, toy_model, toy_data):
    exact = kalman_fd_gradient(toy_spec.with_params(SCORE_POINT), toy_data)
    center = toy_model.params(list(SCORE_POINT.values()))
    spec = PerturbSpec(np.full(2, 0.02), 0.9)
    agree = np.zeros(2, dtype=int)
    for seed in range(10):
        f = perturbed_filter(toy_model, center, toy_data, 1000, spec, 1, seed)
        drift = np.mean(f.param_filter_means - center.values, axis=0)
        agree += np.sign(drift) == np.sign(exact)
    assert np.all(agree >= 8)


def test_score_error_shrinks_with_the_perturbation(toy_spec, toy_model, toy_data):
    exact = kalman_fd_gradient(toy_spec.with_params(SCORE_POINT), toy_data)
    errors, slack = [], []
    for sigma in (0.04, 0.02, 0.01):
        scores = toy_scores(toy_model, toy_data, sigma, 5000, range(50))
        errors.append(np.linalg.norm(scores.mean(axis=0) - exact))
        slack.append(2.0 * np.linalg.norm(scores.std(axis=0, ddof=1)) / np.sqrt(len(scores)))
    for k in (1, 2):
        assert errors[k] <= errors[k - 1] + slack[k] + slack[k - 1]


class TestToyEndToEnd:
    box = ((-1.0, -1.0), (1.0, 1.0))

    @pytest.fixture(scope="class")
    def runs(self, toy_spec, toy_model, toy_data):
        perturb = PerturbSpec(np.full(2, 0.02), (0.011 / 0.02) ** (1.0 / 24.0))
        cfg = MifConfig(J=1000, M=25, perturb=perturb, seed=1, K_eval=10)
        reference = kalman_mle(toy_spec, toy_data, lower=self.box[0], upper=self.box[1]).loglik
        results = {method: replicate_search(method, toy_model, toy_data, self.box, 20, cfg, 1, workers=4,
                                            progress=False)
                   for method in ("aif", "if1", "if2")}
        return reference, results

    def test_most_aif_starts_reach_the_maximum(self, runs):
        reference, results = runs
        logliks = results["aif"].logliks
        assert np.mean(logliks >= reference - 3.0) >= 0.8

    def test_aif_median_is_not_below_if1(self, runs):
        _, results = runs
        assert np.nanmedian(results["aif"].logliks) >= np.nanmedian(results["if1"].logliks)

    def test_most_if2_starts_reach_the_maximum(self, runs):
        reference, results = runs
        assert np.mean(results["if2"].logliks >= reference - 3.0) >= 0.8


def test_aif_cost_relative_to_if2(toy_model, toy_data):
    cfg = MifConfig(J=1000, M=5, perturb=PerturbSpec(np.full(2, 0.02), 0.95), L_est=1e6)
    theta0 = toy_model.params([-0.3, 0.1])
    timings = {}
    for method in ("aif", "if2"):
        started = time.perf_counter()
        for r in range(3):
            RUNNERS[method](toy_model, toy_data, theta0, cfg, RngStream(1, 1, (r,)))
        timings[method] = time.perf_counter() - started
    assert timings["aif"] / timings["if2"] <= 2.5


class TestMalariaSelfConsistency:
    free = ("rho", "sigma_obs")

    @pytest.fixture(scope="class")
    def setup(self):
        spec = MalariaSpec()
        rain = synthetic_rainfall(240, 5)
        data = euler_maruyama_simulate(spec, 240, 7, rain).to_data()
        return malaria_model(spec, self.free), data

    def test_filter_keeps_enough_particles(self, setup):
        m, data = setup
        f = bootstrap_filter(m, m.to_estimation(m.defaults), data, 1000, 11)
        assert np.min(f.ess_trace) > 1000 / 100

    def test_aif_improves_on_a_perturbed_start(self, setup):
        m, data = setup
        start = m.params({"rho": 0.3, "sigma_obs": 0.35})
        cfg = MifConfig(J=1000, M=20, perturb=PerturbSpec(np.full(2, 0.05), 0.95, 2.0), policy="nonconvex",
                        lipschitz_radius=0.05, seed=3)
        trace = aif_run(m, data, start, cfg)
        before, _ = evaluate_loglik(m, start, data, 1000, 5, 3)
        after, _ = evaluate_loglik(m, trace.estimate_vector(), data, 1000, 5, 3)
        assert after >= before + 10.0
