"""Schedules, the AIG recursion and its convergence behaviour on deterministic objectives."""
import numpy as np
import pytest

from aig import (AigSchedule, AigState, FlatGradientError, OracleError, aig_midpoint, aig_run, aig_step,
                 build_schedule, build_schedule_convex, build_schedule_custom, build_schedule_nonconvex,
                 ck_coefficients, estimate_lipschitz, gamma_recursion_residuals, gamma_weighted_sum,
                 weight_sum_residuals)
from utils.table_io import read_table


def quadratic(h):
    h = np.asarray(h, dtype=float)
    return (lambda theta: 0.5 * np.sum(h * theta ** 2)), (lambda theta: h * theta)


def rosenbrock(theta):
    x, y = theta
    return (1 - x) ** 2 + 100 * (y - x ** 2) ** 2


def rosenbrock_grad(theta):
    x, y = theta
    return np.array([-2 * (1 - x) - 400 * x * (y - x ** 2), 200 * (y - x ** 2)])


class TestSchedules:
    @pytest.mark.parametrize("delta", [0.25, 0.5, 1.0])
    @pytest.mark.parametrize("builder", [build_schedule_nonconvex, build_schedule_convex])
    def test_gamma_identities_hold_to_rounding(self, builder, delta):
        s = builder(10000, 2.0, delta)
        assert np.max(gamma_recursion_residuals(s)) < 1e-12
        assert np.max(weight_sum_residuals(s)) < 1e-12

    def test_first_steps_for_delta_one(self):
        s = build_schedule_nonconvex(3, 1.0, 1.0)
        np.testing.assert_allclose(s.alphas, [1.0, 0.75, 5.0 / 9.0], rtol=1e-15)
        np.testing.assert_allclose(s.gammas, [1.0, 0.25, 1.0 / 9.0], rtol=1e-15)

    def test_nonconvex_steps_are_constant(self):
        s = build_schedule_nonconvex(50, 4.0)
        np.testing.assert_array_equal(s.betas, np.full(50, 0.125))
        np.testing.assert_array_equal(s.lambdas, s.betas)
        assert s.policy == "nonconvex" and s.N == 50

    @pytest.mark.parametrize("N", [1, 2, 10, 400])
    def test_convex_steps_respect_beta(self, N):
        s = build_schedule_convex(N, 3.0)
        np.testing.assert_array_equal(s.betas, np.full(N, 1.0 / 6.0))
        assert np.all(s.alphas * s.lambdas <= s.betas)
        assert np.all(np.diff(s.lambdas) > 0)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError, match="N must be"):
            build_schedule_convex(0, 1.0)
        with pytest.raises(ValueError, match="L_est"):
            build_schedule_nonconvex(5, 0.0)
        with pytest.raises(ValueError, match="delta"):
            build_schedule_convex(5, 1.0, 1.5)
        with pytest.raises(ValueError, match="custom"):
            build_schedule("custom", 5, 1.0)

    def test_alpha_one_is_required(self):
        with pytest.raises(ValueError, match="alpha_1"):
            AigSchedule(np.array([0.5, 0.5]), np.ones(2), np.ones(2), np.ones(2), "nonconvex", 1.0)

    def test_custom_allows_alpha_one_throughout(self):
        s = build_schedule_custom(np.ones(4), np.full(4, 0.1), np.full(4, 0.1))
        assert s.policy == "custom"
        np.testing.assert_array_equal(s.gammas, [1.0, 0.0, 0.0, 0.0])

    def test_sequences_are_read_only(self):
        s = build_schedule_nonconvex(3, 1.0)
        with pytest.raises(ValueError):
            s.betas[0] = 1.0


class TestCoefficients:
    def test_nonconvex_ck_is_one_half_at_the_estimate(self):
        s = build_schedule_nonconvex(20, 5.0)
        np.testing.assert_allclose(ck_coefficients(s, 5.0), np.full(20, 0.5), rtol=1e-15)
        np.testing.assert_allclose(ck_coefficients(s, 5.0, "statement"), np.full(20, 0.5), rtol=1e-15)

    def test_underestimated_L_is_reported(self, caplog):
        s = build_schedule_convex(30, 1.0)
        with caplog.at_level("WARNING"):
            ck = ck_coefficients(s, 1e3)
        assert np.any(ck <= 0)
        assert "non-positive C_k" in caplog.text

    def test_unknown_form(self):
        with pytest.raises(ValueError, match="form"):
            ck_coefficients(build_schedule_convex(3, 1.0), 1.0, "other")

    def test_weighted_sum_bound_closed_form(self):
        # alpha_k = 2/(k+1) gives Gamma_k = 2/(k(k+1)); constant eta sums to eta (k+2)/3
        k = np.arange(1, 51, dtype=float)
        bound = gamma_weighted_sum(2.0 / (k + 1.0), np.full(50, 0.3))
        np.testing.assert_allclose(bound, 0.3 * (k + 2.0) / 3.0, rtol=1e-12)


class TestAigStep:
    def test_single_step_equations(self):
        s = build_schedule_custom([1.0, 0.5], [0.1, 0.2], [0.3, 0.4])
        state = AigState.initial([1.0, 2.0])
        state = aig_step(state, s, np.array([1.0, -1.0]))
        np.testing.assert_allclose(state.theta_md, [1.0, 2.0])
        np.testing.assert_allclose(state.theta, [0.7, 2.3])
        np.testing.assert_allclose(state.theta_ag, [0.9, 2.1])
        np.testing.assert_allclose(aig_midpoint(state, s), 0.5 * np.array([0.9, 2.1]) + 0.5 * np.array([0.7, 2.3]))
        assert state.k == 1 and len(state.history) == 1

    def test_rejects_non_finite_gradient(self):
        s = build_schedule_nonconvex(3, 1.0)
        with pytest.raises(ValueError, match="Non-finite"):
            aig_step(AigState.initial([0.0]), s, np.array([np.inf]))

    def test_rejects_wrong_shape(self):
        s = build_schedule_nonconvex(3, 1.0)
        with pytest.raises(ValueError, match="shape"):
            aig_step(AigState.initial([0.0, 0.0]), s, np.array([1.0]))

    def test_schedule_exhaustion(self):
        s = build_schedule_nonconvex(1, 1.0)
        state = aig_step(AigState.initial([0.0]), s, np.array([1.0]))
        with pytest.raises(ValueError, match="exhausted"):
            aig_midpoint(state, s)


class TestAigRun:
    def test_oracle_failure_reports_iteration(self):
        calls = []

        def oracle(theta):
            calls.append(1)
            if len(calls) == 3:
                raise RuntimeError("boom")
            return theta

        with pytest.raises(OracleError) as info:
            aig_run(oracle, [1.0], build_schedule_nonconvex(10, 1.0))
        assert info.value.k == 3

    def test_non_finite_oracle_value(self):
        with pytest.raises(OracleError, match="non-finite"):
            aig_run(lambda theta: np.full_like(theta, np.nan), [1.0], build_schedule_nonconvex(5, 1.0))

    def test_maximize_concave_objective(self):
        result = aig_run(lambda theta: (-0.5 * theta @ theta, -theta), np.array([3.0, -4.0]),
                         build_schedule_convex(200, 1.0), sense="maximize")
        assert np.linalg.norm(result.final.theta_ag) < 1e-3
        assert result.trace[0].objective == pytest.approx(-12.5)

    def test_tolerance_stops_early(self):
        result = aig_run(lambda theta: theta, np.array([1.0]), build_schedule_nonconvex(500, 1.0), tol=1e-6)
        assert len(result.trace) < 500
        assert result.best_grad_norm < 1e-6

    def test_trace_table(self, tmp_path):
        result = aig_run(lambda theta: theta, np.array([1.0, 2.0]), build_schedule_convex(5, 1.0))
        df, meta = read_table(result.to_csv(tmp_path / "trace.csv"), "aifkit.aig-trace/1")
        assert list(df["k"]) == [1, 2, 3, 4, 5]
        assert {"theta_1", "theta_ag_2", "grad_norm"} <= set(df.columns)


class TestConvexConvergence:
    def test_gap_is_bounded_by_the_schedule(self):
        f, grad = quadratic(np.ones(3))
        theta0 = np.array([1.0, -2.0, 0.5])
        N = 400
        s = build_schedule_convex(N, 1.0)
        result = aig_run(grad, theta0, s)
        gaps = np.array([f(r.theta_ag) for r in result.trace])
        bound = s.gammas * np.sum(theta0 ** 2) / (2.0 * s.lambdas[0])
        assert np.all(gaps <= bound)

    def test_gap_envelope_decays_at_least_quadratically(self):
        f, grad = quadratic(np.ones(2))
        theta0 = np.array([3.0, -1.0])
        Ns = np.array([25, 50, 100, 200, 400])
        envelope = []
        for N in Ns:
            result = aig_run(grad, theta0, build_schedule_convex(N, 1.0))
            gaps = [f(r.theta_ag) for r in result.trace[N // 2:]]
            envelope.append(max(max(gaps), 1e-300))
        slope = np.polyfit(np.log(Ns), np.log(envelope), 1)[0]
        assert slope <= -1.8

    def test_decaying_gradient_bias_barely_changes_the_gap(self):
        h = np.array([1.0, 1e-2, 1e-4])
        f, grad = quadratic(h)
        theta0 = np.full(3, 10.0)
        direction = np.ones(3) / np.sqrt(3.0)
        N = 200

        def biased():
            k = [0]

            def oracle(theta):
                k[0] += 1
                return grad(theta) + 0.1 / k[0] ** 2 * direction
            return oracle

        clean = f(aig_run(grad, theta0, build_schedule_convex(N, 1.0)).final.theta_ag)
        noisy = f(aig_run(biased(), theta0, build_schedule_convex(N, 1.0)).final.theta_ag)
        assert clean > 0
        assert noisy <= 2.0 * clean


class TestNonconvexConvergence:
    def test_min_gradient_norm_decays_on_rosenbrock(self):
        theta0 = np.array([-1.2, 1.0])
        L_est = 500.0
        f0 = rosenbrock(theta0)
        Ns = np.array([125, 250, 500, 1000, 2000])
        min_sq = []
        for N in Ns:
            s = build_schedule_nonconvex(int(N), L_est)
            result = aig_run(rosenbrock_grad, theta0, s)
            min_sq.append(min(r.grad_norm for r in result.trace) ** 2)
            assert N * min_sq[-1] <= 2.0 * f0 / s.betas[0]
        assert np.all(np.diff(min_sq) <= 0)
        slope = np.polyfit(np.log(Ns), np.log(min_sq), 1)[0]
        assert slope <= -0.8

    def test_objective_decreases_on_rosenbrock(self):
        result = aig_run(lambda th: (rosenbrock(th), rosenbrock_grad(th)), np.array([-1.2, 1.0]),
                         build_schedule_nonconvex(2000, 3000.0))
        assert rosenbrock(result.final.theta_ag) < rosenbrock(np.array([-1.2, 1.0]))


class TestEstimateLipschitz:
    def test_bracketed_by_curvature(self):
        H = np.array([1.0, 4.0])
        L = estimate_lipschitz(lambda th, key: H * th, [-1.0, -1.0], [1.0, 1.0], seed=42, n_pairs=50)
        assert 2.0 <= L <= 8.0

    def test_local_radius(self):
        H = np.array([1.0, 4.0])
        L = estimate_lipschitz(lambda th, key: H * th, [0.0, 0.0], [0.0, 0.0], seed=1, radius=0.1)
        assert 2.0 <= L <= 8.0

    def test_reproducible(self):
        H = np.array([1.0, 4.0])
        a = estimate_lipschitz(lambda th, key: H * th, [-1.0, -1.0], [1.0, 1.0], seed=7)
        b = estimate_lipschitz(lambda th, key: H * th, [-1.0, -1.0], [1.0, 1.0], seed=7)
        assert a == b

    def test_flat_objective_fails(self):
        with pytest.raises(FlatGradientError, match="positive Lipschitz"):
            estimate_lipschitz(lambda th, key: np.zeros(2), [-1.0, -1.0], [1.0, 1.0], seed=1, n_pairs=5)
