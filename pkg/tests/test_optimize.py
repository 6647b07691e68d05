import numpy as np
import pytest

from services.benchmark_lqg import LQGSpec, build_lqg_problem, oracle_policy_fit, riccati_oracle
from services.bsde import RegressionBasis
from services.filtering import ObservationFeatureMap
from services.optimize import (GradientReport, StepRule, functional_gradient, necessary_condition_residual,
                               optimize_policy, parameter_gradient, run_pipeline)
from services.policy import ControlPolicy
from services.simulate import TimeGrid, sample_noise
from services.toy_problems import quadratic_toy, zero_problem

GRID = TimeGrid(1.0, 8)
BIAS_ONLY = ObservationFeatureMap((1,), degree=0)


def _state(problem, pol, paths=64, seed=0, grid=GRID):
    return run_pipeline(problem, pol, sample_noise(grid, paths, seed), RegressionBasis())


def test_functional_gradient_of_squared_control():
    p = quadratic_toy(c=1.0, theta_star=0.0)
    pol = ControlPolicy.constant(0.3, ObservationFeatureMap((1,), 1), p.control_set)
    s = _state(p, pol)
    g = functional_gradient(p, s.ens, s.back, s.adj)
    np.testing.assert_allclose(g, 2.0 * s.ens.u, atol=1e-14)


def test_zero_problem_has_zero_gradient():
    p = zero_problem()
    pol = ControlPolicy.constant(0.4, ObservationFeatureMap((1,), 1), p.control_set)
    s = _state(p, pol)
    g = functional_gradient(p, s.ens, s.back, s.adj)
    np.testing.assert_array_equal(g, 0.0)
    grad, se = parameter_gradient(p, pol, s.ens, s.back, s.adj, g)
    np.testing.assert_array_equal(grad, 0.0)
    np.testing.assert_array_equal(se, 0.0)
    total, profile = necessary_condition_residual(p, pol, s.ens, s.back, s.adj, g=g)
    assert total == 0.0
    assert profile.shape == (GRID.N,)


def test_parameter_gradient_of_quadratic_toy():
    c, theta_star = 1.5, 0.5
    p = quadratic_toy(c=c, theta_star=theta_star)
    pol = ControlPolicy.constant(0.2, BIAS_ONLY, p.control_set)
    s = _state(p, pol)
    grad, _ = parameter_gradient(p, pol, s.ens, s.back, s.adj)
    assert grad[0] == pytest.approx(2 * c * (0.2 - theta_star), abs=1e-6)
    assert s.J == pytest.approx(c * (0.2 - theta_star) ** 2, abs=1e-12)


def test_residual_vanishes_at_interior_optimum():
    p = quadratic_toy(theta_star=0.5)
    pol = ControlPolicy.constant(0.5, ObservationFeatureMap((1,), 1), p.control_set)
    s = _state(p, pol)
    total, _ = necessary_condition_residual(p, pol, s.ens, s.back, s.adj)
    assert total <= 1e-6


def test_stationary_start_stops_immediately():
    p = quadratic_toy(theta_star=0.5)
    pol = ControlPolicy.constant(0.5, BIAS_ONLY, p.control_set)
    result = optimize_policy(p, pol, GRID, 32, seed=3, tol=1e-3)
    assert len(result.reports) == 1
    assert result.reports[0].iteration == 0
    assert result.final_residual <= 1e-3
    assert not result.line_search_stall


def test_quadratic_toy_converges_to_optimum():
    p = quadratic_toy(c=1.0, theta_star=0.5)
    result = optimize_policy(p, ControlPolicy.zeros(BIAS_ONLY, p.control_set), GRID, 32, seed=0,
                             max_iters=50, tol=1e-6)
    assert len(result.reports) <= 51
    assert result.policy.theta[0] == pytest.approx(0.5, abs=1e-4)
    assert [r.seed for r in result.reports] == list(range(len(result.reports)))
    assert result.reports[0].J > result.reports[-1].J


def test_reports_have_the_csv_column_order():
    report = GradientReport(2, 1.0, 0.1, 0.5, 0.5, 0.25, 9)
    assert report.as_row() == [2, 1.0, 0.1, 0.5, 0.5, 0.25, 9]


def test_optimizer_is_deterministic_across_workers(lqg_problem):
    fmap = ObservationFeatureMap.default(GRID.N)
    pol = ControlPolicy.zeros(fmap, lqg_problem.control_set)
    runs = [
        optimize_policy(lqg_problem, pol, GRID, 200, seed=5, max_iters=2, step_rule=StepRule(max_halvings=5),
                        workers=w)
        for w in (1, 3)
    ]
    np.testing.assert_array_equal(runs[0].policy.theta, runs[1].policy.theta)
    assert [r.as_row() for r in runs[0].reports] == [r.as_row() for r in runs[1].reports]


def test_stall_keeps_the_current_policy():
    p = quadratic_toy(theta_star=0.5)
    pol = ControlPolicy.constant(0.0, BIAS_ONLY, p.control_set)
    # an Armijo constant this large rejects every trial step
    result = optimize_policy(p, pol, GRID, 16, seed=0, step_rule=StepRule(armijo=10.0, max_halvings=3))
    assert result.line_search_stall
    np.testing.assert_array_equal(result.policy.theta, pol.theta)


@pytest.mark.slow
def test_lqg_reaches_oracle_cost():
    spec = LQGSpec()
    p = build_lqg_problem(spec)
    grid = TimeGrid(1.0, 64)
    fmap = ObservationFeatureMap.default(grid.N)
    oracle = riccati_oracle(spec)
    result = optimize_policy(p, ControlPolicy.zeros(fmap, p.control_set), grid, 20_000, seed=7, max_iters=30)
    assert result.reports[-1].J == pytest.approx(oracle.J_star, rel=0.03)
    assert result.final_residual <= result.initial_residual / 10


def test_initial_residual_is_the_variational_inequality_gap():
    p = quadratic_toy(theta_star=0.5)
    pol = ControlPolicy.constant(0.1, BIAS_ONLY, p.control_set)
    result = optimize_policy(p, pol, GRID, 16, seed=0, max_iters=1)
    # parameters are unconstrained, so the projected-gradient column is the gradient norm
    assert result.reports[0].residual == result.reports[0].grad_norm
    # H_u = 2 (0.1 - 0.5) on every path
    assert result.initial_residual == pytest.approx(0.64)


@pytest.mark.slow
def test_oracle_fit_nearly_satisfies_the_necessary_condition():
    spec = LQGSpec()
    p = build_lqg_problem(spec)
    grid = TimeGrid(1.0, 64)
    fmap = ObservationFeatureMap.default(grid.N)
    fit = oracle_policy_fit(spec, riccati_oracle(spec), fmap, grid, M=20_000, seed=3)
    residuals = {}
    for label, pol in (("fit", fit.policy), ("zero", ControlPolicy.zeros(fmap, p.control_set))):
        s = _state(p, pol, paths=20_000, seed=7, grid=grid)
        residuals[label], _ = necessary_condition_residual(p, pol, s.ens, s.back, s.adj)
    assert residuals["fit"] <= 1e-2
    assert residuals["fit"] <= residuals["zero"] / 10
