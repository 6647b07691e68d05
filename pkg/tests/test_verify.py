import numpy as np
import pytest

from services.benchmark_lqg import LQGSpec, build_lqg_problem
from services.filtering import ObservationFeatureMap
from services.policy import ControlPolicy
from services.simulate import TimeGrid
from services.toy_problems import lq_fbsde, quadratic_toy, zero_problem
from services.verify import (convexity_spotcheck, cost_difference_check, fd_directional_derivative,
                             perturbation_order_check, run_verification)

GRID = TimeGrid(1.0, 8)
BIAS_ONLY = ObservationFeatureMap((1,), degree=0)
OPTIONS = {
    "fd_eps": [0.2, 0.1, 0.05],
    "order_eps": [0.4, 0.2, 0.1],
    "convexity_points": 200,
    "gradient_samples": 5,
    "perturbation": 0.5,
    "sufficient": True,
}


def test_zero_direction_has_zero_differences():
    p = quadratic_toy()
    pol = ControlPolicy.constant(0.1, BIAS_ONLY, p.control_set)
    result = fd_directional_derivative(p, pol, np.zeros(1), [0.1, 0.05], GRID, 16, seed=0)
    assert result.fd == [0.0, 0.0]
    assert result.analytic == 0.0
    assert result.rel_error == 0.0


def test_fd_matches_closed_form_on_quadratic_toy():
    c, theta_star, theta = 2.0, 0.5, 0.1
    p = quadratic_toy(c=c, theta_star=theta_star)
    pol = ControlPolicy.constant(theta, BIAS_ONLY, p.control_set)
    result = fd_directional_derivative(p, pol, np.ones(1), [1e-3, 2e-3], GRID, 16, seed=0)
    expected = 2 * c * (theta - theta_star)
    assert result.extrapolated == pytest.approx(expected, abs=1e-6)
    assert result.analytic == pytest.approx(expected, abs=1e-6)
    assert result.rel_error <= 1e-6


def test_fd_rejects_bad_step_sizes():
    p = quadratic_toy()
    pol = ControlPolicy.zeros(BIAS_ONLY, p.control_set)
    with pytest.raises(ValueError):
        fd_directional_derivative(p, pol, np.ones(1), [0.0, 0.1], GRID, 16, seed=0)


def test_identical_policies_have_zero_cost_difference(lqg_problem):
    fmap = ObservationFeatureMap.default(GRID.N)
    pol = ControlPolicy.constant(-0.3, fmap, lqg_problem.control_set)
    check = cost_difference_check(lqg_problem, pol, pol, GRID, 200, seed=4)
    assert check.lhs == 0.0
    assert check.rhs == 0.0
    assert check.passed
    assert all(v == 0.0 for v in check.terms.values())


def test_zero_problem_terms_vanish():
    p = zero_problem()
    fmap = ObservationFeatureMap((1,), 1)
    check = cost_difference_check(p, ControlPolicy.constant(0.5, fmap, p.control_set),
                                  ControlPolicy.zeros(fmap, p.control_set), GRID, 50, seed=0)
    assert len(check.terms) == 13
    assert all(v == 0.0 for v in check.terms.values())
    assert check.lhs == 0.0
    assert check.z == 0.0


def test_perturbation_state_moment_has_fourth_order(lqg_problem):
    fmap = ObservationFeatureMap.default(GRID.N)
    bar = ControlPolicy.zeros(fmap, lqg_problem.control_set)
    alt = ControlPolicy.constant(0.5, fmap, lqg_problem.control_set)
    orders = perturbation_order_check(lqg_problem, bar, alt, [0.0, 0.4, 0.2, 0.1], GRID, 200, seed=1)
    assert orders.x4[0] == 0.0
    assert orders.rho2[0] == 0.0
    assert orders.slope_x == pytest.approx(4.0, abs=1e-6)
    assert orders.y4 == [0.0] * 4


def test_perturbation_density_moment_has_second_order(lqg_problem):
    grid = TimeGrid(1.0, 16)
    fmap = ObservationFeatureMap.default(grid.N)
    bar = ControlPolicy.zeros(fmap, lqg_problem.control_set)
    alt = ControlPolicy.constant(0.5, fmap, lqg_problem.control_set)
    orders = perturbation_order_check(lqg_problem, bar, alt, [0.4, 0.2, 0.1], grid, 2000, seed=4)
    assert 1.6 <= orders.slope_rho <= 2.4


def test_perturbation_needs_three_step_sizes(lqg_problem):
    fmap = ObservationFeatureMap.default(GRID.N)
    pol = ControlPolicy.zeros(fmap, lqg_problem.control_set)
    with pytest.raises(ValueError):
        perturbation_order_check(lqg_problem, pol, pol, [0.2, 0.1], GRID, 10, seed=0)


def test_lqg_passes_convexity_spotcheck(lqg_problem):
    report = convexity_spotcheck(lqg_problem, 500, seed=3)
    assert report.violations == 0
    assert report.h_hypothesis_ok is None


def test_concave_running_cost_is_flagged(make_scalar):
    p = make_scalar(l=lambda t, x, y, z1, z2, u: -u[:, 0] ** 2, bound=2.0)
    report = convexity_spotcheck(p, 500, seed=3)
    assert report.violations_H > 0


def test_state_dependent_observation_fails_h_hypothesis(lqg_problem):
    report = convexity_spotcheck(lqg_problem, 100, seed=0, sufficient=True)
    assert report.h_hypothesis_ok is False
    assert report.h_max_variation > 0


def test_time_only_observation_meets_h_hypothesis():
    p = build_lqg_problem(LQGSpec(h_kind="time"))
    report = convexity_spotcheck(p, 100, seed=0, sufficient=True)
    assert report.h_hypothesis_ok is True
    assert report.violations == 0


def test_convexity_needs_points(lqg_problem):
    with pytest.raises(ValueError):
        convexity_spotcheck(lqg_problem, 0, seed=0)


def test_report_rows_come_in_fixed_order():
    p = quadratic_toy()
    pol = ControlPolicy.constant(0.1, BIAS_ONLY, p.control_set)
    rows = run_verification(p, pol, GRID, 32, seed=2, options=OPTIONS)
    assert [r.check for r in rows] == [
        "gradient_check",
        "bound_sigma2",
        "bound_h",
        "density_martingale",
        "hamiltonian_fd",
        "fd_vs_variational",
        "cost_difference_identity",
        "perturbation_order_x",
        "convexity",
        "h_hypothesis",
        "necessary_residual",
    ]
    by_name = {r.check: r for r in rows}
    assert by_name["gradient_check"].passed
    assert by_name["fd_vs_variational"].passed
    assert by_name["cost_difference_identity"].passed
    assert by_name["h_hypothesis"].passed
    # H_u = 2 (0.1 - 0.5) on every path, so the residual is 0.8^2
    assert by_name["necessary_residual"].statistic == pytest.approx(0.64)
    assert not by_name["necessary_residual"].passed
    assert rows[0].as_row()[3] == "pass"
    assert all(r.seed == 2 for r in rows)


def test_residual_row_passes_at_the_optimum():
    p = quadratic_toy()
    pol = ControlPolicy.constant(0.5, BIAS_ONLY, p.control_set)
    rows = run_verification(p, pol, GRID, 32, seed=2, options=OPTIONS)
    row = next(r for r in rows if r.check == "necessary_residual")
    assert row.statistic == pytest.approx(0.0, abs=1e-20)
    assert row.passed
    assert row.tolerance == "0.01"


def test_residual_row_needs_the_sufficient_flag():
    p = quadratic_toy()
    pol = ControlPolicy.constant(0.5, BIAS_ONLY, p.control_set)
    rows = run_verification(p, pol, GRID, 32, seed=2, options={**OPTIONS, "sufficient": False})
    assert "necessary_residual" not in {r.check for r in rows}


@pytest.mark.slow
def test_lqg_verification_passes():
    p = build_lqg_problem(LQGSpec())
    grid = TimeGrid(1.0, 64)
    pol = ControlPolicy.zeros(ObservationFeatureMap.default(grid.N), p.control_set)
    rows = run_verification(p, pol, grid, 20_000, seed=7, options={**OPTIONS, "sufficient": False})
    by_name = {r.check: r.passed for r in rows}
    for name in ("gradient_check", "hamiltonian_fd", "density_martingale", "fd_vs_variational",
                 "cost_difference_identity", "perturbation_order_x", "convexity"):
        assert by_name[name], name


@pytest.mark.slow
def test_cost_difference_identity_on_coupled_system():
    p = lq_fbsde()
    grid = TimeGrid(1.0, 32)
    fmap = ObservationFeatureMap.default(grid.N)
    bar = ControlPolicy.zeros(fmap, p.control_set)
    alt = ControlPolicy.constant(0.5, fmap, p.control_set)
    check = cost_difference_check(p, alt, bar, grid, 50_000, seed=5)
    assert check.passed, check.terms


@pytest.mark.slow
def test_time_only_observation_passes_full_convexity_sweep():
    p = build_lqg_problem(LQGSpec(h_kind="time"), "lqg_time_h")
    report = convexity_spotcheck(p, 10_000, seed=7, sufficient=True)
    assert report.violations == 0
    assert report.h_hypothesis_ok is True
