import numpy as np
import pytest

from services.filtering import ObservationFeatureMap
from services.policy import ControlPolicy
from services.problem import ControlSet
from services.simulate import (TimeGrid, density_martingale_check, innovation_identity_gap, moment_diagnostics,
                               sample_noise, simulate_forward)
from utils.errors import DimensionMismatch, NonFinite


def _constant_policy(problem, value=0.0, degree=1):
    return ControlPolicy.constant(value, ObservationFeatureMap((1,), degree), problem.control_set)


def test_noise_is_reproducible():
    grid = TimeGrid(1.0, 1)
    a = sample_noise(grid, 1, 42)
    b = sample_noise(grid, 1, 42)
    np.testing.assert_array_equal(a.dW, b.dW)
    np.testing.assert_array_equal(a.dY, b.dY)
    assert not np.array_equal(a.dW, sample_noise(grid, 1, 43).dW)


def test_noise_does_not_depend_on_workers_or_ensemble_size():
    grid = TimeGrid(1.0, 4)
    serial = sample_noise(grid, 9000, 5, workers=1)
    threaded = sample_noise(grid, 9000, 5, workers=4)
    np.testing.assert_array_equal(serial.dW, threaded.dW)
    np.testing.assert_array_equal(serial.dY, threaded.dY)
    np.testing.assert_array_equal(sample_noise(grid, 10, 5).dY, serial.dY[:10])


def test_noise_increments_are_centred():
    grid = TimeGrid(1.0, 64)
    noise = sample_noise(grid, 20_000, 7)
    flat = noise.dW.ravel()
    se = flat.std(ddof=1) / np.sqrt(flat.size)
    assert abs(flat.mean()) <= 4 * se
    assert flat.var() == pytest.approx(grid.dt, rel=0.02)


def test_brownian_state_without_observation_drift(make_scalar):
    p = make_scalar(x0=0.0, sigma1=1.0)
    grid = TimeGrid(1.0, 16)
    ens = simulate_forward(p, _constant_policy(p), sample_noise(grid, 50, 3))
    np.testing.assert_allclose(ens.x[:, 1:, 0], np.cumsum(ens.dW, axis=1), rtol=0, atol=1e-14)
    np.testing.assert_array_equal(ens.log_rho, 0.0)
    np.testing.assert_array_equal(ens.rho, 1.0)


def test_constant_observation_drift_closed_form(make_scalar):
    c = 0.7
    p = make_scalar(h=lambda t, x, u: np.full(x.shape[0], c))
    grid = TimeGrid(2.0, 32)
    ens = simulate_forward(p, _constant_policy(p), sample_noise(grid, 40, 1))
    np.testing.assert_allclose(ens.log_rho[:, -1], c * ens.Y[:, -1] - 0.5 * c**2 * grid.T, atol=1e-12)
    assert np.max(innovation_identity_gap(ens)) <= 1e-12


def test_policy_dimension_must_match(make_scalar):
    p = make_scalar()
    wide = ControlPolicy.zeros(ObservationFeatureMap((1,), 1), ControlSet.box([-1, -1], [1, 1]))
    with pytest.raises(DimensionMismatch):
        simulate_forward(p, wide, sample_noise(TimeGrid(1.0, 2), 3, 0))


def test_state_overflow_reports_path_and_step(make_scalar):
    p = make_scalar(x0=1.0, b=lambda t, x, u: 1e200 * x)
    with pytest.raises(NonFinite) as info:
        simulate_forward(p, _constant_policy(p), sample_noise(TimeGrid(1.0, 8), 4, 0))
    assert info.value.path == 0
    assert info.value.step >= 1


def test_density_check_without_observation_drift(make_scalar):
    p = make_scalar(sigma1=1.0)
    ens = simulate_forward(p, _constant_policy(p), sample_noise(TimeGrid(1.0, 8), 100, 2))
    rows = density_martingale_check(ens)
    assert [r.step for r in rows] == [2, 4, 8]
    for row in rows:
        assert row.mean == 1.0
        assert row.z == 0.0


def test_density_check_single_path_has_no_standard_error(lqg_problem):
    ens = simulate_forward(lqg_problem, _constant_policy(lqg_problem), sample_noise(TimeGrid(1.0, 8), 1, 2))
    row = density_martingale_check(ens)[-1]
    assert np.isnan(row.se)
    assert np.isnan(row.z)


def test_moments_deterministic_state_and_constant_control(make_scalar):
    p = make_scalar(x0=2.0)
    grid = TimeGrid(2.0, 10)
    ens = simulate_forward(p, _constant_policy(p, 0.5), sample_noise(grid, 5, 0))
    moments = moment_diagnostics(ens)
    assert moments["sup_x4"][0] == 16.0
    assert moments["admissibility_l4"][0] == pytest.approx(0.5**4 * grid.T**2, rel=1e-12)
    assert moments["sup_rho2"][0] == 1.0
    assert "sup_y4" not in moments


@pytest.mark.slow
def test_density_martingale_on_lqg(lqg_problem):
    ens = simulate_forward(lqg_problem, _constant_policy(lqg_problem), sample_noise(TimeGrid(1.0, 64), 100_000, 7))
    for row in density_martingale_check(ens):
        assert abs(row.z) <= 3.0
    assert all(np.isfinite(v[0]) for v in moment_diagnostics(ens).values())
