import numpy as np
import pytest

from services.filtering import ObservationFeatureMap
from services.policy import ControlPolicy, evaluate_policy, policy_jacobian
from services.problem import ControlSet
from services.simulate import TimeGrid
from utils.errors import DimensionMismatch

GRID = TimeGrid(1.0, 16)


@pytest.fixture
def observations():
    return np.cumsum(np.random.default_rng(0).normal(0.0, 0.25, (200, GRID.N + 1)), axis=1)


@pytest.fixture
def fmap():
    return ObservationFeatureMap.default(GRID.N, degree=2)


def test_zero_parameters_give_zero_control(fmap, observations):
    pol = ControlPolicy.zeros(fmap, ControlSet.box([-1.0], [1.0]))
    for j in (0, 7, GRID.N - 1):
        np.testing.assert_array_equal(evaluate_policy(pol, j, observations[:, : j + 1], GRID), 0.0)


def test_constant_policy_is_clamped(fmap, observations):
    pol = ControlPolicy.constant(5.0, fmap, ControlSet.box([-1.0], [1.0]))
    np.testing.assert_array_equal(pol.evaluate(3, observations, GRID), 1.0)


def test_parameter_length_is_checked(fmap):
    with pytest.raises(DimensionMismatch):
        ControlPolicy(np.zeros(fmap.feature_count + 1), fmap, ControlSet.box([-1.0], [1.0]))
    pol = ControlPolicy.zeros(fmap, ControlSet.box([-1.0, -1.0], [1.0, 1.0]))
    assert pol.Theta.shape == (2, fmap.feature_count)


def test_outputs_ignore_future_observations(fmap, observations):
    rng = np.random.default_rng(1)
    pol = ControlPolicy(rng.normal(0, 0.3, fmap.feature_count), fmap, ControlSet.box([-1.0], [1.0]))
    for j in rng.integers(0, GRID.N, size=20):
        mutated = observations.copy()
        mutated[:, j + 1 :] = rng.standard_normal(mutated[:, j + 1 :].shape)
        np.testing.assert_array_equal(pol.evaluate(j, observations, GRID), pol.evaluate(j, mutated, GRID))
        np.testing.assert_array_equal(pol.jacobian(j, observations, GRID), pol.jacobian(j, mutated, GRID))


def test_short_prefix_is_rejected(fmap, observations):
    pol = ControlPolicy.zeros(fmap, ControlSet.box([-1.0], [1.0]))
    with pytest.raises(ValueError):
        evaluate_policy(pol, 5, observations[:, :3], GRID)
    with pytest.raises(ValueError):
        policy_jacobian(pol, 5, observations[:, :3], GRID)


def test_interior_jacobian_is_features_times_identity(fmap, observations):
    box = ControlSet.box([-100.0, -100.0], [100.0, 100.0])
    pol = ControlPolicy.zeros(fmap, box)
    j = 4
    phi = fmap.features(j, observations, GRID)
    jac = pol.jacobian(j, observations, GRID)
    F = fmap.feature_count
    expected = np.zeros_like(jac)
    expected[:, 0, :F] = phi
    expected[:, 1, F:] = phi
    np.testing.assert_array_equal(jac, expected)


def test_clamped_coordinate_has_zero_row(fmap, observations):
    Theta = np.zeros((2, fmap.feature_count))
    Theta[0, 0] = 0.2
    Theta[1, 0] = 7.0
    pol = ControlPolicy(Theta.ravel(), fmap, ControlSet.box([-1.0, -1.0], [1.0, 1.0]))
    jac = pol.jacobian(2, observations, GRID)
    np.testing.assert_array_equal(jac[:, 1], 0.0)
    assert np.all(jac[:, 0, 0] == 1.0)


def test_jacobian_matches_finite_differences(fmap, observations):
    rng = np.random.default_rng(2)
    pol = ControlPolicy(rng.normal(0.0, 0.01, fmap.feature_count), fmap, ControlSet.box([-10.0], [10.0]))
    j = 9
    jac = pol.jacobian(j, observations, GRID)
    step = 1e-6
    for c in range(pol.theta.size):
        bump = np.zeros(pol.theta.size)
        bump[c] = step
        up = pol.with_theta(pol.theta + bump).evaluate(j, observations, GRID)
        down = pol.with_theta(pol.theta - bump).evaluate(j, observations, GRID)
        np.testing.assert_allclose(jac[:, :, c], (up - down) / (2 * step), atol=1e-8)
