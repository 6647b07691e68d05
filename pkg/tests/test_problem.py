import numpy as np
import pytest

from services.problem import (CoefficientSet, ControlSet, Dimensions, build_problem, check_gradients,
                              project_control)
from services.toy_problems import lq_fbsde, zero_problem
from utils.errors import DimensionMismatch, EmptySet, EvaluatorFailure, MissingPartial


def _square_cost(t, x, y, z1, z2, u):
    return u[:, 0] ** 2


def test_lqg_instance_has_scalar_dimensions(lqg_problem):
    d = lqg_problem.dims
    assert (d.n, d.m, d.k, d.T) == (1, 0, 1, 1.0)
    assert lqg_problem.label == "lqg"


def test_drift_with_wrong_length_is_rejected(make_scalar):
    with pytest.raises(DimensionMismatch, match="'b'"):
        make_scalar(b=lambda t, x, u: np.zeros((x.shape[0], 2)))


def test_backward_evaluators_need_m_positive():
    coeffs = CoefficientSet(
        x0=np.zeros(1),
        b=lambda t, x, u: np.zeros((x.shape[0], 1)),
        sigma1=lambda t, x, u: np.zeros((x.shape[0], 1)),
        sigma2=lambda t, x, u: np.zeros((x.shape[0], 1)),
        h=lambda t, x, u: np.zeros(x.shape[0]),
        l=lambda t, x, y, z1, z2, u: np.zeros(x.shape[0]),
        Phi=lambda x: np.zeros(x.shape[0]),
        f=lambda t, x, y, z1, z2, u: y,
    )
    with pytest.raises(DimensionMismatch, match="m=0"):
        build_problem(Dimensions(1, 0, 1, 1.0), coeffs, ControlSet.box([-1], [1]))


def test_raising_evaluator_is_reported(make_scalar):
    def broken(t, x, u):
        raise ZeroDivisionError("boom")

    with pytest.raises(EvaluatorFailure, match="'h'"):
        make_scalar(h=broken)


def test_initial_state_and_control_set_dimensions_are_checked(make_scalar):
    with pytest.raises(DimensionMismatch):
        Dimensions(0, 0, 1, 1.0)
    coeffs = zero_problem().coeffs
    with pytest.raises(DimensionMismatch, match="R\\^2"):
        build_problem(Dimensions(1, 1, 1, 1.0), coeffs, ControlSet.box([-1, -1], [1, 1]))


def test_backward_values_are_zero_without_backward_component(lqg_problem):
    point = {"t": 0.0, "x": np.ones((3, 1)), "y": np.zeros((3, 0)), "z1": np.zeros((3, 0)),
             "z2": np.zeros((3, 0)), "u": np.zeros((3, 1))}
    assert lqg_problem.evaluate("f", point).shape == (3, 0)
    assert lqg_problem.evaluate("l_y", point).shape == (3, 0)
    assert lqg_problem.evaluate("gamma", point).shape == (3,)


def test_missing_partial_raises(make_scalar):
    p = make_scalar(l=_square_cost, full_partials=False)
    point = {"t": 0.0, "x": np.zeros((1, 1)), "y": np.zeros((1, 0)), "z1": np.zeros((1, 0)),
             "z2": np.zeros((1, 0)), "u": np.zeros((1, 1))}
    with pytest.raises(MissingPartial, match="l_u"):
        p.evaluate("l_u", point)


def test_gradient_check_exact_polynomial(make_scalar):
    p = make_scalar(l=_square_cost, partials={"l_u": lambda t, x, y, z1, z2, u: 2.0 * u})
    report = check_gradients(p, samples=50, step=1e-5)
    assert report.entry("l_u").max_rel_error <= 1e-8
    assert report.passed


def test_gradient_check_flags_wrong_partial(make_scalar):
    p = make_scalar(l=_square_cost, partials={"l_u": lambda t, x, y, z1, z2, u: 3.0 * u})
    report = check_gradients(p, samples=50)
    assert not report.passed
    assert report.failures == ["l_u"]
    assert report.entry("l_u").max_rel_error > 0.1


def test_gradient_check_passes_on_benchmarks(lqg_problem):
    assert check_gradients(lqg_problem, tol=1e-5).passed
    assert check_gradients(lq_fbsde(), tol=1e-5).passed


def test_bound_violation_is_reported(make_scalar):
    p = make_scalar(h=lambda t, x, u: np.full(x.shape[0], 5.0), bound_C=1.0)
    report = check_gradients(p, samples=3)
    assert "h" in report.failures
    bound = next(b for b in report.bounds if b.name == "h")
    assert bound.max_abs == 5.0


def test_box_projection():
    box = ControlSet.box([-1.0], [1.0])
    assert project_control(box, np.array([0.5]))[0] == 0.5
    assert project_control(box, np.array([3.0]))[0] == 1.0


def test_ball_projection_scales_radially():
    ball = ControlSet.ball([0.0, 0.0], 2.0)
    np.testing.assert_allclose(project_control(ball, np.array([3.0, 4.0])), [1.2, 1.6], atol=1e-15)
    np.testing.assert_array_equal(project_control(ball, np.array([0.5, -0.5])), [0.5, -0.5])


def test_halfspace_projection_and_empty_set():
    hs = ControlSet.halfspaces([[1.0, 1.0]], [1.0])
    np.testing.assert_allclose(hs.project(np.array([2.0, 2.0])), [0.5, 0.5], atol=1e-12)
    assert hs.contains(hs.sample_inner(np.random.default_rng(0), 20)).all()
    with pytest.raises(EmptySet):
        ControlSet.halfspaces([[1.0], [-1.0]], [-1.0, -1.0])


def test_projection_jacobians():
    box = ControlSet.box([-1.0, -1.0], [1.0, 1.0])
    J = box.jacobian(np.array([[0.2, 3.0]]))[0]
    np.testing.assert_array_equal(J, [[1.0, 0.0], [0.0, 0.0]])

    ball = ControlSet.ball([0.0, 0.0], 1.0)
    v = np.array([1.5, -0.7])
    step = 1e-6
    fd = np.column_stack([(ball.project(v + step * e) - ball.project(v - step * e)) / (2 * step) for e in np.eye(2)])
    np.testing.assert_allclose(ball.jacobian(v), fd, atol=1e-8)

    hs = ControlSet.halfspaces([[1.0, 0.0]], [0.0])
    np.testing.assert_allclose(hs.jacobian(np.array([[2.0, 1.0]]))[0], [[0.0, 0.0], [0.0, 1.0]], atol=1e-12)


@pytest.mark.parametrize(
    "control_set",
    [
        ControlSet.box([-1.0, 0.0], [1.0, 2.0]),
        ControlSet.ball([0.5, -0.5], 1.5),
        ControlSet.halfspaces([[1.0, 1.0], [-1.0, 2.0]], [1.0, 0.5]),
    ],
    ids=["box", "ball", "halfspace"],
)
def test_projection_is_nonexpansive_and_idempotent(control_set):
    rng = np.random.default_rng(4)
    a = 3.0 * rng.standard_normal((500, 2))
    b = 3.0 * rng.standard_normal((500, 2))
    pa, pb = control_set.project(a), control_set.project(b)
    assert np.all(np.linalg.norm(pa - pb, axis=1) <= np.linalg.norm(a - b, axis=1) + 1e-10)
    np.testing.assert_allclose(control_set.project(pa), pa, atol=1e-10)
    assert control_set.contains(pa, tol=1e-9).all()
