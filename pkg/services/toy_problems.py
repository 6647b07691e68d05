"""
Analytic instances with known solutions, used as named problems and test oracles.
"""

import numpy as np

from services.problem import CoefficientSet, ControlSet, Dimensions, ProblemInstance, build_problem


def _zeros(cols: int):
    return lambda *args: np.zeros((args[1].shape[0] if len(args) > 1 else args[0].shape[0], cols))


def _zeros_jac(rows: int, cols: int):
    return lambda *args: np.zeros((args[1].shape[0] if len(args) > 1 else args[0].shape[0], rows, cols))


def _scalar(value: float = 0.0):
    return lambda *args: np.full(args[1].shape[0] if len(args) > 1 else args[0].shape[0], value)


def _forward_partials(n: int, k: int) -> dict:
    """Zero partials of b, sigma1, sigma2 and h."""
    partials = {}
    for fn in ("b", "sigma1", "sigma2"):
        partials[f"{fn}_x"] = _zeros_jac(n, n)
        partials[f"{fn}_u"] = _zeros_jac(n, k)
    partials["h_x"] = _zeros(n)
    partials["h_u"] = _zeros(k)
    return partials


def quadratic_toy(c: float = 1.0, theta_star: float = 0.5, T: float = 1.0, bound: float = 10.0) -> ProblemInstance:
    """
    Deterministic quadratic: running cost (c/T)(u - theta*)^2 and nothing
    else, so a constant control theta has cost c (theta - theta*)^2.
    """
    coeffs = CoefficientSet(
        x0=np.zeros(1),
        b=_zeros(1),
        sigma1=_zeros(1),
        sigma2=_zeros(1),
        h=_scalar(),
        l=lambda t, x, y, z1, z2, u: (c / T) * (u[:, 0] - theta_star) ** 2,
        Phi=_scalar(),
        partials={
            **_forward_partials(1, 1),
            "l_x": _zeros(1),
            "l_u": lambda t, x, y, z1, z2, u: (2.0 * c / T) * (u - theta_star),
            "Phi_x": _zeros(1),
        },
    )
    return build_problem(Dimensions(1, 0, 1, T), coeffs, ControlSet.box([-bound], [bound]), "quadratic_toy")


def _backward_instance(label: str, x0: float, sigma1: float, alpha: float, phi_slope: float, phi_const: float,
                       gamma_slope: float, T: float) -> ProblemInstance:
    """Scalar instance with f = alpha y, phi = phi_slope x + phi_const, gamma = gamma_slope y."""
    coeffs = CoefficientSet(
        x0=np.array([x0]),
        b=_zeros(1),
        sigma1=lambda t, x, u: np.full((x.shape[0], 1), sigma1),
        sigma2=_zeros(1),
        h=_scalar(),
        l=_scalar(),
        Phi=_scalar(),
        f=lambda t, x, y, z1, z2, u: alpha * y,
        phi=lambda x: phi_slope * x + phi_const,
        gamma=lambda y: gamma_slope * y[:, 0],
        partials={
            **_forward_partials(1, 1),
            "f_x": _zeros_jac(1, 1),
            "f_y": lambda t, x, y, z1, z2, u: np.full((x.shape[0], 1, 1), alpha),
            "f_z1": _zeros_jac(1, 1),
            "f_z2": _zeros_jac(1, 1),
            "f_u": _zeros_jac(1, 1),
            "phi_x": lambda x: np.full((x.shape[0], 1, 1), phi_slope),
            "l_x": _zeros(1),
            "l_y": _zeros(1),
            "l_z1": _zeros(1),
            "l_z2": _zeros(1),
            "l_u": _zeros(1),
            "Phi_x": _zeros(1),
            "gamma_y": lambda y: np.full((y.shape[0], 1), gamma_slope),
        },
    )
    return build_problem(Dimensions(1, 1, 1, T), coeffs, ControlSet.box([-1.0], [1.0]), label)


def bsde_linear_driver(alpha: float = 1.0, gamma_slope: float = 1.0, T: float = 1.0) -> ProblemInstance:
    """
    Deterministic backward equation dy = alpha y dt, y(T) = 1, so y(0) = exp(-alpha T);
    with gamma(y) = gamma_slope y the adjoint k(t) = -gamma_slope exp(-alpha t).
    """
    return _backward_instance("bsde_linear_driver", 0.0, 0.0, alpha, 0.0, 1.0, gamma_slope, T)


def martingale_rep(x0: float = 0.0, T: float = 1.0) -> ProblemInstance:
    """x a Brownian motion from x0, f = 0, y(T) = x(T): y(t) = x(t), z1 = 1, z2 = 0."""
    return _backward_instance("martingale_rep", x0, 1.0, 0.0, 1.0, 0.0, 0.0, T)


def adjoint_square(x0: float = 0.0, T: float = 1.0) -> ProblemInstance:
    """x a Brownian motion, m = 0, Phi = x^2: the adjoint is p(t) = 2 x(t)."""
    coeffs = CoefficientSet(
        x0=np.array([x0]),
        b=_zeros(1),
        sigma1=lambda t, x, u: np.ones((x.shape[0], 1)),
        sigma2=_zeros(1),
        h=_scalar(),
        l=_scalar(),
        Phi=lambda x: x[:, 0] ** 2,
        partials={
            **_forward_partials(1, 1),
            "l_x": _zeros(1),
            "l_u": _zeros(1),
            "Phi_x": lambda x: 2.0 * x,
        },
    )
    return build_problem(Dimensions(1, 0, 1, T), coeffs, ControlSet.box([-1.0], [1.0]), "adjoint_square")


def zero_problem(n: int = 1, m: int = 1, k: int = 1, T: float = 1.0) -> ProblemInstance:
    """Every coefficient and partial identically zero."""
    partials = {
        **_forward_partials(n, k),
        "l_x": _zeros(n),
        "l_u": _zeros(k),
        "Phi_x": _zeros(n),
    }
    backward = {}
    if m:
        partials.update(
            {
                "f_x": _zeros_jac(m, n),
                "f_y": _zeros_jac(m, m),
                "f_z1": _zeros_jac(m, m),
                "f_z2": _zeros_jac(m, m),
                "f_u": _zeros_jac(m, k),
                "phi_x": _zeros_jac(m, n),
                "l_y": _zeros(m),
                "l_z1": _zeros(m),
                "l_z2": _zeros(m),
                "gamma_y": _zeros(m),
            }
        )
        backward = {"f": _zeros(m), "phi": _zeros(m), "gamma": _scalar()}
    coeffs = CoefficientSet(
        x0=np.zeros(n),
        b=_zeros(n),
        sigma1=_zeros(n),
        sigma2=_zeros(n),
        h=_scalar(),
        l=_scalar(),
        Phi=_scalar(),
        partials=partials,
        **backward,
    )
    return build_problem(Dimensions(n, m, k, T), coeffs, ControlSet.box(-np.ones(k), np.ones(k)), "zero_problem")


def lq_fbsde(
    a: float = -0.5,
    b_u: float = 1.0,
    sigma: float = 0.5,
    s2: float = 0.2,
    c: float = 0.5,
    alpha: float = -0.3,
    kappa: float = 0.5,
    Q: float = 1.0,
    R: float = 1.0,
    Q_T: float = 0.5,
    g: float = 0.5,
    x0: float = 1.0,
    T: float = 1.0,
    u_max: float = 5.0,
) -> ProblemInstance:
    """
    Scalar linear-quadratic forward-backward instance with correlated
    observation noise:

        b = a x + b_u u,  sigma1 = sigma,  sigma2 = s2,  h = c x
        f = alpha y + kappa x,  phi = x,  gamma = g y^2
        l = Q x^2 + R u^2,  Phi = Q_T x^2
    """
    coeffs = CoefficientSet(
        x0=np.array([x0]),
        b=lambda t, x, u: a * x + b_u * u,
        sigma1=lambda t, x, u: np.full((x.shape[0], 1), sigma),
        sigma2=lambda t, x, u: np.full((x.shape[0], 1), s2),
        h=lambda t, x, u: c * x[:, 0],
        l=lambda t, x, y, z1, z2, u: Q * x[:, 0] ** 2 + R * u[:, 0] ** 2,
        Phi=lambda x: Q_T * x[:, 0] ** 2,
        f=lambda t, x, y, z1, z2, u: alpha * y + kappa * x,
        phi=lambda x: x.copy(),
        gamma=lambda y: g * y[:, 0] ** 2,
        partials={
            "b_x": lambda t, x, u: np.full((x.shape[0], 1, 1), a),
            "b_u": lambda t, x, u: np.full((x.shape[0], 1, 1), b_u),
            "sigma1_x": _zeros_jac(1, 1),
            "sigma1_u": _zeros_jac(1, 1),
            "sigma2_x": _zeros_jac(1, 1),
            "sigma2_u": _zeros_jac(1, 1),
            "h_x": lambda t, x, u: np.full((x.shape[0], 1), c),
            "h_u": _zeros(1),
            "f_x": lambda t, x, y, z1, z2, u: np.full((x.shape[0], 1, 1), kappa),
            "f_y": lambda t, x, y, z1, z2, u: np.full((x.shape[0], 1, 1), alpha),
            "f_z1": _zeros_jac(1, 1),
            "f_z2": _zeros_jac(1, 1),
            "f_u": _zeros_jac(1, 1),
            "phi_x": lambda x: np.ones((x.shape[0], 1, 1)),
            "l_x": lambda t, x, y, z1, z2, u: 2.0 * Q * x,
            "l_y": _zeros(1),
            "l_z1": _zeros(1),
            "l_z2": _zeros(1),
            "l_u": lambda t, x, y, z1, z2, u: 2.0 * R * u,
            "Phi_x": lambda x: 2.0 * Q_T * x,
            "gamma_y": lambda y: 2.0 * g * y,
        },
        bound_C=10.0,
    )
    return build_problem(Dimensions(1, 1, 1, T), coeffs, ControlSet.box([-u_max], [u_max]), "lq_fbsde")
