"""
Regression Monte Carlo for the backward component and the adjoint system.

Conditional expectations given the path filtration are replaced by
least-squares projections on polynomials of the regression state
(x, Y, log rho) at each grid node. Martingale integrands are extracted by
increment regression, z ~ E[y_{j+1} dW_j | state_j] / dt, with the same
factorization as the continuation value.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from sklearn.preprocessing import PolynomialFeatures

from config.settings import RIDGE_SCALE
from services.hamiltonian import HamiltonianPoint, grad_H, shift_r2
from services.problem import ProblemInstance
from services.simulate import PathEnsemble
from utils.errors import NonFinite, SingularRegression

# Relative pivot below which a lambda = 0 normal system counts as singular
_SINGULAR_RCOND = 1e-13
# Residual norm (relative) below which a state column is treated as redundant
_REDUNDANT_COLUMN = 1e-8


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial basis of the given degree; ridge None selects the scale-invariant default."""

    degree: int = 2
    ridge: float | None = None

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree}")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")

    def feature_count(self, dim: int) -> int:
        return comb(dim + self.degree, self.degree)


class LeastSquaresProjector:
    """
    Factored ridge least-squares projection onto the columns of a design.

    The normal matrix is factored once; any number of target columns can
    then be projected. Constant design columns (the bias) are not penalised,
    so fitted values keep the (weighted) sample mean of the targets.

    Args:
        X: Design matrix, shape (M, F)
        ridge: Penalty lambda; None uses RIDGE_SCALE * trace(X'WX) / F
        weights: Optional nonnegative per-row weights, shape (M,)

    Raises:
        SingularRegression: The normal system cannot be factored, or is
            numerically singular with lambda = 0
    """

    def __init__(self, X: np.ndarray, ridge: float | None = None, weights: np.ndarray | None = None):
        self.X = X
        self._WX = X if weights is None else X * weights[:, None]
        gram = self._WX.T @ X
        F = gram.shape[0]
        self.ridge = RIDGE_SCALE * np.trace(gram) / F if ridge is None else float(ridge)
        penalty = np.full(F, self.ridge)
        penalty[np.ptp(X, axis=0) == 0] = 0.0
        try:
            self._factor = cho_factor(gram + np.diag(penalty))
        except LinAlgError:
            raise SingularRegression(f"normal matrix of a {X.shape[0]}x{F} design is singular") from None
        pivots = np.abs(np.diag(self._factor[0]))
        if self.ridge == 0 and (pivots.min() ** 2 <= _SINGULAR_RCOND * pivots.max() ** 2):
            raise SingularRegression(f"normal matrix of a {X.shape[0]}x{F} design is numerically singular")

    def coefficients(self, targets: np.ndarray) -> np.ndarray:
        return cho_solve(self._factor, self._WX.T @ targets)

    def fit(self, targets: np.ndarray) -> np.ndarray:
        """In-sample fitted values, same shape as ``targets``."""
        return self.X @ self.coefficients(targets)


def regression_fit(targets: np.ndarray, features: np.ndarray, ridge: float | None = 0.0) -> np.ndarray:
    """
    Least-squares conditional-expectation estimate of targets given features.

    Args:
        targets: Shape (M,) or (M, c)
        features: Design matrix, shape (M, F)
        ridge: Penalty lambda (None selects the default scale)

    Returns:
        In-sample fitted values, same shape as targets
    """
    return LeastSquaresProjector(np.asarray(features, dtype=float), ridge).fit(np.asarray(targets, dtype=float))


def reduce_state(state: np.ndarray) -> np.ndarray:
    """
    Standardize state columns and drop the ones that are constant or affine
    in the columns kept before them.
    """
    state = np.asarray(state, dtype=float)
    if state.shape[1] == 0:
        return state
    centred = state - state.mean(axis=0)
    scale = np.sqrt(np.mean(centred**2, axis=0))
    keep = scale > 0
    z = centred[:, keep] / scale[keep]
    if z.shape[1] == 0:
        return z
    r = np.linalg.qr(np.hstack([np.ones((z.shape[0], 1)), z]), mode="r")
    independent = np.abs(np.diag(r))[1:] > _REDUNDANT_COLUMN * np.sqrt(z.shape[0])
    return z[:, independent]


def polynomial_design(state: np.ndarray, degree: int) -> np.ndarray:
    """Bias plus all monomials up to ``degree`` of the reduced state."""
    z = reduce_state(state)
    if z.shape[1] == 0:
        return np.ones((z.shape[0], 1))
    return PolynomialFeatures(degree=degree, include_bias=True).fit_transform(z)


def ensemble_design(ens: PathEnsemble, j: int, basis: RegressionBasis) -> np.ndarray:
    """Design matrix at grid node j on the regression state (x, Y, log rho)."""
    state = np.column_stack([ens.x[:, j], ens.Y[:, j], ens.log_rho[:, j]])
    return polynomial_design(state, basis.degree)


@dataclass(frozen=True, eq=False)
class BackwardEnsemble:
    """y with shape (M, N+1, m); z1, z2 with shape (M, N, m)."""

    y: np.ndarray
    z1: np.ndarray
    z2: np.ndarray


@dataclass(frozen=True, eq=False)
class AdjointEnsemble:
    """
    Adjoint processes along an ensemble.

    Shapes: p (M, N+1, n); q1, q2 (M, N, n); k (M, N+1, m); r (M, N+1);
    R1, R2 (M, N).
    """

    p: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    k: np.ndarray
    r: np.ndarray
    R1: np.ndarray
    R2: np.ndarray


def point_at(ens: PathEnsemble, back: BackwardEnsemble, j: int) -> dict:
    """Evaluation point (t_j, x_j, y_j, z1_j, z2_j, u_j) for j < N."""
    return {
        "t": float(ens.grid.nodes[j]),
        "x": ens.x[:, j],
        "y": back.y[:, j],
        "z1": back.z1[:, j],
        "z2": back.z2[:, j],
        "u": ens.u[:, j],
    }


def _check_finite(name: str, values: np.ndarray, step: int) -> None:
    bad = ~np.isfinite(values.reshape(values.shape[0], -1)).all(axis=1)
    if bad.any():
        raise NonFinite(name, int(np.argmax(bad)), step)


def _increment_targets(values: np.ndarray, dW: np.ndarray, dY: np.ndarray) -> np.ndarray:
    v = values.reshape(values.shape[0], -1)
    return np.hstack([v, v * dW[:, None], v * dY[:, None]])


def empty_backward(ens: PathEnsemble) -> BackwardEnsemble:
    M, N = ens.paths, ens.grid.N
    return BackwardEnsemble(np.zeros((M, N + 1, 0)), np.zeros((M, N, 0)), np.zeros((M, N, 0)))


def solve_backward(p: ProblemInstance, ens: PathEnsemble, basis: RegressionBasis) -> BackwardEnsemble:
    """
    Explicit backward Euler for (y, z1, z2) under P.

        y_N  = phi(x_N)
        z1_j = E[y_{j+1} dW_j | state_j] / dt
        z2_j = E[y_{j+1} dY_j | state_j] / dt
        y_j  = E[y_{j+1} | state_j] - (f - z2 h)(t_j, x_j, c_j, z1_j, z2_j, u_j) dt

    with c_j the continuation value E[y_{j+1} | state_j] substituted for y_j
    inside the driver. Returns arrays with a zero-width last axis when m = 0.

    Raises:
        SingularRegression: A per-step normal system is singular
        NonFinite: A backward value is NaN or infinite
    """
    m = p.dims.m
    if m == 0:
        return empty_backward(ens)
    grid = ens.grid
    M, N, dt, t = ens.paths, grid.N, grid.dt, grid.nodes
    y = np.empty((M, N + 1, m))
    z1 = np.empty((M, N, m))
    z2 = np.empty((M, N, m))
    y[:, N] = p.evaluate("phi", {"x": ens.x[:, N]})
    _check_finite("y", y[:, N], N)

    for j in range(N - 1, -1, -1):
        projector = LeastSquaresProjector(ensemble_design(ens, j, basis), basis.ridge)
        fitted = projector.fit(_increment_targets(y[:, j + 1], ens.dW[:, j], ens.dY[:, j]))
        cont, z1[:, j], z2[:, j] = fitted[:, :m], fitted[:, m : 2 * m] / dt, fitted[:, 2 * m :] / dt
        point = {"t": float(t[j]), "x": ens.x[:, j], "y": cont, "z1": z1[:, j], "z2": z2[:, j], "u": ens.u[:, j]}
        f = p.evaluate("f", point)
        y[:, j] = cont - (f - z2[:, j] * ens.h_val[:, j, None]) * dt
        _check_finite("y", y[:, j], j)
    return BackwardEnsemble(y, z1, z2)


def solve_adjoint(
    p: ProblemInstance,
    ens: PathEnsemble,
    back: BackwardEnsemble,
    basis: RegressionBasis,
) -> AdjointEnsemble:
    """
    Solve the adjoint system along an ensemble in the order k, then (r, p).

    k runs forward from k_0 = -gamma_y(y_0):

        k_{j+1} = k_j - H_y dt - H_z1 dW_j - H_z2 (dY_j - h_j dt)

    r and p run backward, sharing one factorization per step:

        r_N = Phi(x_N),                      r_j = E[r_{j+1}] + (l + R2 h) dt
        p_N = Phi_x(x_N) - phi_x(x_N)' k_N,  p_j = E[p_{j+1}] + (H_x + q2 h) dt

    (R1, R2) and (q1, q2) come from increment regressions. H_x is taken at
    the shifted observation adjoint R2 - <sigma2, c> - <z2, k> with c the
    continuation value of p.

    Raises:
        SingularRegression: A per-step normal system is singular
        NonFinite: An adjoint value is NaN or infinite
    """
    d = p.dims
    grid = ens.grid
    M, N, dt, t = ens.paths, grid.N, grid.dt, grid.nodes
    n, m = d.n, d.m

    k = np.zeros((M, N + 1, m))
    if m:
        k[:, 0] = -p.evaluate("gamma_y", {"y": back.y[:, 0]})
        zeros_n = np.zeros((M, n))
        for j in range(N):
            # H_y, H_z1, H_z2 do not involve p, q1, q2 or R2eff
            pt = HamiltonianPoint(**point_at(ens, back, j), p=zeros_n, q1=zeros_n, q2=zeros_n, k=k[:, j], R2eff=np.zeros(M))
            innovation = ens.dY[:, j] - ens.h_val[:, j] * dt
            k[:, j + 1] = (
                k[:, j]
                - grad_H(pt, p, "y") * dt
                - grad_H(pt, p, "z1") * ens.dW[:, j, None]
                - grad_H(pt, p, "z2") * innovation[:, None]
            )
            _check_finite("k", k[:, j + 1], j + 1)

    r = np.empty((M, N + 1))
    R1 = np.empty((M, N))
    R2 = np.empty((M, N))
    adj_p = np.empty((M, N + 1, n))
    q1 = np.empty((M, N, n))
    q2 = np.empty((M, N, n))
    r[:, N] = p.evaluate("Phi", {"x": ens.x[:, N]})
    phi_x = p.evaluate("phi_x", {"x": ens.x[:, N]})
    adj_p[:, N] = p.evaluate("Phi_x", {"x": ens.x[:, N]}) - np.einsum("mab,ma->mb", phi_x, k[:, N])
    _check_finite("r", r[:, N], N)
    _check_finite("p", adj_p[:, N], N)

    for j in range(N - 1, -1, -1):
        projector = LeastSquaresProjector(ensemble_design(ens, j, basis), basis.ridge)
        targets = np.hstack(
            [
                _increment_targets(r[:, j + 1], ens.dW[:, j], ens.dY[:, j]),
                _increment_targets(adj_p[:, j + 1], ens.dW[:, j], ens.dY[:, j]),
            ]
        )
        fitted = projector.fit(targets)
        r_cont, R1[:, j], R2[:, j] = fitted[:, 0], fitted[:, 1] / dt, fitted[:, 2] / dt
        p_cont, q1[:, j], q2[:, j] = fitted[:, 3 : 3 + n], fitted[:, 3 + n : 3 + 2 * n] / dt, fitted[:, 3 + 2 * n :] / dt

        point = point_at(ens, back, j)
        h = ens.h_val[:, j]
        r[:, j] = r_cont + (p.evaluate("l", point) + R2[:, j] * h) * dt

        r2eff = shift_r2(R2[:, j], p.evaluate("sigma2", point), p_cont, back.z2[:, j], k[:, j])
        pt = HamiltonianPoint(**point, p=p_cont, q1=q1[:, j], q2=q2[:, j], k=k[:, j], R2eff=r2eff)
        adj_p[:, j] = p_cont + (grad_H(pt, p, "x") + q2[:, j] * h[:, None]) * dt
        _check_finite("r", r[:, j], j)
        _check_finite("p", adj_p[:, j], j)

    return AdjointEnsemble(adj_p, q1, q2, k, r, R1, R2)


def adjoint_summary(back: BackwardEnsemble, adj: AdjointEnsemble) -> list[tuple[str, int, float, float]]:
    """(process, component, mean, std) of every backward and adjoint process at t = 0."""
    rows = []
    series = {
        "y": back.y,
        "z1": back.z1,
        "z2": back.z2,
        "p": adj.p,
        "q1": adj.q1,
        "q2": adj.q2,
        "k": adj.k,
        "r": adj.r[..., None],
        "R1": adj.R1[..., None],
        "R2": adj.R2[..., None],
    }
    for name, values in series.items():
        initial = values[:, 0]
        for c in range(initial.shape[-1]):
            rows.append((name, c, float(np.mean(initial[:, c])), float(np.std(initial[:, c]))))
    return rows
