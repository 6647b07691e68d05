"""
Scalar partially observed linear-quadratic benchmark with a separation oracle.

    dx = (a x + b_u u) dt + sigma dW,    dY = h dt + dW^u,    h = c x  (or h = c)
    J  = E^u[ int (Q x^2 + R u^2) dt + Q_T x(T)^2 ]

The oracle integrates the control and filter Riccati equations with a
classical fourth-order Runge-Kutta step on a fine grid. The optimal control
is u* = -G(t) xhat(t) with G = b_u P / R and xhat the Kalman-Bucy mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.integrate import simpson
from tqdm import tqdm

from config.settings import SHOW_PROGRESS
from services.filtering import ObservationFeatureMap
from services.policy import ControlPolicy
from services.problem import CoefficientSet, ControlSet, Dimensions, ProblemInstance, build_problem
from services.simulate import PathEnsemble, TimeGrid, sample_noise, simulate_forward
from utils.errors import SingularRegression


@dataclass(frozen=True)
class LQGSpec:
    a: float = 0.0
    b_u: float = 1.0
    sigma: float = 1.0
    c: float = 1.0
    Q: float = 1.0
    R: float = 1.0
    Q_T: float = 0.0
    T: float = 1.0
    x0: float = 1.0
    u_max: float = 10.0
    h_kind: Literal["state", "time"] = "state"
    bound_C: float = 10.0

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError(f"control weight R must be positive, got {self.R}")
        if self.Q < 0 or self.Q_T < 0:
            raise ValueError("state weights Q and Q_T must be non-negative")
        if self.h_kind not in ("state", "time"):
            raise ValueError(f"h_kind must be 'state' or 'time', got '{self.h_kind}'")
        if not self.u_max > 0:
            raise ValueError("u_max must be positive")

    @property
    def c_eff(self) -> float:
        """Observation gain on the state; zero when h does not depend on x."""
        return self.c if self.h_kind == "state" else 0.0


def build_lqg_problem(spec: LQGSpec, label: str | None = None) -> ProblemInstance:
    """Problem instance (n = k = 1, m = 0) with every partial supplied."""

    def const(value: float, cols: int = 1):
        return lambda t, x, u: np.full((x.shape[0], cols), value)

    def const_jac(value: float):
        return lambda t, x, u: np.full((x.shape[0], 1, 1), value)

    if spec.h_kind == "state":
        h = lambda t, x, u: spec.c * x[:, 0]
    else:
        h = lambda t, x, u: np.full(x.shape[0], spec.c)

    coeffs = CoefficientSet(
        x0=np.array([spec.x0]),
        b=lambda t, x, u: spec.a * x + spec.b_u * u,
        sigma1=const(spec.sigma),
        sigma2=const(0.0),
        h=h,
        l=lambda t, x, y, z1, z2, u: spec.Q * x[:, 0] ** 2 + spec.R * u[:, 0] ** 2,
        Phi=lambda x: spec.Q_T * x[:, 0] ** 2,
        partials={
            "b_x": const_jac(spec.a),
            "b_u": const_jac(spec.b_u),
            "sigma1_x": const_jac(0.0),
            "sigma1_u": const_jac(0.0),
            "sigma2_x": const_jac(0.0),
            "sigma2_u": const_jac(0.0),
            "h_x": const(spec.c_eff),
            "h_u": const(0.0),
            "l_x": lambda t, x, y, z1, z2, u: 2.0 * spec.Q * x,
            "l_u": lambda t, x, y, z1, z2, u: 2.0 * spec.R * u,
            "Phi_x": lambda x: 2.0 * spec.Q_T * x,
        },
        bound_C=spec.bound_C,
    )
    dims = Dimensions(n=1, m=0, k=1, T=spec.T)
    label = label or ("lqg" if spec.h_kind == "state" else "lqg_time_h")
    return build_problem(dims, coeffs, ControlSet.box([-spec.u_max], [spec.u_max]), label)


@dataclass(frozen=True, eq=False)
class RiccatiOracle:
    """Fine-grid Riccati solutions, gains and the optimal cost."""

    t: np.ndarray
    P: np.ndarray
    Sigma: np.ndarray
    G: np.ndarray
    K: np.ndarray
    J_star: float

    def on_grid(self, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
        """Control gain G and filter gain K at the grid nodes."""
        nodes = grid.nodes
        return np.interp(nodes, self.t, self.G), np.interp(nodes, self.t, self.K)


def _rk4(rhs, y0: float, t: np.ndarray, desc: str) -> np.ndarray:
    out = np.empty(t.size)
    out[0] = y0
    for i in tqdm(range(t.size - 1), desc=desc, disable=not SHOW_PROGRESS):
        s, y, dt = t[i], out[i], t[i + 1] - t[i]
        k1 = rhs(s, y)
        k2 = rhs(s + dt / 2, y + dt * k1 / 2)
        k3 = rhs(s + dt / 2, y + dt * k2 / 2)
        k4 = rhs(s + dt, y + dt * k3)
        out[i + 1] = y + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6
    return out


def riccati_oracle(spec: LQGSpec, fine_steps: int = 10_000) -> RiccatiOracle:
    """
    Separation-principle oracle.

        -P'     = 2 a P + Q - b_u^2 P^2 / R,      P(T) = Q_T
        Sigma'  = 2 a Sigma + sigma^2 - c^2 Sigma^2,  Sigma(0) = 0
        J*      = P(0) x0^2 + int (P K^2 + Q Sigma) dt + Q_T Sigma(T),   K = c Sigma

    Args:
        spec: Benchmark parameters
        fine_steps: Fine-grid step count (use at least ten times the simulation grid)

    Returns:
        RiccatiOracle on the fine grid
    """
    if fine_steps < 2:
        raise ValueError("fine_steps must be at least 2")
    t = np.linspace(0.0, spec.T, fine_steps + 1)
    c = spec.c_eff
    # P runs backward: integrate in reversed time s = T - t
    P_rev = _rk4(lambda s, P: 2 * spec.a * P + spec.Q - spec.b_u**2 * P**2 / spec.R, spec.Q_T, t, "Control Riccati")
    P = P_rev[::-1]
    Sigma = _rk4(lambda s, S: 2 * spec.a * S + spec.sigma**2 - c**2 * S**2, 0.0, t, "Filter Riccati")
    G = spec.b_u * P / spec.R
    K = c * Sigma
    J_star = P[0] * spec.x0**2 + simpson(P * K**2 + spec.Q * Sigma, x=t) + spec.Q_T * Sigma[-1]
    return RiccatiOracle(t, P, Sigma, G, K, float(J_star))


def riccati_convergence_study(spec: LQGSpec, fine_steps: int = 10_000) -> dict[str, float]:
    """J* at ``fine_steps`` and ``fine_steps // 2`` with their absolute difference."""
    fine = riccati_oracle(spec, fine_steps).J_star
    coarse = riccati_oracle(spec, fine_steps // 2).J_star
    return {"J_fine": fine, "J_half": coarse, "delta": abs(fine - coarse)}


def oracle_curves(oracle: RiccatiOracle, grid: TimeGrid) -> list[tuple[float, float, float, float]]:
    """(t, P, Sigma, G) at the grid nodes."""
    nodes = grid.nodes
    P = np.interp(nodes, oracle.t, oracle.P)
    Sigma = np.interp(nodes, oracle.t, oracle.Sigma)
    G = np.interp(nodes, oracle.t, oracle.G)
    return [(float(a), float(b), float(c), float(d)) for a, b, c, d in zip(nodes, P, Sigma, G)]


def _filter_step(spec: LQGSpec, xhat, u, K, dY, dt):
    return xhat + (spec.a * xhat + spec.b_u * u) * dt + K * (dY - spec.c_eff * xhat * dt)


def kalman_bucy_mean(spec: LQGSpec, oracle: RiccatiOracle, ens: PathEnsemble) -> np.ndarray:
    """
    Kalman-Bucy conditional mean along an ensemble, shape (M, N+1).

    Uses the applied controls ens.u and the observation increments ens.dY.
    """
    grid = ens.grid
    _, K = oracle.on_grid(grid)
    xhat = np.empty((ens.paths, grid.N + 1))
    xhat[:, 0] = spec.x0
    for j in range(grid.N):
        xhat[:, j + 1] = _filter_step(spec, xhat[:, j], ens.u[:, j, 0], K[j], ens.dY[:, j], grid.dt)
    return xhat


class OracleFeedback:
    """
    Separation-principle feedback u = clip(-G xhat) as an observation-adapted
    policy; the filter is re-run from t = 0 on the observation prefix.
    """

    k = 1

    def __init__(self, spec: LQGSpec, oracle: RiccatiOracle):
        self.spec = spec
        self.oracle = oracle

    def actions(self, Y: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """Oracle actions at nodes 0..Y.shape[1]-1, shape (M, Y.shape[1])."""
        G, K = self.oracle.on_grid(grid)
        steps = Y.shape[1]
        dY = np.diff(Y, axis=1)
        xhat = np.full(Y.shape[0], self.spec.x0)
        u = np.empty((Y.shape[0], steps))
        for j in range(steps):
            u[:, j] = np.clip(-G[j] * xhat, -self.spec.u_max, self.spec.u_max)
            if j < steps - 1:
                xhat = _filter_step(self.spec, xhat, u[:, j], K[j], dY[:, j], grid.dt)
        return u

    def evaluate(self, j: int, Y: np.ndarray, grid: TimeGrid) -> np.ndarray:
        return self.actions(Y[:, : j + 1], grid)[:, -1:]


@dataclass(frozen=True, eq=False)
class OracleFit:
    policy: ControlPolicy
    rms: float
    max_action: float


def oracle_policy_fit(
    spec: LQGSpec,
    oracle: RiccatiOracle,
    fmap: ObservationFeatureMap,
    grid: TimeGrid,
    M: int = 4000,
    seed: int = 0,
    workers: int | None = None,
) -> OracleFit:
    """
    Least-squares fit of policy features to oracle actions.

    Paths are simulated under the oracle feedback; rows are weighted by rho
    so the fit targets the controlled measure. The returned RMS is the
    rho-weighted in-sample action error.

    Raises:
        SingularRegression: The pooled design is rank deficient
    """
    problem = build_lqg_problem(spec)
    feedback = OracleFeedback(spec, oracle)
    ens = simulate_forward(problem, feedback, sample_noise(grid, M, seed, workers), workers)
    actions = ens.u[:, :, 0]
    max_action = float(np.max(np.abs(actions)))
    if max_action > spec.u_max / 2:
        print(f"⚠️ Oracle actions reach {max_action:.3g}, above half the control bound {spec.u_max:.3g}")

    rho = ens.rho[:, : grid.N]
    design = np.concatenate([fmap.features(j, ens.Y[:, : j + 1], grid) for j in range(grid.N)])
    target = actions.T.ravel()
    weight = np.sqrt(rho.T.ravel() / rho.mean())
    coef, _, rank, _ = np.linalg.lstsq(design * weight[:, None], target * weight, rcond=None)
    if rank < design.shape[1]:
        raise SingularRegression(f"oracle fit design has rank {rank} < {design.shape[1]} features")
    residual = (design @ coef - target) * weight
    rms = float(np.sqrt(np.mean(residual**2)))
    control_set = problem.control_set
    return OracleFit(ControlPolicy(coef, fmap, control_set, "oracle_fit"), rms, max_action)
