"""
Verification checks tying the numerical pipeline to its analytic identities.

Every comparison draws one noise ensemble and reuses it for all branches
(common random numbers). Failed checks are reported as rows, never raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from services.bsde import RegressionBasis, point_at
from services.filtering import path_costs
from services.hamiltonian import WRT, HamiltonianPoint, eval_H, grad_H, shift_r2
from services.optimize import functional_gradient, necessary_condition_residual, parameter_gradient, run_pipeline
from services.policy import ControlPolicy
from services.problem import ProblemInstance, check_gradients
from services.simulate import TimeGrid, density_martingale_check, sample_noise, simulate_forward
from utils.logging import log_stage


def _policy_theta(direction) -> np.ndarray:
    return np.asarray(direction.theta if isinstance(direction, ControlPolicy) else direction, dtype=float)


# ----------------------------------------------------------------------
# Directional derivative by finite differences


@dataclass(frozen=True)
class DirectionalDerivative:
    eps: list[float]
    fd: list[float]
    extrapolated: float
    analytic: float
    analytic_se: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.extrapolated))
        if scale == 0:
            return 0.0
        return abs(self.extrapolated - self.analytic) / scale


def fd_directional_derivative(
    p: ProblemInstance,
    pol: ControlPolicy,
    direction,
    eps: list[float],
    grid: TimeGrid,
    M: int,
    seed: int,
    basis: RegressionBasis | None = None,
    workers: int | None = None,
) -> DirectionalDerivative:
    """
    Central differences of the cost along a parameter direction, compared with
    the adjoint-based gradient.

        D(eps) = [J(theta + eps d) - J(theta - eps d)] / (2 eps)

    The two smallest step sizes are combined by Richardson extrapolation,
    (r^2 D(eps_small) - D(eps_large)) / (r^2 - 1) with r = eps_large / eps_small.

    Args:
        direction: Parameter direction (vector of length k*F, or a ControlPolicy whose theta is used)
        eps: Step sizes in (0, 1]
    """
    if not eps or any(not 0 < e <= 1 for e in eps):
        raise ValueError("eps values must lie in (0, 1]")
    basis = basis or RegressionBasis()
    delta = _policy_theta(direction)
    noise = sample_noise(grid, M, seed, workers)

    fd = []
    for e in eps:
        if not np.any(delta):
            fd.append(0.0)
            continue
        up = run_pipeline(p, pol.with_theta(pol.theta + e * delta), noise, basis, adjoint=False, workers=workers).J
        down = run_pipeline(p, pol.with_theta(pol.theta - e * delta), noise, basis, adjoint=False, workers=workers).J
        fd.append((up - down) / (2.0 * e))

    order = np.argsort(eps)
    if len(eps) >= 2:
        small, large = order[0], order[1]
        r2 = (eps[large] / eps[small]) ** 2
        extrapolated = (r2 * fd[small] - fd[large]) / (r2 - 1.0)
    else:
        extrapolated = fd[0]

    state = run_pipeline(p, pol, noise, basis, workers=workers)
    grad, se = parameter_gradient(p, pol, state.ens, state.back, state.adj)
    analytic = float(grad @ delta)
    analytic_se = float(np.sqrt(np.sum((se * delta) ** 2)))
    return DirectionalDerivative(list(eps), fd, float(extrapolated), analytic, analytic_se)


# ----------------------------------------------------------------------
# Cost-difference identity


@dataclass(frozen=True)
class CostDifferenceCheck:
    lhs: float
    rhs: float
    se: float
    z: float
    terms: dict[str, float] = field(default_factory=dict)

    @property
    def tolerance(self) -> float:
        se = 0.0 if np.isnan(self.se) else self.se
        return max(3.0 * se, 0.05 * abs(self.lhs))

    @property
    def passed(self) -> bool:
        return abs(self.lhs - self.rhs) <= self.tolerance


def cost_difference_check(
    p: ProblemInstance,
    pol_u: ControlPolicy,
    pol_bar: ControlPolicy,
    grid: TimeGrid,
    M: int,
    seed: int,
    basis: RegressionBasis | None = None,
    workers: int | None = None,
) -> CostDifferenceCheck:
    """
    Check the exact cost-difference representation J(u) - J(ubar) in terms of
    the Hamiltonian and the adjoint processes of ubar.

    Both policies run on the same noise. The right-hand side is assembled
    from thirteen per-path terms (Hamiltonian difference, four linearization
    products, two correlation cross terms, Phi/phi/gamma remainders and three
    density-difference corrections). Each term's mean is kept in ``terms``.
    """
    basis = basis or RegressionBasis()
    noise = sample_noise(grid, M, seed, workers)
    bar = run_pipeline(p, pol_bar, noise, basis, workers=workers)
    alt = run_pipeline(p, pol_u, noise, basis, adjoint=False, workers=workers)
    lhs_paths = path_costs(p, alt.ens, alt.back) - path_costs(p, bar.ens, bar.back)

    eb, ea, bb, ba, adj = bar.ens, alt.ens, bar.back, alt.back, bar.adj
    dt, N = grid.dt, grid.N
    rho_bar, rho_u = eb.rho, ea.rho
    terms = {name: np.zeros(M) for name in (
        "hamiltonian", "lin_x", "lin_y", "lin_z1", "lin_z2", "cross_sigma2_p", "cross_z2_k",
        "terminal_Phi", "terminal_phi", "initial_gamma", "rho_R2_h", "rho_l", "rho_Phi",
    )}

    def dot(a, b):
        return np.einsum("ma,ma->m", a, b)

    for j in range(N):
        pb, pu = point_at(eb, bb, j), point_at(ea, ba, j)
        s2_bar, s2_u = p.evaluate("sigma2", pb), p.evaluate("sigma2", pu)
        r2eff = shift_r2(adj.R2[:, j], s2_bar, adj.p[:, j], bb.z2[:, j], adj.k[:, j])
        adjoint = dict(p=adj.p[:, j], q1=adj.q1[:, j], q2=adj.q2[:, j], k=adj.k[:, j], R2eff=r2eff)
        H_bar_pt = HamiltonianPoint(**pb, **adjoint)
        H_u_pt = HamiltonianPoint(**pu, **adjoint)
        w = rho_bar[:, j] * dt
        dh = ea.h_val[:, j] - eb.h_val[:, j]
        terms["hamiltonian"] += w * (eval_H(H_u_pt, p) - eval_H(H_bar_pt, p))
        for name in ("x", "y", "z1", "z2"):
            terms[f"lin_{name}"] -= w * dot(grad_H(H_bar_pt, p, name), pu[name] - pb[name])
        terms["cross_sigma2_p"] -= w * dot((s2_u - s2_bar) * dh[:, None], adj.p[:, j])
        terms["cross_z2_k"] -= w * dot((ba.z2[:, j] - bb.z2[:, j]) * dh[:, None], adj.k[:, j])
        d_rho = rho_u[:, j] - rho_bar[:, j]
        terms["rho_R2_h"] += adj.R2[:, j] * d_rho * dh * dt
        terms["rho_l"] += (p.evaluate("l", pu) - p.evaluate("l", pb)) * d_rho * dt

    xb, xu = eb.x[:, N], ea.x[:, N]
    dx = xu - xb
    Phi_b, Phi_u = p.evaluate("Phi", {"x": xb}), p.evaluate("Phi", {"x": xu})
    kN = adj.k[:, N]
    terms["terminal_Phi"] = rho_bar[:, N] * (Phi_u - Phi_b - dot(dx, p.evaluate("Phi_x", {"x": xb})))
    phi_b, phi_u = p.evaluate("phi", {"x": xb}), p.evaluate("phi", {"x": xu})
    phi_x = p.evaluate("phi_x", {"x": xb})
    terms["terminal_phi"] = -rho_bar[:, N] * (dot(phi_u - phi_b, kN) - dot(np.einsum("mab,ma->mb", phi_x, kN), dx))
    yb0, yu0 = bb.y[:, 0], ba.y[:, 0]
    terms["initial_gamma"] = (
        p.evaluate("gamma", {"y": yu0}) - p.evaluate("gamma", {"y": yb0}) - dot(yu0 - yb0, p.evaluate("gamma_y", {"y": yb0}))
    )
    terms["rho_Phi"] = (rho_u[:, N] - rho_bar[:, N]) * (Phi_u - Phi_b)

    rhs_paths = sum(terms.values())
    diff = lhs_paths - rhs_paths
    lhs, rhs = float(lhs_paths.mean()), float(rhs_paths.mean())
    se = float(np.std(diff, ddof=1) / np.sqrt(M)) if M > 1 else float("nan")
    gap = lhs - rhs
    if np.isnan(se):
        z = float("nan")
    elif se > 0:
        z = gap / se
    else:
        z = 0.0 if gap == 0 else float(np.copysign(np.inf, gap))
    means = {name: float(v.mean()) for name, v in terms.items()}
    log_stage("cost_difference_identity", {"seed": seed, "paths": M}, {"lhs": lhs, "rhs": rhs, **means})
    return CostDifferenceCheck(lhs, rhs, se, z, means)


# ----------------------------------------------------------------------
# Perturbation orders


@dataclass(frozen=True)
class PerturbationOrders:
    eps: list[float]
    x4: list[float]
    y4: list[float]
    rho2: list[float]
    slope_x: float
    slope_y: float
    slope_rho: float


def _loglog_slope(eps: list[float], values: list[float]) -> float:
    pairs = [(e, v) for e, v in zip(eps, values) if e > 0 and v > 0]
    if len(pairs) < 2:
        return float("nan")
    e, v = np.array(pairs).T
    return float(np.polyfit(np.log(e), np.log(v), 1)[0])


def perturbation_order_check(
    p: ProblemInstance,
    pol_bar: ControlPolicy,
    pol_u: ControlPolicy,
    eps: list[float],
    grid: TimeGrid,
    M: int,
    seed: int,
    basis: RegressionBasis | None = None,
    workers: int | None = None,
) -> PerturbationOrders:
    """
    Moments of the state, backward and density differences under the convex
    perturbation theta_eps = theta_bar + eps (theta_u - theta_bar).

    Reports E[sup|x_eps - xbar|^4], E[sup|y_eps - ybar|^4] and
    E[sup|rho_eps - rhobar|^2] per eps, and their log-log slopes (expected
    near 4, 4 and 2). Zero eps values are reported but left out of the fit.
    """
    if len(eps) < 3:
        raise ValueError("perturbation_order_check needs at least three eps values")
    basis = basis or RegressionBasis()
    noise = sample_noise(grid, M, seed, workers)
    bar = run_pipeline(p, pol_bar, noise, basis, adjoint=False, workers=workers)
    direction = pol_u.theta - pol_bar.theta
    x4, y4, rho2 = [], [], []
    for e in eps:
        pert = run_pipeline(p, pol_bar.with_theta(pol_bar.theta + e * direction), noise, basis, adjoint=False, workers=workers)
        x4.append(float(np.mean(np.max(np.linalg.norm(pert.ens.x - bar.ens.x, axis=-1), axis=1) ** 4)))
        if p.dims.m:
            y4.append(float(np.mean(np.max(np.linalg.norm(pert.back.y - bar.back.y, axis=-1), axis=1) ** 4)))
        else:
            y4.append(0.0)
        rho2.append(float(np.mean(np.max(np.abs(pert.ens.rho - bar.ens.rho), axis=1) ** 2)))
    return PerturbationOrders(
        list(eps), x4, y4, rho2, _loglog_slope(eps, x4), _loglog_slope(eps, y4), _loglog_slope(eps, rho2)
    )


# ----------------------------------------------------------------------
# Sufficient-condition certificates


@dataclass(frozen=True)
class ConvexityReport:
    points: int
    violations_H: int
    violations_Phi: int
    violations_gamma: int
    h_max_variation: float | None = None

    @property
    def violations(self) -> int:
        return self.violations_H + self.violations_Phi + self.violations_gamma

    @property
    def h_hypothesis_ok(self) -> bool | None:
        if self.h_max_variation is None:
            return None
        return self.h_max_variation <= 1e-12


def _random_state(p: ProblemInstance, rng: np.random.Generator, size: int) -> dict:
    d = p.dims
    return {
        "x": rng.standard_normal((size, d.n)),
        "y": rng.standard_normal((size, d.m)),
        "z1": rng.standard_normal((size, d.m)),
        "z2": rng.standard_normal((size, d.m)),
        "u": p.control_set.sample_inner(rng, size),
    }


def _midpoint_violations(mid: np.ndarray, a: np.ndarray, b: np.ndarray) -> int:
    avg = 0.5 * (a + b)
    return int(np.sum(mid - avg > 1e-10 * (1.0 + np.abs(avg))))


def convexity_spotcheck(p: ProblemInstance, points: int, seed: int, sufficient: bool = False) -> ConvexityReport:
    """
    Midpoint-convexity tests of H in (x, y, z1, z2, u) at random adjoint
    values, of Phi in x and of gamma in y. With ``sufficient`` set, also check
    whether h depends on (x, u) at fixed t.
    """
    if points < 1:
        raise ValueError("points must be >= 1")
    d = p.dims
    rng = np.random.default_rng(seed)
    t = float(rng.uniform(0.0, d.T))
    a, b = _random_state(p, rng, points), _random_state(p, rng, points)
    mid = {key: 0.5 * (a[key] + b[key]) for key in a}
    adjoint = {
        "p": rng.standard_normal((points, d.n)),
        "q1": rng.standard_normal((points, d.n)),
        "q2": rng.standard_normal((points, d.n)),
        "k": rng.standard_normal((points, d.m)),
        "R2eff": rng.standard_normal(points),
    }

    def H(state):
        return eval_H(HamiltonianPoint(t=t, **state, **adjoint), p)

    violations_H = _midpoint_violations(H(mid), H(a), H(b))
    violations_Phi = _midpoint_violations(
        p.evaluate("Phi", {"x": mid["x"]}), p.evaluate("Phi", {"x": a["x"]}), p.evaluate("Phi", {"x": b["x"]})
    )
    violations_gamma = 0
    if d.m:
        violations_gamma = _midpoint_violations(
            p.evaluate("gamma", {"y": mid["y"]}), p.evaluate("gamma", {"y": a["y"]}), p.evaluate("gamma", {"y": b["y"]})
        )

    h_variation = None
    if sufficient:
        times = rng.uniform(0.0, d.T, size=min(points, 100))
        h_variation = 0.0
        for s in times:
            h_a = p.evaluate("h", {"t": float(s), "x": a["x"], "u": a["u"]})
            h_b = p.evaluate("h", {"t": float(s), "x": b["x"], "u": b["u"]})
            h_variation = max(h_variation, float(np.max(np.abs(h_a - h_b))))
        if h_variation > 1e-12:
            print(f"⚠️ h varies with (x, u) by up to {h_variation:.3g}; the sufficient-condition hypothesis fails")
    return ConvexityReport(points, violations_H, violations_Phi, violations_gamma, h_variation)


def hamiltonian_fd_check(p: ProblemInstance, points: int = 100, seed: int = 0, step: float = 1e-6) -> float:
    """
    Max relative error of grad_H against central differences of eval_H over
    random points, for every argument group.
    """
    d = p.dims
    rng = np.random.default_rng(seed)
    state = _random_state(p, rng, points)
    pt = HamiltonianPoint(
        t=float(rng.uniform(0.0, d.T)),
        **state,
        p=rng.standard_normal((points, d.n)),
        q1=rng.standard_normal((points, d.n)),
        q2=rng.standard_normal((points, d.n)),
        k=rng.standard_normal((points, d.m)),
        R2eff=rng.standard_normal(points),
    )
    worst = 0.0
    for wrt in WRT:
        if d.arg_dim(wrt) == 0:
            continue
        analytic = grad_H(pt, p, wrt)
        base = getattr(pt, wrt)
        for c in range(base.shape[1]):
            bump = np.zeros_like(base)
            bump[:, c] = step
            up = eval_H(pt.with_values(**{wrt: base + bump}), p)
            down = eval_H(pt.with_values(**{wrt: base - bump}), p)
            fd = (up - down) / (2.0 * step)
            rel = np.abs(analytic[:, c] - fd) / np.maximum(1.0, np.abs(analytic[:, c]))
            worst = max(worst, float(np.max(rel)))
    return worst


# ----------------------------------------------------------------------
# Aggregation


@dataclass(frozen=True)
class VerifyRow:
    check: str
    statistic: float
    tolerance: str
    passed: bool
    seed: int

    def as_row(self) -> list:
        return [self.check, self.statistic, self.tolerance, "pass" if self.passed else "fail", self.seed]


def run_verification(
    p: ProblemInstance,
    pol: ControlPolicy,
    grid: TimeGrid,
    M: int,
    seed: int,
    options: dict,
    basis: RegressionBasis | None = None,
    workers: int | None = None,
) -> list[VerifyRow]:
    """
    Run every check on one problem and collect the report rows in a fixed order.

    Args:
        p: Problem instance
        pol: Reference policy (the perturbation base point)
        grid, M, seed: Monte Carlo budget shared by the stochastic checks
        options: Resolved ``verify`` config section (fd_eps, order_eps,
            convexity_points, gradient_samples, sufficient, perturbation,
            residual_tol)
    """
    basis = basis or RegressionBasis()
    rows: list[VerifyRow] = []

    report = check_gradients(p, samples=options["gradient_samples"], seed=seed)
    worst = max((e.max_rel_error for e in report.entries), default=0.0)
    rows.append(VerifyRow("gradient_check", worst, f"{report.tol:g}", all(e.passed for e in report.entries), seed))
    for bound in report.bounds:
        rows.append(VerifyRow(f"bound_{bound.name}", bound.max_abs, f"{bound.bound:g}", bound.passed, seed))

    ens = simulate_forward(p, pol, sample_noise(grid, M, seed, workers), workers)
    density = density_martingale_check(ens)
    z_max = max((abs(r.z) for r in density if not np.isnan(r.z)), default=0.0)
    rows.append(VerifyRow("density_martingale", z_max, "3", z_max <= 3.0, seed))

    h_err = hamiltonian_fd_check(p, seed=seed)
    rows.append(VerifyRow("hamiltonian_fd", h_err, "1e-06", h_err <= 1e-6, seed))

    perturbation = float(options.get("perturbation", 0.5))
    pol_u = pol.with_theta(pol.theta + ControlPolicy.constant(perturbation, pol.fmap, pol.control_set).theta)

    state = run_pipeline(p, pol, sample_noise(grid, M, seed, workers), basis, workers=workers)
    g = functional_gradient(p, state.ens, state.back, state.adj)
    grad, _ = parameter_gradient(p, pol, state.ens, state.back, state.adj, g)
    norm = np.linalg.norm(grad)
    direction = grad / norm if norm > 0 else pol_u.theta - pol.theta
    fd = fd_directional_derivative(p, pol, direction, options["fd_eps"], grid, M, seed, basis, workers)
    rows.append(VerifyRow("fd_vs_variational", fd.rel_error, "0.05", fd.rel_error <= 0.05, seed))

    identity = cost_difference_check(p, pol_u, pol, grid, M, seed, basis, workers)
    rows.append(VerifyRow("cost_difference_identity", abs(identity.lhs - identity.rhs),
                          f"{identity.tolerance:.6g}", identity.passed, seed))

    orders = perturbation_order_check(p, pol, pol_u, options["order_eps"], grid, M, seed, basis, workers)
    rows.append(VerifyRow("perturbation_order_x", orders.slope_x, "[3.5,4.5]", 3.5 <= orders.slope_x <= 4.5, seed))
    if not np.isnan(orders.slope_rho):
        rows.append(VerifyRow("perturbation_order_rho", orders.slope_rho, "[1.6,2.4]",
                              1.6 <= orders.slope_rho <= 2.4, seed))

    sufficient = bool(options.get("sufficient", False))
    convexity = convexity_spotcheck(p, options["convexity_points"], seed, sufficient)
    rows.append(VerifyRow("convexity", float(convexity.violations), "0", convexity.violations == 0, seed))
    if sufficient:
        rows.append(VerifyRow("h_hypothesis", convexity.h_max_variation, "1e-12", bool(convexity.h_hypothesis_ok), seed))
        # the sufficient condition certifies pol only where the variational inequality holds
        residual, _ = necessary_condition_residual(p, pol, state.ens, state.back, state.adj, g=g)
        residual_tol = float(options.get("residual_tol", 1e-2))
        rows.append(VerifyRow("necessary_residual", residual, f"{residual_tol:g}", residual <= residual_tol, seed))

    for row in rows:
        mark = "✅" if row.passed else "❌"
        print(f"{mark} {row.check:<26} statistic={row.statistic:.6g} tolerance={row.tolerance}")
    log_stage("verify", {"problem": p.label, "seed": seed, "paths": M}, {r.check: r.passed for r in rows})
    return rows
