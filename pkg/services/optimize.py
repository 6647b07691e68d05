"""
Gradient-based optimization of observation-adapted policies.

The cost gradient is the rho-weighted time integral of the Hamiltonian's
control partial, chained through the policy Jacobian. Optimization is a
gradient method with Armijo backtracking; every comparison within an
iteration reuses the same noise (common random numbers).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from tqdm import tqdm

from config.settings import SHOW_PROGRESS
from services.bsde import AdjointEnsemble, BackwardEnsemble, RegressionBasis, point_at, solve_adjoint, solve_backward
from services.filtering import ObservationFeatureMap, bayes_cond_expect, eval_cost
from services.hamiltonian import HamiltonianPoint, grad_H, shift_r2
from services.policy import ControlPolicy
from services.problem import ProblemInstance
from services.simulate import NoiseEnsemble, PathEnsemble, TimeGrid, sample_noise, simulate_forward
from utils.logging import log_stage


@dataclass(frozen=True, eq=False)
class PipelineState:
    """Forward, backward and adjoint solutions along one policy and one noise ensemble."""

    ens: PathEnsemble
    back: BackwardEnsemble
    adj: AdjointEnsemble | None
    J: float
    J_se: float


def run_pipeline(
    p: ProblemInstance,
    pol: ControlPolicy,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
    adjoint: bool = True,
    workers: int | None = None,
) -> PipelineState:
    """Simulate, solve the backward component, estimate the cost and optionally solve the adjoint."""
    ens = simulate_forward(p, pol, noise, workers)
    back = solve_backward(p, ens, basis)
    J, J_se = eval_cost(p, ens, back)
    adj = solve_adjoint(p, ens, back, basis) if adjoint else None
    return PipelineState(ens, back, adj, J, J_se)


def functional_gradient(p: ProblemInstance, ens: PathEnsemble, back: BackwardEnsemble, adj: AdjointEnsemble) -> np.ndarray:
    """
    H_u at every (path, step), shape (M, N, k).

    The observation adjoint enters shifted, R2 - <sigma2, p> - <z2, k>.
    Values are raw; the controlled-measure weighting is left to the caller.
    """
    grid = ens.grid
    g = np.empty((ens.paths, grid.N, p.dims.k))
    for j in range(grid.N):
        point = point_at(ens, back, j)
        r2eff = shift_r2(adj.R2[:, j], p.evaluate("sigma2", point), adj.p[:, j], back.z2[:, j], adj.k[:, j])
        pt = HamiltonianPoint(**point, p=adj.p[:, j], q1=adj.q1[:, j], q2=adj.q2[:, j], k=adj.k[:, j], R2eff=r2eff)
        g[:, j] = grad_H(pt, p, "u")
    return g


def parameter_gradient(
    p: ProblemInstance,
    pol: ControlPolicy,
    ens: PathEnsemble,
    back: BackwardEnsemble,
    adj: AdjointEnsemble,
    g: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Estimate the cost gradient in theta with per-coordinate standard errors.

        grad = mean_i sum_j rho_ij (du/dtheta)_ij' g_ij dt

    Returns:
        (gradient, standard errors), each of length k * F; SE is nan for one path
    """
    if g is None:
        g = functional_gradient(p, ens, back, adj)
    grid = ens.grid
    rho = ens.rho
    per_path = np.zeros((ens.paths, pol.theta.size))
    for j in range(grid.N):
        jac = pol.jacobian(j, ens.Y[:, : j + 1], grid)
        per_path += rho[:, j, None] * np.einsum("mac,ma->mc", jac, g[:, j])
    per_path *= grid.dt
    grad = per_path.mean(axis=0)
    if ens.paths < 2:
        return grad, np.full(grad.shape, np.nan)
    return grad, per_path.std(axis=0, ddof=1) / np.sqrt(ens.paths)


def necessary_condition_residual(
    p: ProblemInstance,
    pol: ControlPolicy,
    ens: PathEnsemble,
    back: BackwardEnsemble,
    adj: AdjointEnsemble,
    fmap: ObservationFeatureMap | None = None,
    g: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """
    Projection residual of the pointwise variational inequality.

    With m_j the controlled-measure conditional expectation of H_u given the
    observations up to t_j,

        residual_j = mean_i |u_ij - project_U(u_ij - m_ij)|^2,  total = sum_j residual_j dt

    The total is zero exactly when <m_ij, v - u_ij> >= 0 for all v in U on every path.

    Returns:
        (total, per-step profile of length N)
    """
    fmap = fmap or pol.fmap
    if g is None:
        g = functional_gradient(p, ens, back, adj)
    grid = ens.grid
    profile = np.empty(grid.N)
    for j in range(grid.N):
        m = bayes_cond_expect(g[:, j], ens, j, fmap)
        u = ens.u[:, j]
        gap = u - p.control_set.project(u - m)
        profile[j] = float(np.mean(np.sum(gap**2, axis=-1)))
    return float(np.sum(profile) * grid.dt), profile


@dataclass(frozen=True)
class GradientReport:
    iteration: int
    J: float
    J_se: float
    grad_norm: float
    residual: float
    step: float
    seed: int

    def as_row(self) -> list:
        return [self.iteration, self.J, self.J_se, self.grad_norm, self.residual, self.step, self.seed]


@dataclass(frozen=True)
class StepRule:
    """Backtracking parameters: trial step, shrink factor, halving budget and Armijo constant."""

    initial_step: float = 1.0
    shrink: float = 0.5
    max_halvings: int = 20
    armijo: float = 1e-4


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    policy: ControlPolicy
    reports: list[GradientReport]
    line_search_stall: bool
    initial_residual: float
    final_residual: float


def optimize_policy(
    p: ProblemInstance,
    pol0: ControlPolicy,
    grid: TimeGrid,
    M: int,
    seed: int,
    max_iters: int = 30,
    tol: float = 1e-3,
    step_rule: StepRule | None = None,
    basis: RegressionBasis | None = None,
    workers: int | None = None,
) -> OptimizationResult:
    """
    Gradient descent on theta with backtracking under common random numbers.

    Iteration i draws noise with seed + i, re-solves the forward, backward
    and adjoint systems at the current policy, and backtracks on the cost
    re-estimated on that same noise. Stops when
    ``|grad| <= tol * (1 + |J|)`` or after ``max_iters`` updates.

    Returns:
        OptimizationResult with the final policy, one GradientReport per
        iteration, the line-search stall flag (set when no decrease was found
        after ``max_halvings`` halvings; the best policy so far is returned)
        and the necessary-condition residual at the first and last iterates
    """
    step_rule = step_rule or StepRule()
    basis = basis or RegressionBasis()
    pol = pol0
    reports: list[GradientReport] = []
    stalled = False
    initial_residual = final_residual = float("nan")

    for i in tqdm(range(max_iters + 1), desc="Optimizing policy", disable=not SHOW_PROGRESS):
        noise = sample_noise(grid, M, seed + i, workers)
        state = run_pipeline(p, pol, noise, basis, workers=workers)
        g = functional_gradient(p, state.ens, state.back, state.adj)
        grad, _ = parameter_gradient(p, pol, state.ens, state.back, state.adj, g)
        grad_norm = float(np.linalg.norm(grad))
        residual_now, _ = necessary_condition_residual(p, pol, state.ens, state.back, state.adj, g=g)
        if i == 0:
            initial_residual = residual_now
        final_residual = residual_now

        converged = grad_norm <= tol * (1.0 + abs(state.J))
        step = 0.0
        if not converged and i < max_iters:
            eta = step_rule.initial_step
            accepted = None
            for _ in range(step_rule.max_halvings + 1):
                trial = pol.with_theta(pol.theta - eta * grad)
                J_trial = run_pipeline(p, trial, noise, basis, adjoint=False, workers=workers).J
                if J_trial <= state.J - step_rule.armijo * eta * grad_norm**2:
                    accepted = trial
                    break
                eta *= step_rule.shrink
            if accepted is None:
                stalled = True
                print(f"⚠️ Line search stalled at iteration {i}; keeping the best policy so far")
            else:
                step = eta
                pol = accepted

        report = GradientReport(i, state.J, state.J_se, grad_norm, grad_norm, step, seed + i)
        reports.append(report)
        log_stage("optimize_iteration", {"iteration": i, "seed": seed + i}, asdict(report))
        if converged or stalled:
            break

    print(f"📈 Optimization finished after {len(reports)} iterations (J={reports[-1].J:.6g})")
    return OptimizationResult(pol, reports, stalled, initial_residual, final_residual)
