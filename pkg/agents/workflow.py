"""
Workflow runner for the solver's command-line subcommands.

Each subcommand builds the run context from the resolved configuration,
runs its part of the pipeline and hands the resulting tables and summary
to ``emit_report``. Exit codes: 0 success, 1 failed checks or solver
errors, 2 configuration errors.
"""

import sys

import numpy as np

from services.benchmark_lqg import (OracleFeedback, kalman_bucy_mean, oracle_curves, oracle_policy_fit,
                                    riccati_convergence_study, riccati_oracle)
from services.bsde import adjoint_summary, empty_backward
from services.filtering import bayes_cond_expect, eval_cost
from services.optimize import optimize_policy, run_pipeline
from services.problem import ProblemInstance
from services.simulate import (density_martingale_check, innovation_identity_gap, moment_diagnostics,
                               sample_noise, simulate_forward)
from services.verify import run_verification
from tools.config_loader import load_config
from tools.loader import RunContext, initialize_run
from tools.problem_registry import lqg_spec_for
from utils.errors import ConfigError, SolverError
from utils.logging import log_stage
from utils.reporting import RunArtifacts, emit_report, path_header, path_rows, policy_header

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

# Fine Riccati grid: at least this many steps and ten per simulation step
ORACLE_MIN_STEPS = 10_000


def _moment_rows(moments: dict) -> list[list]:
    return [[name, est, se] for name, (est, se) in moments.items()]


class WorkflowRunner:
    """
    Runs one subcommand against a resolved configuration.

    Attributes:
        config (dict): Fully resolved run configuration
        ctx (RunContext): Problem, grid, policy and solver settings
        handlers (dict): Subcommand name -> handler returning (artifacts, passed)
    """

    def __init__(self, config: dict, workers: int | None = None):
        self.config = config
        self.ctx: RunContext = initialize_run(config, workers)
        self.handlers = {
            "simulate": self.simulate,
            "solve": self.solve,
            "optimize": self.optimize,
            "verify": self.verify,
            "benchmark": self.benchmark,
        }

    @property
    def problem(self) -> ProblemInstance:
        return self.ctx.problem

    def _noise(self, seed: int | None = None):
        ctx = self.ctx
        return sample_noise(ctx.grid, ctx.paths, ctx.seed if seed is None else seed, ctx.workers)

    def execute(self, subcommand: str) -> tuple[RunArtifacts, bool]:
        """
        Run a subcommand.

        Args:
            subcommand: One of the handler names

        Returns:
            Tuple of (artifacts to write, whether every check passed)

        Raises:
            ConfigError: Unknown subcommand
        """
        handler = self.handlers.get(subcommand)
        if handler is None:
            raise ConfigError(f"unknown subcommand '{subcommand}'; available: {', '.join(self.handlers)}")
        artifacts, passed = handler()
        log_stage(subcommand, {"problem": self.problem.label, "seed": self.ctx.seed, "paths": self.ctx.paths},
                  dict(artifacts.summary))
        return artifacts, passed

    # ------------------------------------------------------------------
    # Subcommands

    def simulate(self) -> tuple[RunArtifacts, bool]:
        """Forward simulation with density and moment diagnostics."""
        ctx = self.ctx
        ens = simulate_forward(self.problem, ctx.policy, self._noise(), ctx.workers)
        artifacts = RunArtifacts(self.config)

        density = density_martingale_check(ens)
        artifacts.add_table("density_check.csv", [[r.step, r.t, r.mean, r.se, r.z] for r in density])
        moments = moment_diagnostics(ens)
        artifacts.add_table("moments.csv", _moment_rows(moments))
        if self.config["output"].get("dump_paths"):
            artifacts.add_table("paths.csv", path_rows(ens), path_header(self.problem.dims.n, self.problem.dims.k))

        artifacts.summary.update(
            {
                "problem": self.problem.label,
                "paths": ens.paths,
                "steps": ctx.grid.N,
                "seed": ctx.seed,
                "rho_T_mean": density[-1].mean,
                "rho_T_se": density[-1].se,
                "rho_T_z": density[-1].z,
                "innovation_gap_max": float(np.max(np.abs(innovation_identity_gap(ens)))),
                "admissibility_l4": moments["admissibility_l4"][0],
                "admissibility_l4_se": moments["admissibility_l4"][1],
            }
        )
        print(f"🎲 Simulated {ens.paths} paths; E[rho(T)]={density[-1].mean:.6g} (z={density[-1].z:.3g})")
        return artifacts, True

    def solve(self) -> tuple[RunArtifacts, bool]:
        """Forward, backward and adjoint solves at the configured policy."""
        ctx = self.ctx
        state = run_pipeline(self.problem, ctx.policy, self._noise(), ctx.basis, workers=ctx.workers)
        artifacts = RunArtifacts(self.config)
        artifacts.add_table("adjoint_summary.csv", [list(row) for row in adjoint_summary(state.back, state.adj)])
        moments = moment_diagnostics(state.ens, state.back)
        artifacts.add_table("moments.csv", _moment_rows(moments))

        artifacts.summary.update(
            {
                "problem": self.problem.label,
                "paths": ctx.paths,
                "steps": ctx.grid.N,
                "seed": ctx.seed,
                "J": state.J,
                "J_se": state.J_se,
                "admissibility_l4": moments["admissibility_l4"][0],
                "admissibility_l4_se": moments["admissibility_l4"][1],
            }
        )
        if self.problem.dims.m:
            artifacts.summary["y0_mean"] = float(np.mean(state.back.y[:, 0, 0]))
        print(f"🧮 J={state.J:.6g} ± {state.J_se:.3g}")
        return artifacts, True

    def _run_optimizer(self):
        ctx = self.ctx
        opt = self.config["optimizer"]
        return optimize_policy(
            self.problem,
            ctx.policy,
            ctx.grid,
            ctx.paths,
            ctx.seed,
            max_iters=int(opt["max_iters"]),
            tol=float(opt["tol"]),
            step_rule=ctx.step_rule,
            basis=ctx.basis,
            workers=ctx.workers,
        )

    def _optimization_tables(self, artifacts: RunArtifacts, result) -> None:
        artifacts.add_table("gradient_report.csv", [r.as_row() for r in result.reports])
        initial = self.ctx.policy
        artifacts.add_table(
            "policy.csv",
            [[initial.label, *initial.theta], ["optimized", *result.policy.theta]],
            policy_header(result.policy.theta.size),
        )
        last = result.reports[-1]
        artifacts.summary.update(
            {
                "problem": self.problem.label,
                "paths": self.ctx.paths,
                "steps": self.ctx.grid.N,
                "seed": self.ctx.seed,
                "iterations": len(result.reports),
                "J": last.J,
                "J_se": last.J_se,
                "grad_norm": last.grad_norm,
                "initial_residual": result.initial_residual,
                "final_residual": result.final_residual,
                "line_search_stall": result.line_search_stall,
            }
        )

    def optimize(self) -> tuple[RunArtifacts, bool]:
        """Gradient descent on the policy parameters."""
        result = self._run_optimizer()
        artifacts = RunArtifacts(self.config)
        self._optimization_tables(artifacts, result)
        ens = simulate_forward(self.problem, result.policy, self._noise(), self.ctx.workers)
        moments = moment_diagnostics(ens)
        artifacts.summary["admissibility_l4"] = moments["admissibility_l4"][0]
        artifacts.summary["admissibility_l4_se"] = moments["admissibility_l4"][1]
        if result.line_search_stall:
            print("[optimize-error] line search stalled before the gradient tolerance was met")
        return artifacts, not result.line_search_stall

    def verify(self) -> tuple[RunArtifacts, bool]:
        """Every verification check; fails when any row fails."""
        ctx = self.ctx
        rows = run_verification(self.problem, ctx.policy, ctx.grid, ctx.paths, ctx.seed,
                                self.config["verify"], ctx.basis, ctx.workers)
        artifacts = RunArtifacts(self.config)
        artifacts.add_table("verify_report.csv", [r.as_row() for r in rows])
        failed = [r.check for r in rows if not r.passed]
        ens = simulate_forward(self.problem, ctx.policy, self._noise(), ctx.workers)
        moments = moment_diagnostics(ens)
        artifacts.summary.update(
            {
                "problem": self.problem.label,
                "seed": ctx.seed,
                "checks": len(rows),
                "failed": len(failed),
                "failed_checks": ",".join(failed) if failed else "none",
                "admissibility_l4": moments["admissibility_l4"][0],
                "admissibility_l4_se": moments["admissibility_l4"][1],
            }
        )
        if failed:
            print(f"[verify-error] {len(failed)} check(s) failed: {', '.join(failed)}")
        return artifacts, not failed

    def benchmark(self) -> tuple[RunArtifacts, bool]:
        """LQG end to end: Riccati oracle, optimized policy and their cost gap."""
        ctx = self.ctx
        problem_cfg = self.config["problem"]
        spec = lqg_spec_for(problem_cfg["name"], problem_cfg.get("params") or {})
        if spec is None:
            raise ConfigError(f"benchmark needs an LQG problem, got '{problem_cfg['name']}'")

        fine_steps = max(ORACLE_MIN_STEPS, 10 * ctx.grid.N)
        oracle = riccati_oracle(spec, fine_steps)
        study = riccati_convergence_study(spec, fine_steps)
        print(f"🎯 Oracle J*={oracle.J_star:.8g} (half-grid delta {study['delta']:.2e})")

        result = self._run_optimizer()
        artifacts = RunArtifacts(self.config)
        self._optimization_tables(artifacts, result)
        artifacts.add_table("oracle_curves.csv", [list(row) for row in oracle_curves(oracle, ctx.grid)])

        # Every policy is priced on the same fresh noise
        noise = self._noise(ctx.seed + len(result.reports))
        optimized = run_pipeline(self.problem, result.policy, noise, ctx.basis, adjoint=False, workers=ctx.workers)
        feedback_ens = simulate_forward(self.problem, OracleFeedback(spec, oracle), noise, ctx.workers)
        J_feedback, J_feedback_se = eval_cost(self.problem, feedback_ens, empty_backward(feedback_ens))
        fit = oracle_policy_fit(spec, oracle, ctx.fmap, ctx.grid, min(ctx.paths, 4000), ctx.seed, ctx.workers)

        xhat = kalman_bucy_mean(spec, oracle, optimized.ens)
        estimate = np.stack(
            [bayes_cond_expect(optimized.ens.x[:, j, 0], optimized.ens, j, ctx.fmap, ctx.basis.ridge)
             for j in range(ctx.grid.N + 1)],
            axis=1,
        )
        rho = optimized.ens.rho
        tracking = float(np.sqrt(np.max(np.sum(rho * (estimate - xhat) ** 2, axis=0) / np.sum(rho, axis=0))))

        gap_pct = 100.0 * (optimized.J - oracle.J_star) / oracle.J_star
        moments = moment_diagnostics(optimized.ens)
        artifacts.summary.update(
            {
                "J_star": oracle.J_star,
                "J_star_half_grid": study["J_half"],
                "riccati_delta": study["delta"],
                "J_optimized": optimized.J,
                "J_optimized_se": optimized.J_se,
                "J_oracle_feedback": J_feedback,
                "J_oracle_feedback_se": J_feedback_se,
                "cost_gap_pct": gap_pct,
                "oracle_fit_rms": fit.rms,
                "oracle_max_action": fit.max_action,
                "filter_tracking_rms": tracking,
                "admissibility_l4": moments["admissibility_l4"][0],
                "admissibility_l4_se": moments["admissibility_l4"][1],
            }
        )
        print(f"🏁 Optimized J={optimized.J:.6g} vs J*={oracle.J_star:.6g} (gap {gap_pct:+.2f}%)")
        tolerance = float(self.config["benchmark"]["gap_tolerance_pct"])
        artifacts.summary["gap_tolerance_pct"] = tolerance
        passed = abs(gap_pct) <= tolerance
        if not passed:
            print(f"[benchmark-error] cost gap {gap_pct:+.2f}% is outside ±{tolerance:g}%")
        return artifacts, passed


def _error_line(error: Exception) -> str:
    message = str(error).replace('"', "'").replace("\n", " ")
    return f'error={type(error).__name__} message="{message}"'


def run(
    subcommand: str,
    config_path: str | None = None,
    overrides: list[str] | None = None,
    workers: int | None = None,
    out_dir: str | None = None,
) -> int:
    """
    Load the configuration, run one subcommand and write its artifacts.

    Args:
        subcommand: simulate, solve, optimize, verify or benchmark
        config_path: YAML run configuration (defaults to the shipped LQG config)
        overrides: ``section.key=value`` strings
        workers: Thread count (results do not depend on it)
        out_dir: Output directory; defaults to ``output.dir``

    Returns:
        Process exit code
    """
    try:
        config = load_config(config_path, overrides)
        runner = WorkflowRunner(config, workers)
        artifacts, passed = runner.execute(subcommand)
        emit_report(out_dir or config["output"]["dir"], artifacts)
    except ConfigError as e:
        print(_error_line(e), file=sys.stderr)
        return EXIT_USAGE
    except SolverError as e:
        print(_error_line(e), file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK if passed else EXIT_FAILED
