"""
Registry of named problem instances.

Shipped benchmarks and analytic instances are selectable by name from a run
configuration; user problems are added programmatically with
``register_problem``.
"""
from typing import Callable

from services.benchmark_lqg import LQGSpec, build_lqg_problem
from services.problem import ProblemInstance
from services.toy_problems import (adjoint_square, bsde_linear_driver, lq_fbsde,
                                   martingale_rep, quadratic_toy, zero_problem)
from utils.errors import ConfigError, SolverError

ProblemBuilder = Callable[..., ProblemInstance]

# ==========================================================================
# LQG BENCHMARKS - Carry a Riccati/Kalman oracle
# ==========================================================================

LQG_VARIANTS = {
    "lqg": "state",
    "lqg_time_h": "time",
}

# ==========================================================================
# PROBLEM BUILDERS - Name -> builder(**params)
# ==========================================================================

PROBLEM_BUILDERS: dict[str, ProblemBuilder] = {
    "lqg": lambda **params: build_lqg_problem(LQGSpec(**{**params, "h_kind": "state"}), "lqg"),
    "lqg_time_h": lambda **params: build_lqg_problem(LQGSpec(**{**params, "h_kind": "time"}), "lqg_time_h"),
    "quadratic_toy": quadratic_toy,
    "bsde_linear_driver": bsde_linear_driver,
    "martingale_rep": martingale_rep,
    "adjoint_square": adjoint_square,
    "zero_problem": zero_problem,
    "lq_fbsde": lq_fbsde,
}


def register_problem(name: str, builder: ProblemBuilder) -> None:
    """
    Make a user problem selectable by name.

    Args:
        name: Registry key (must not shadow a shipped problem)
        builder: Callable taking keyword parameters and returning a ProblemInstance
    """
    if name in PROBLEM_BUILDERS:
        raise ValueError(f"problem '{name}' is already registered")
    PROBLEM_BUILDERS[name] = builder


def available_problems() -> list[str]:
    return sorted(PROBLEM_BUILDERS)


def build_named_problem(name: str, params: dict | None = None) -> ProblemInstance:
    """
    Build a registered problem.

    Raises:
        ConfigError: Unknown name, parameters the builder does not accept, or
            parameters that make the built instance fail its evaluator checks
    """
    try:
        builder = PROBLEM_BUILDERS[name]
    except KeyError:
        raise ConfigError(f"unknown problem '{name}'; available: {', '.join(available_problems())}") from None
    try:
        return builder(**(params or {}))
    except ConfigError:
        raise
    except (SolverError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid parameters for problem '{name}': {type(e).__name__}: {e}") from None


def lqg_spec_for(name: str, params: dict | None = None) -> LQGSpec | None:
    """Benchmark spec behind an LQG problem name, or None for other problems."""
    if name not in LQG_VARIANTS:
        return None
    return LQGSpec(**{**(params or {}), "h_kind": LQG_VARIANTS[name]})
