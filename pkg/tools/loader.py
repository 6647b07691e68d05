"""
Run-context loader.

Turns a resolved run configuration into the objects every workflow needs:
the problem, time grid, feature map, starting policy and regression basis.
"""
from dataclasses import dataclass

from services.bsde import RegressionBasis
from services.filtering import ObservationFeatureMap
from services.optimize import StepRule
from services.policy import ControlPolicy
from services.problem import ProblemInstance
from services.simulate import TimeGrid
from utils.errors import ConfigError

from .problem_registry import build_named_problem


@dataclass(frozen=True, eq=False)
class RunContext:
    config: dict
    problem: ProblemInstance
    grid: TimeGrid
    fmap: ObservationFeatureMap
    policy: ControlPolicy
    basis: RegressionBasis
    step_rule: StepRule
    paths: int
    seed: int
    workers: int | None


def build_feature_map(policy_cfg: dict, steps: int) -> ObservationFeatureMap:
    degree = int(policy_cfg.get("degree", 2))
    lags = policy_cfg.get("lags", "auto")
    if lags == "auto":
        return ObservationFeatureMap.default(steps, degree)
    try:
        return ObservationFeatureMap(tuple(sorted(set(int(s) for s in lags))), degree)
    except ValueError as e:
        raise ConfigError(f"invalid 'policy' section: {e}") from None


def initialize_run(config: dict, workers: int | None = None) -> RunContext:
    """
    Build the run context from a resolved configuration.

    Args:
        config: Output of ``load_config``
        workers: Thread count override (results do not depend on it)

    Returns:
        RunContext
    """
    problem_cfg = config["problem"]
    problem = build_named_problem(problem_cfg["name"], problem_cfg.get("params") or {})
    print(f"\n--- 🧮 Problem '{problem.label}' (n={problem.dims.n}, m={problem.dims.m}, k={problem.dims.k}) ---")

    try:
        grid = TimeGrid(problem.dims.T, int(config["grid"]["steps"]))
    except ValueError as e:
        raise ConfigError(f"invalid 'grid' section: {e}") from None
    fmap = build_feature_map(config["policy"], grid.N)

    initial = config["policy"].get("initial", 0.0)
    policy = ControlPolicy.constant(initial, fmap, problem.control_set, "initial")

    reg = config["regression"]
    try:
        basis = RegressionBasis(int(reg.get("degree", 2)), reg.get("ridge"))
        opt = config["optimizer"]
        step_rule = StepRule(
            float(opt["initial_step"]), float(opt["shrink"]), int(opt["max_halvings"]), float(opt["armijo"])
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid regression/optimizer settings: {e}") from None

    mc = config["monte_carlo"]
    print(f"🎲 Paths={mc['paths']} steps={grid.N} seed={mc['seed']} features={fmap.feature_count}")
    return RunContext(config, problem, grid, fmap, policy, basis, step_rule, int(mc["paths"]), int(mc["seed"]), workers)
