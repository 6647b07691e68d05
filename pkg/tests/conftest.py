"""Shared fixtures: repository root on sys.path, a scratch run log and small problem builders."""

import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from services.benchmark_lqg import LQGSpec, build_lqg_problem  # noqa: E402
from services.problem import CoefficientSet, ControlSet, Dimensions, build_problem  # noqa: E402
from services.simulate import TimeGrid  # noqa: E402


@pytest.fixture(autouse=True)
def scratch_run_log(tmp_path, monkeypatch):
    """Keep stage logs out of the working tree."""
    monkeypatch.setattr("utils.logging.RUN_LOG_PATH", tmp_path / "run-log.md")


def _zero_vector(t, x, u):
    return np.zeros((x.shape[0], 1))


def _zero_jac(t, x, u):
    return np.zeros((x.shape[0], 1, 1))


def _scalar_problem(
    *,
    x0: float = 0.0,
    b=None,
    sigma1: float = 0.0,
    sigma2: float = 0.0,
    h=None,
    l=None,
    Phi=None,
    partials: dict | None = None,
    full_partials: bool = True,
    bound: float = 1.0,
    bound_C: float = np.inf,
    T: float = 1.0,
    label: str = "scalar",
):
    """Scalar instance with m = 0; unspecified coefficients are zero."""
    table = {}
    if full_partials:
        table = {name: _zero_jac for name in ("b_x", "b_u", "sigma1_x", "sigma1_u", "sigma2_x", "sigma2_u")}
        table.update(
            {
                "h_x": _zero_vector,
                "h_u": _zero_vector,
                "l_x": lambda t, x, y, z1, z2, u: np.zeros((x.shape[0], 1)),
                "l_u": lambda t, x, y, z1, z2, u: np.zeros((x.shape[0], 1)),
                "Phi_x": lambda x: np.zeros((x.shape[0], 1)),
            }
        )
    table.update(partials or {})
    coeffs = CoefficientSet(
        x0=np.array([x0]),
        b=b or _zero_vector,
        sigma1=lambda t, x, u: np.full((x.shape[0], 1), sigma1),
        sigma2=lambda t, x, u: np.full((x.shape[0], 1), sigma2),
        h=h or (lambda t, x, u: np.zeros(x.shape[0])),
        l=l or (lambda t, x, y, z1, z2, u: np.zeros(x.shape[0])),
        Phi=Phi or (lambda x: np.zeros(x.shape[0])),
        partials=table,
        bound_C=bound_C,
    )
    return build_problem(Dimensions(1, 0, 1, T), coeffs, ControlSet.box([-bound], [bound]), label)


@pytest.fixture
def make_scalar():
    return _scalar_problem


@pytest.fixture
def lqg_problem():
    return build_lqg_problem(LQGSpec())


@pytest.fixture
def small_grid():
    return TimeGrid(1.0, 16)


@pytest.fixture
def write_config(tmp_path):
    """Write a run configuration built from the small LQG defaults plus per-section updates."""

    def _write(name: str = "run.yaml", drop: tuple[str, ...] = (), **sections) -> Path:
        config = {
            "problem": {"name": "lqg"},
            "grid": {"steps": 8},
            "monte_carlo": {"paths": 300, "seed": 11},
            "policy": {"degree": 2, "lags": "auto"},
            "optimizer": {"max_iters": 2},
            "verify": {"convexity_points": 200, "gradient_samples": 5},
            "output": {"dir": str(tmp_path / "out")},
        }
        for section, values in sections.items():
            config.setdefault(section, {}).update(values)
        for dotted in drop:
            section, key = dotted.split(".")
            config[section].pop(key)
        path = tmp_path / name
        path.write_text(yaml.safe_dump(config), encoding="utf-8")
        return path

    return _write
