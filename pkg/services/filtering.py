"""
Conditioning on the observation filtration and controlled-measure expectations.

Conditional expectations given the observations up to t_j are realized by
in-sample regression on polynomials of lagged observation values. Expectations
under the controlled measure use rho-weighted regression on the same design.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, comb

import numpy as np
from sklearn.preprocessing import PolynomialFeatures

from config.settings import DENSITY_FLOOR, MIN_EFFECTIVE_FRACTION
from services.bsde import BackwardEnsemble, LeastSquaresProjector, point_at, polynomial_design
from services.problem import ProblemInstance
from services.simulate import PathEnsemble, TimeGrid
from utils.errors import DegenerateDensity


@dataclass(frozen=True)
class ObservationFeatureMap:
    """
    Lagged-observation features at step j:

        (t_j, Y_j, Y_{max(0, j - s_1)}, ..., Y_{max(0, j - s_L)})

    lifted to all monomials up to ``degree`` (bias included). Only
    Y_0..Y_j are read, so the features are adapted.
    """

    lags: tuple[int, ...]
    degree: int = 2

    def __post_init__(self):
        if any(s < 1 for s in self.lags) or list(self.lags) != sorted(set(self.lags)):
            raise ValueError(f"lags must be distinct, increasing and >= 1, got {self.lags}")
        if self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree}")

    @classmethod
    def default(cls, N: int, degree: int = 2) -> "ObservationFeatureMap":
        """Lags {1, ceil(N/8)}."""
        return cls(tuple(sorted({1, ceil(N / 8)})), degree)

    @property
    def raw_dim(self) -> int:
        return 2 + len(self.lags)

    @property
    def feature_count(self) -> int:
        return comb(self.raw_dim + self.degree, self.degree)

    def raw(self, j: int, Y: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """Unlifted features from the observation prefix Y[:, :j+1], shape (M, raw_dim)."""
        cols = [np.full(Y.shape[0], grid.nodes[j]), Y[:, j]]
        cols += [Y[:, max(0, j - s)] for s in self.lags]
        return np.column_stack(cols)

    def features(self, j: int, Y: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """Polynomial lift used by policies, shape (M, feature_count)."""
        return PolynomialFeatures(degree=self.degree, include_bias=True).fit_transform(self.raw(j, Y, grid))

    def design(self, j: int, Y: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """Regression design on standardized features with redundant columns removed."""
        return polynomial_design(self.raw(j, Y, grid)[:, 1:], self.degree)


def cond_expect_Y(
    values: np.ndarray,
    ens: PathEnsemble,
    j: int,
    fmap: ObservationFeatureMap,
    ridge: float | None = None,
) -> np.ndarray:
    """
    Estimate E[values | observations up to t_j] under P.

    Args:
        values: Per-path values at step j, shape (M,) or (M, c)
        ens: Ensemble providing the observation paths
        j: Grid index
        fmap: Observation feature map
        ridge: Penalty lambda (None selects the default scale)

    Returns:
        In-sample fitted values, same shape as values
    """
    design = fmap.design(j, ens.Y[:, : j + 1], ens.grid)
    return LeastSquaresProjector(design, ridge).fit(np.asarray(values, dtype=float))


def bayes_cond_expect(
    values: np.ndarray,
    ens: PathEnsemble,
    j: int,
    fmap: ObservationFeatureMap,
    ridge: float | None = None,
) -> np.ndarray:
    """
    Estimate the controlled-measure conditional expectation of values given
    the observations up to t_j.

    This is the rho_j-weighted least-squares projection of values on the
    observation design, i.e. the minimizer of E[rho_j (v - g(Y))^2] over the
    span. It targets the same quantity as E[rho_j v | Y] / E[rho_j | Y] but
    never divides by a fitted denominator. With the bias unpenalised,
    sum(rho_j * estimate) == sum(rho_j * values).

    Raises:
        DegenerateDensity: mean(rho_j) is not finite or below DENSITY_FLOOR,
            or the effective sample fraction of the normalized weights is
            below MIN_EFFECTIVE_FRACTION
    """
    values = np.asarray(values, dtype=float)
    rho = ens.rho[:, j]
    scale = float(np.mean(rho))
    if not np.isfinite(scale) or scale < DENSITY_FLOOR:
        raise DegenerateDensity(f"mean density {scale:.3e} at step {j} is not a usable weight scale", 0.0)
    w = rho / scale
    effective = 1.0 / float(np.mean(w**2))
    if effective < MIN_EFFECTIVE_FRACTION:
        raise DegenerateDensity(
            f"density weights keep only {effective:.2%} effective paths at step {j}", effective
        )
    design = fmap.design(j, ens.Y[:, : j + 1], ens.grid)
    fitted = LeastSquaresProjector(design, ridge, weights=w).fit(values.reshape(values.shape[0], -1))
    return fitted.reshape(values.shape)


def path_costs(p: ProblemInstance, ens: PathEnsemble, back: BackwardEnsemble) -> np.ndarray:
    """Per-path totals sum_j rho_j l_j dt + rho_N Phi(x_N) + gamma(y_0)."""
    grid = ens.grid
    rho = ens.rho
    running = np.zeros(ens.paths)
    for j in range(grid.N):
        running += rho[:, j] * p.evaluate("l", point_at(ens, back, j))
    total = running * grid.dt + rho[:, -1] * p.evaluate("Phi", {"x": ens.x[:, -1]})
    return total + p.evaluate("gamma", {"y": back.y[:, 0]})


def eval_cost(p: ProblemInstance, ens: PathEnsemble, back: BackwardEnsemble) -> tuple[float, float]:
    """
    Monte Carlo estimate of the cost with its standard error.

    Returns:
        (J, SE); SE is nan for a single path
    """
    totals = path_costs(p, ens, back)
    J = float(np.mean(totals))
    if totals.size < 2:
        return J, float("nan")
    return J, float(np.std(totals, ddof=1) / np.sqrt(totals.size))
