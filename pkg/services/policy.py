"""
Observation-adapted control policies.

A policy is a projected linear map of lagged-observation features,
u_j = project_U(Theta phi_j), with Theta the k x F row-major reshape of the
parameter vector theta.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from services.filtering import ObservationFeatureMap
from services.problem import ControlSet
from services.simulate import TimeGrid
from utils.errors import DimensionMismatch


@dataclass(frozen=True, eq=False)
class ControlPolicy:
    """
    Attributes:
        theta: Parameter vector of length k * F
        fmap: Feature map producing the F features
        control_set: Set the raw control is projected onto
        label: Text identifier used in reports
    """

    theta: np.ndarray
    fmap: ObservationFeatureMap
    control_set: ControlSet
    label: str = "policy"

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        expected = self.control_set.dim * self.fmap.feature_count
        if theta.size != expected:
            raise DimensionMismatch(f"theta has {theta.size} entries, expected k*F = {expected}")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, fmap: ObservationFeatureMap, control_set: ControlSet, label: str = "zero") -> "ControlPolicy":
        return cls(np.zeros(control_set.dim * fmap.feature_count), fmap, control_set, label)

    @classmethod
    def constant(cls, value, fmap: ObservationFeatureMap, control_set: ControlSet, label: str = "constant") -> "ControlPolicy":
        """Policy whose raw control is ``value`` at every step (bias coefficients only)."""
        Theta = np.zeros((control_set.dim, fmap.feature_count))
        Theta[:, 0] = value
        return cls(Theta.ravel(), fmap, control_set, label)

    @property
    def k(self) -> int:
        return self.control_set.dim

    @property
    def Theta(self) -> np.ndarray:
        return self.theta.reshape(self.k, self.fmap.feature_count)

    def with_theta(self, theta, label: str | None = None) -> "ControlPolicy":
        return replace(self, theta=np.asarray(theta, dtype=float), label=label or self.label)

    def raw_control(self, j: int, Y: np.ndarray, grid: TimeGrid) -> np.ndarray:
        return self.fmap.features(j, Y, grid) @ self.Theta.T

    def evaluate(self, j: int, Y: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """Projected control at step j for every path, shape (M, k)."""
        return self.control_set.project(self.raw_control(j, Y, grid))

    def jacobian(self, j: int, Y: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """
        du_j / dtheta for every path, shape (M, k, k * F).

        Entry [a, b * F + f] is D[a, b] * phi_f with D the projection
        Jacobian at the raw control (zero rows for clamped box coordinates).
        """
        phi = self.fmap.features(j, Y, grid)
        D = self.control_set.jacobian(phi @ self.Theta.T)
        M = phi.shape[0]
        return np.einsum("mab,mf->mabf", D, phi).reshape(M, self.k, self.theta.size)


def evaluate_policy(pol: ControlPolicy, j: int, Y: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Control at step j from the observation prefix Y[:, :j+1]."""
    if Y.shape[1] < j + 1:
        raise ValueError(f"observation prefix has {Y.shape[1]} nodes, step {j} needs {j + 1}")
    return pol.evaluate(j, Y, grid)


def policy_jacobian(pol: ControlPolicy, j: int, Y: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Jacobian of ``evaluate_policy`` with respect to theta."""
    if Y.shape[1] < j + 1:
        raise ValueError(f"observation prefix has {Y.shape[1]} nodes, step {j} needs {j + 1}")
    return pol.jacobian(j, Y, grid)
