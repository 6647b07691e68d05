"""
Seeded noise ensembles and forward simulation under the reference measure.

Under the reference measure P the observation Y and the state noise W are
independent Brownian motions. The state is stepped with Euler-Maruyama and
the Girsanov density is carried in log space, so the controlled-measure
expectations downstream are plain rho-weighted averages.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from services.problem import ProblemInstance
from utils.errors import DimensionMismatch, NonFinite
from utils.parallel import map_chunks

if TYPE_CHECKING:
    from services.policy import ControlPolicy

_SEED_MASK = (1 << 64) - 1
# exp() overflows float64 above this
_LOG_MAX = 709.0


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with N steps."""

    T: float
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"grid needs at least one step, got N={self.N}")
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got T={self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.dt
        t[-1] = self.T
        return t

    def index_of(self, fraction: float) -> int:
        """Grid index nearest to ``fraction * T``."""
        return int(round(fraction * self.N))


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    """
    Brownian increments under P.

    Attributes:
        grid: Time grid
        seed: Ensemble seed
        dW: State-noise increments, shape (M, N)
        dY: Observation increments, shape (M, N)
    """

    grid: TimeGrid
    seed: int
    dW: np.ndarray
    dY: np.ndarray

    @property
    def paths(self) -> int:
        return self.dW.shape[0]


def _path_generator(seed: int, path: int) -> np.random.Generator:
    # Counter-based stream keyed by (path, seed); the counter walks (step, channel)
    return np.random.Generator(np.random.Philox(key=(path << 64) | (seed & _SEED_MASK)))


def sample_noise(grid: TimeGrid, M: int, seed: int, workers: int | None = None) -> NoiseEnsemble:
    """
    Draw M independent paths of (dW, dY), each increment Normal(0, dt).

    Path i always reads the same stream for a given seed, so the ensemble is
    bit-identical for any worker count and any M' >= i+1.

    Args:
        grid: Time grid
        M: Number of paths (>= 1)
        seed: 64-bit seed
        workers: Thread count (results do not depend on it)

    Returns:
        NoiseEnsemble
    """
    if M < 1:
        raise ValueError(f"need at least one path, got M={M}")
    scale = np.sqrt(grid.dt)

    def draw(start: int, stop: int) -> np.ndarray:
        block = np.empty((stop - start, grid.N, 2))
        for i in range(start, stop):
            block[i - start] = _path_generator(seed, i).standard_normal((grid.N, 2))
        return block * scale

    noise = np.concatenate(map_chunks(draw, M, workers))
    return NoiseEnsemble(grid, seed, np.ascontiguousarray(noise[..., 0]), np.ascontiguousarray(noise[..., 1]))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """
    Forward paths simulated under P.

    Attributes:
        noise: The driving increments
        x: State, shape (M, N+1, n)
        Y: Cumulative observation, shape (M, N+1)
        log_rho: Log Girsanov density, shape (M, N+1)
        u: Applied control on each interval, shape (M, N, k)
        h_val: Observation drift on each interval, shape (M, N)
    """

    noise: NoiseEnsemble
    x: np.ndarray
    Y: np.ndarray
    log_rho: np.ndarray
    u: np.ndarray
    h_val: np.ndarray

    @property
    def grid(self) -> TimeGrid:
        return self.noise.grid

    @property
    def seed(self) -> int:
        return self.noise.seed

    @property
    def paths(self) -> int:
        return self.x.shape[0]

    @property
    def rho(self) -> np.ndarray:
        return np.exp(self.log_rho)

    @property
    def dW(self) -> np.ndarray:
        return self.noise.dW

    @property
    def dY(self) -> np.ndarray:
        return self.noise.dY

    def innovation(self) -> np.ndarray:
        """Innovation increments dY - h dt, shape (M, N)."""
        return self.dY - self.h_val * self.grid.dt


def _check_finite(name: str, values: np.ndarray, offset: int, step: int) -> None:
    bad = ~np.isfinite(values)
    if bad.ndim > 1:
        bad = bad.reshape(bad.shape[0], -1).any(axis=1)
    if bad.any():
        raise NonFinite(name, offset + int(np.argmax(bad)), step)


def simulate_forward(
    p: ProblemInstance,
    policy: ControlPolicy,
    noise: NoiseEnsemble,
    workers: int | None = None,
) -> PathEnsemble:
    """
    Euler-Maruyama for the state and log-space update of the density under P.

    With u_j = policy(t_j, Y_0..Y_j) (left endpoint, projected onto U):

        x_{j+1}      = x_j + (b - sigma2 h) dt + sigma1 dW_j + sigma2 dY_j
        Y_{j+1}      = Y_j + dY_j
        logrho_{j+1} = logrho_j + h dY_j - h^2 dt / 2

    Args:
        p: Problem instance
        policy: Observation-adapted control policy with k outputs
        noise: Driving increments
        workers: Thread count (results do not depend on it)

    Returns:
        PathEnsemble

    Raises:
        DimensionMismatch: Policy output dimension differs from k
        NonFinite: State or density overflow; reports the first offending path and step
    """
    if policy.k != p.dims.k:
        raise DimensionMismatch(f"policy produces {policy.k} controls, problem expects {p.dims.k}")
    grid = noise.grid
    dt, t = grid.dt, grid.nodes
    x0 = np.asarray(p.coeffs.x0, dtype=float)

    def run(start: int, stop: int):
        dW, dY = noise.dW[start:stop], noise.dY[start:stop]
        B = stop - start
        x = np.empty((B, grid.N + 1, p.dims.n))
        x[:, 0] = x0
        Y = np.zeros((B, grid.N + 1))
        Y[:, 1:] = np.cumsum(dY, axis=1)
        log_rho = np.zeros((B, grid.N + 1))
        u = np.empty((B, grid.N, p.dims.k))
        h_val = np.empty((B, grid.N))
        for j in range(grid.N):
            u[:, j] = policy.evaluate(j, Y[:, : j + 1], grid)
            point = {"t": t[j], "x": x[:, j], "u": u[:, j]}
            b = p.evaluate("b", point)
            s1 = p.evaluate("sigma1", point)
            s2 = p.evaluate("sigma2", point)
            h = p.evaluate("h", point)
            h_val[:, j] = h
            x[:, j + 1] = x[:, j] + (b - s2 * h[:, None]) * dt + s1 * dW[:, j, None] + s2 * dY[:, j, None]
            log_rho[:, j + 1] = log_rho[:, j] + h * dY[:, j] - 0.5 * h**2 * dt
            _check_finite("x", x[:, j + 1], start, j + 1)
            _check_finite("log_rho", np.where(log_rho[:, j + 1] > _LOG_MAX, np.inf, log_rho[:, j + 1]), start, j + 1)
        return x, Y, log_rho, u, h_val

    parts = map_chunks(run, noise.paths, workers)
    x, Y, log_rho, u, h_val = (np.concatenate(arrs) for arrs in zip(*parts))
    return PathEnsemble(noise, x, Y, log_rho, u, h_val)


def innovation_identity_gap(ens: PathEnsemble) -> np.ndarray:
    """Per-path |sum(dY - h dt) - (Y_T - sum(h dt))|; zero up to rounding."""
    dt = ens.grid.dt
    lhs = ens.innovation().sum(axis=1)
    rhs = ens.Y[:, -1] - (ens.h_val * dt).sum(axis=1)
    return np.abs(lhs - rhs)


# ----------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class DensityCheckRow:
    step: int
    t: float
    mean: float
    se: float
    z: float


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    """Sample mean and its standard error; SE is nan for a single sample."""
    mean = float(np.mean(values))
    if values.size < 2:
        return mean, float("nan")
    return mean, float(np.std(values, ddof=1) / np.sqrt(values.size))


def density_martingale_check(ens: PathEnsemble, times: list[int] | None = None) -> list[DensityCheckRow]:
    """
    Compare the sample mean of rho at selected grid indices with 1.

    Args:
        ens: Simulated ensemble
        times: Grid indices; defaults to the nodes nearest T/4, T/2 and T

    Returns:
        One row per index with mean, standard error and z-score of mean - 1
        (nan when the standard error is not available)
    """
    grid = ens.grid
    if times is None:
        times = sorted({grid.index_of(0.25), grid.index_of(0.5), grid.N})
    t = grid.nodes
    rows = []
    rho = ens.rho
    for j in times:
        mean, se = _mean_se(rho[:, j])
        if np.isnan(se):
            z = float("nan")
        elif se == 0:
            z = 0.0 if mean == 1.0 else float(np.copysign(np.inf, mean - 1.0))
        else:
            z = (mean - 1.0) / se
        rows.append(DensityCheckRow(int(j), float(t[j]), mean, se, z))
    return rows


def moment_diagnostics(ens: PathEnsemble, back=None) -> dict[str, tuple[float, float]]:
    """
    Monte Carlo estimates of the moment quantities bounded in the theory.

    Reported as (estimate, standard error):

        sup_x4            E[sup_t |x|^4]
        sup_rho2          E[sup_t rho^2]
        sup_rho4          E[sup_t rho^4]
        admissibility_l4  E[(int |u|^2 dt)^2]

    and, when a backward ensemble is given, sup_y4, z1_l4 and z2_l4.
    These are sanity diagnostics, not bound verifications.
    """
    dt = ens.grid.dt
    sup_x = np.max(np.linalg.norm(ens.x, axis=-1), axis=1)
    sup_rho = np.max(ens.rho, axis=1)
    energy = np.sum(np.sum(ens.u**2, axis=-1), axis=1) * dt
    report = {
        "sup_x4": _mean_se(sup_x**4),
        "sup_rho2": _mean_se(sup_rho**2),
        "sup_rho4": _mean_se(sup_rho**4),
        "admissibility_l4": _mean_se(energy**2),
    }
    if back is not None and back.y.shape[-1] > 0:
        report["sup_y4"] = _mean_se(np.max(np.linalg.norm(back.y, axis=-1), axis=1) ** 4)
        for name, z in (("z1_l4", back.z1), ("z2_l4", back.z2)):
            report[name] = _mean_se((np.sum(np.sum(z**2, axis=-1), axis=1) * dt) ** 2)
    return report
