"""
Problem instances for partially observed forward-backward control.

A problem is a set of coefficient evaluators (drift, diffusions, observation
drift, backward driver, costs and their partial derivatives), declared
dimensions, a convex control set and a horizon.

Evaluators are batched over paths. With M paths, ``t`` is a float and the
array arguments have a leading path axis:

    b, sigma1, sigma2 : (t, x, u)                  -> (M, n)
    h                 : (t, x, u)                  -> (M,)
    f                 : (t, x, y, z1, z2, u)       -> (M, m)
    l                 : (t, x, y, z1, z2, u)       -> (M,)
    phi               : (x,)                       -> (M, m)
    Phi               : (x,)                       -> (M,)
    gamma             : (y,)                       -> (M,)

with ``x: (M, n)``, ``y, z1, z2: (M, m)``, ``u: (M, k)``. A partial
``<fn>_<arg>`` takes the same arguments as ``fn`` and returns the Jacobian
with the differentiated argument last, e.g. ``b_x -> (M, n, n)`` with entry
``[i, a, c] = d b_a / d x_c`` and ``l_u -> (M, k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy.optimize import linprog

from utils.errors import DimensionMismatch, EmptySet, EvaluatorFailure, MissingPartial

Evaluator = Callable[..., np.ndarray]

ARGUMENTS: dict[str, tuple[str, ...]] = {
    "b": ("t", "x", "u"),
    "sigma1": ("t", "x", "u"),
    "sigma2": ("t", "x", "u"),
    "h": ("t", "x", "u"),
    "f": ("t", "x", "y", "z1", "z2", "u"),
    "l": ("t", "x", "y", "z1", "z2", "u"),
    "phi": ("x",),
    "Phi": ("x",),
    "gamma": ("y",),
}

BACKWARD_FUNCTIONS = ("f", "phi", "gamma")
BACKWARD_ARGUMENTS = ("y", "z1", "z2")

PARTIALS: dict[str, tuple[str, str]] = {
    "b_x": ("b", "x"),
    "b_u": ("b", "u"),
    "sigma1_x": ("sigma1", "x"),
    "sigma1_u": ("sigma1", "u"),
    "sigma2_x": ("sigma2", "x"),
    "sigma2_u": ("sigma2", "u"),
    "h_x": ("h", "x"),
    "h_u": ("h", "u"),
    "f_x": ("f", "x"),
    "f_y": ("f", "y"),
    "f_z1": ("f", "z1"),
    "f_z2": ("f", "z2"),
    "f_u": ("f", "u"),
    "phi_x": ("phi", "x"),
    "l_x": ("l", "x"),
    "l_y": ("l", "y"),
    "l_z1": ("l", "z1"),
    "l_z2": ("l", "z2"),
    "l_u": ("l", "u"),
    "Phi_x": ("Phi", "x"),
    "gamma_y": ("gamma", "y"),
}


@dataclass(frozen=True)
class Dimensions:
    """Declared sizes: state n, backward m (0 = none), control k, horizon T."""

    n: int
    m: int
    k: int
    T: float

    def __post_init__(self):
        if self.n < 1:
            raise DimensionMismatch(f"state dimension n must be >= 1, got {self.n}")
        if self.m < 0:
            raise DimensionMismatch(f"backward dimension m must be >= 0, got {self.m}")
        if self.k < 1:
            raise DimensionMismatch(f"control dimension k must be >= 1, got {self.k}")
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")

    def arg_dim(self, arg: str) -> int:
        return {"x": self.n, "y": self.m, "z1": self.m, "z2": self.m, "u": self.k}[arg]

    def output_shape(self, fn: str) -> tuple[int, ...]:
        if fn in ("b", "sigma1", "sigma2"):
            return (self.n,)
        if fn in ("f", "phi"):
            return (self.m,)
        return ()

    def value_shape(self, name: str) -> tuple[int, ...]:
        """Per-path shape of a function or partial value."""
        if name in PARTIALS:
            fn, arg = PARTIALS[name]
            return self.output_shape(fn) + (self.arg_dim(arg),)
        return self.output_shape(name)


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """
    User-supplied coefficient evaluators and their partial derivatives.

    Attributes:
        x0: Initial state, shape (n,)
        b, sigma1, sigma2, h, l, Phi: Forward, observation and cost evaluators
        f, phi, gamma: Backward driver, terminal map and initial cost (None when m = 0)
        partials: Mapping from partial name (see PARTIALS) to evaluator
        bound_C: Declared bound on |sigma2| and |h|
    """

    x0: np.ndarray
    b: Evaluator
    sigma1: Evaluator
    sigma2: Evaluator
    h: Evaluator
    l: Evaluator
    Phi: Evaluator
    f: Evaluator | None = None
    phi: Evaluator | None = None
    gamma: Evaluator | None = None
    partials: dict[str, Evaluator] = field(default_factory=dict)
    bound_C: float = np.inf

    def function(self, name: str) -> Evaluator | None:
        return getattr(self, name)

    def partial(self, name: str) -> Evaluator:
        try:
            return self.partials[name]
        except KeyError:
            raise MissingPartial(f"partial '{name}' was not supplied") from None

    def supplied(self) -> list[str]:
        """Names of every function and partial actually provided."""
        names = [fn for fn in ARGUMENTS if self.function(fn) is not None]
        return names + [p for p in PARTIALS if p in self.partials]


@dataclass(frozen=True, eq=False)
class ControlSet:
    """
    Convex, nonempty control set U in R^k.

    Use the ``box``, ``ball`` and ``halfspaces`` constructors. The
    ``inner_lower``/``inner_upper`` pair is a box contained in U, used when
    sampling controls for finite-difference checks.
    """

    kind: Literal["box", "ball", "halfspace"]
    dim: int
    inner_lower: np.ndarray
    inner_upper: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    center: np.ndarray | None = None
    radius: float | None = None
    normals: np.ndarray | None = None
    offsets: np.ndarray | None = None

    @classmethod
    def box(cls, lower, upper) -> "ControlSet":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if lower.shape != upper.shape:
            raise DimensionMismatch("box bounds must have the same length")
        if np.any(lower > upper):
            raise EmptySet("box has a lower bound above its upper bound")
        inner_lo = np.where(np.isfinite(lower), lower, np.where(np.isfinite(upper), upper - 2.0, -1.0))
        inner_hi = np.where(np.isfinite(upper), upper, inner_lo + 2.0)
        return cls("box", lower.size, inner_lo, inner_hi, lower=lower, upper=upper)

    @classmethod
    def ball(cls, center, radius: float) -> "ControlSet":
        center = np.atleast_1d(np.asarray(center, dtype=float))
        if not radius > 0:
            raise EmptySet("ball radius must be positive")
        half = radius / np.sqrt(center.size)
        return cls("ball", center.size, center - half, center + half, center=center, radius=float(radius))

    @classmethod
    def halfspaces(cls, normals, offsets) -> "ControlSet":
        """Intersection of ``{v : normals[i] . v <= offsets[i]}``; EmptySet when infeasible."""
        A = np.atleast_2d(np.asarray(normals, dtype=float))
        c = np.atleast_1d(np.asarray(offsets, dtype=float))
        if A.shape[0] != c.size:
            raise DimensionMismatch("one offset is required per half-space normal")
        k = A.shape[1]
        # Chebyshev centre: max r s.t. A v + r |a_i| <= c, with r capped at 1
        norms = np.linalg.norm(A, axis=1)
        cost = np.zeros(k + 1)
        cost[-1] = -1.0
        res = linprog(
            cost,
            A_ub=np.hstack([A, norms[:, None]]),
            b_ub=c,
            bounds=[(None, None)] * k + [(0.0, 1.0)],
            method="highs",
        )
        if res.status == 2:
            raise EmptySet("half-space list has no feasible point")
        if res.status != 0:
            raise EmptySet(f"could not locate a feasible point: {res.message}")
        centre, r = res.x[:k], res.x[-1]
        half = r / np.sqrt(k)
        return cls("halfspace", k, centre - half, centre + half, normals=A, offsets=c)

    # ------------------------------------------------------------------
    # Projection

    def project(self, v) -> np.ndarray:
        """Euclidean projection of v (shape (..., k)) onto the set."""
        v = np.asarray(v, dtype=float)
        if self.kind == "box":
            return np.clip(v, self.lower, self.upper)
        if self.kind == "ball":
            d = v - self.center
            r = np.linalg.norm(d, axis=-1, keepdims=True)
            scale = np.where(r > self.radius, self.radius / np.where(r > 0, r, 1.0), 1.0)
            return self.center + d * scale
        return self._dykstra(v)

    def _dykstra(self, v: np.ndarray, max_iter: int = 10_000, atol: float = 1e-13) -> np.ndarray:
        A, c = self.normals, self.offsets
        sq = np.einsum("ij,ij->i", A, A)
        x = v.copy()
        increments = np.zeros((A.shape[0],) + v.shape)
        for _ in range(max_iter):
            x_prev = x
            for i in range(A.shape[0]):
                y = x + increments[i]
                excess = np.maximum(y @ A[i] - c[i], 0.0) / sq[i]
                x = y - excess[..., None] * A[i]
                increments[i] = y - x
            if np.max(np.abs(x - x_prev), initial=0.0) <= atol:
                break
        return x

    def contains(self, v, tol: float = 1e-9) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.kind == "box":
            return np.all((v >= self.lower - tol) & (v <= self.upper + tol), axis=-1)
        if self.kind == "ball":
            return np.linalg.norm(v - self.center, axis=-1) <= self.radius + tol
        return np.all(v @ self.normals.T <= self.offsets + tol, axis=-1)

    def jacobian(self, v) -> np.ndarray:
        """
        Derivative of the projection at v, shape (..., k, k).

        Box coordinates on or beyond a bound get a zero row. Balls use the
        exact derivative of radial scaling; half-spaces project onto the null
        space of the constraints active at the projected point.
        """
        v = np.asarray(v, dtype=float)
        eye = np.eye(self.dim)
        if self.kind == "box":
            inside = (v > self.lower) & (v < self.upper)
            return inside[..., :, None] * eye
        if self.kind == "ball":
            d = v - self.center
            r = np.linalg.norm(d, axis=-1)[..., None, None]
            outer = d[..., :, None] * d[..., None, :]
            safe = np.where(r > 0, r, 1.0)
            scaled = (self.radius / safe) * (eye - outer / safe**2)
            return np.where(r > self.radius, scaled, eye)
        flat = v.reshape(-1, self.dim)
        proj = self._dykstra(flat)
        out = np.empty((flat.shape[0], self.dim, self.dim))
        for i, (vi, pi) in enumerate(zip(flat, proj)):
            if np.allclose(vi, pi, atol=1e-12):
                out[i] = eye
                continue
            active = np.abs(self.normals @ pi - self.offsets) <= 1e-9
            A_act = self.normals[active]
            out[i] = eye - A_act.T @ np.linalg.pinv(A_act @ A_act.T) @ A_act
        return out.reshape(v.shape[:-1] + (self.dim, self.dim))

    def sample_inner(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Uniform draws on the inner box, shape (size, k)."""
        return rng.uniform(self.inner_lower, self.inner_upper, size=(size, self.dim))


def project_control(cs: ControlSet, v) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``cs`` (box clamp, ball radial scaling, half-space Dykstra)."""
    return cs.project(v)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """A validated control problem: dimensions, coefficients, control set and label."""

    dims: Dimensions
    coeffs: CoefficientSet
    control_set: ControlSet
    label: str = "custom"

    def evaluate(self, name: str, point: dict) -> np.ndarray:
        """
        Evaluate a coefficient function or partial at a batched point.

        Backward functions and backward-argument partials are identically
        zero when m = 0.

        Args:
            name: Function name (see ARGUMENTS) or partial name (see PARTIALS)
            point: Mapping with keys among t, x, y, z1, z2, u

        Returns:
            Array of shape (M,) + dims.value_shape(name)
        """
        fn, arg = PARTIALS.get(name, (name, None))
        if self.dims.m == 0 and (fn in BACKWARD_FUNCTIONS or arg in BACKWARD_ARGUMENTS):
            M = _batch_size(point)
            return np.zeros((M,) + self.dims.value_shape(name))
        evaluator = self.coeffs.partial(name) if arg else self.coeffs.function(fn)
        if evaluator is None:
            raise MissingPartial(f"evaluator '{name}' was not supplied")
        return np.asarray(evaluator(*(point[a] for a in ARGUMENTS[fn])), dtype=float)


def _batch_size(point: dict) -> int:
    for key in ("x", "u", "y"):
        if key in point:
            return np.asarray(point[key]).shape[0]
    return 1


def reference_point(dims: Dimensions, coeffs: CoefficientSet, control_set: ControlSet) -> dict:
    """Single-path point (t=0, x=x0, y=0, z=0, u=project(0))."""
    zeros_m = np.zeros((1, dims.m))
    return {
        "t": 0.0,
        "x": np.asarray(coeffs.x0, dtype=float).reshape(1, -1),
        "y": zeros_m,
        "z1": zeros_m,
        "z2": zeros_m,
        "u": control_set.project(np.zeros((1, dims.k))),
    }


def build_problem(
    dims: Dimensions,
    coeffs: CoefficientSet,
    control_set: ControlSet,
    label: str = "custom",
) -> ProblemInstance:
    """
    Validate a problem by probing every supplied evaluator once.

    Args:
        dims: Declared dimensions
        coeffs: Coefficient evaluators and partials
        control_set: Convex control set in R^k
        label: Text identifier

    Returns:
        The validated ProblemInstance

    Raises:
        DimensionMismatch: An evaluator output has the wrong shape, x0 or the
            control set has the wrong length, or backward evaluators disagree with m
        EvaluatorFailure: An evaluator raised at the reference point
    """
    x0 = np.asarray(coeffs.x0, dtype=float)
    if x0.shape != (dims.n,):
        raise DimensionMismatch(f"x0 has shape {x0.shape}, expected ({dims.n},)")
    if control_set.dim != dims.k:
        raise DimensionMismatch(f"control set lives in R^{control_set.dim}, expected R^{dims.k}")

    backward_names = [n for n in coeffs.supplied() if PARTIALS.get(n, (n, None))[0] in BACKWARD_FUNCTIONS]
    if dims.m == 0 and backward_names:
        raise DimensionMismatch(f"m=0 but backward evaluators were supplied: {backward_names}")
    if dims.m > 0:
        missing = [fn for fn in BACKWARD_FUNCTIONS if coeffs.function(fn) is None]
        if missing:
            raise DimensionMismatch(f"m={dims.m} requires evaluators {missing}")
    unknown = sorted(set(coeffs.partials) - set(PARTIALS))
    if unknown:
        raise DimensionMismatch(f"unknown partial names: {unknown}")

    problem = ProblemInstance(dims, coeffs, control_set, label)
    point = reference_point(dims, coeffs, control_set)
    for name in coeffs.supplied():
        try:
            value = problem.evaluate(name, point)
        except Exception as e:
            raise EvaluatorFailure(f"evaluator '{name}' failed at the reference point: {e}") from e
        expected = (1,) + dims.value_shape(name)
        if value.shape != expected:
            raise DimensionMismatch(f"evaluator '{name}' returned shape {value.shape}, expected {expected}")
    return problem


# ----------------------------------------------------------------------
# Sampled finite-difference checks


@dataclass(frozen=True)
class GradientCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass(frozen=True)
class BoundCheckEntry:
    name: str
    max_abs: float
    bound: float
    passed: bool


@dataclass(frozen=True)
class GradientCheckReport:
    entries: list[GradientCheckEntry]
    bounds: list[BoundCheckEntry]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries) and all(b.passed for b in self.bounds)

    @property
    def failures(self) -> list[str]:
        return [e.name for e in self.entries if not e.passed] + [b.name for b in self.bounds if not b.passed]

    def entry(self, name: str) -> GradientCheckEntry:
        return next(e for e in self.entries if e.name == name)


def _sample_point(p: ProblemInstance, rng: np.random.Generator) -> dict:
    d = p.dims
    return {
        "t": float(rng.uniform(0.0, d.T)),
        "x": rng.standard_normal((1, d.n)),
        "y": rng.standard_normal((1, d.m)),
        "z1": rng.standard_normal((1, d.m)),
        "z2": rng.standard_normal((1, d.m)),
        "u": p.control_set.sample_inner(rng, 1),
    }


def check_gradients(
    p: ProblemInstance,
    samples: int = 50,
    step: float = 1e-5,
    tol: float = 1e-5,
    seed: int = 0,
) -> GradientCheckReport:
    """
    Compare every supplied partial with central differences of its function.

    The relative error of an entry is ``|analytic - fd| / max(1, |analytic|)``;
    the reported value is the maximum over entries and sampled points.
    Sampled |sigma2| and |h| are also compared against the declared bound C.

    Args:
        p: Problem instance
        samples: Number of sampled points (>= 1)
        step: Central-difference step (> 0)
        tol: Pass threshold (> 0)
        seed: Sampling seed

    Returns:
        GradientCheckReport; failures are entries, never exceptions
    """
    if samples < 1 or not step > 0 or not tol > 0:
        raise ValueError("check_gradients needs samples >= 1, step > 0 and tol > 0")
    rng = np.random.default_rng(seed)
    points = [_sample_point(p, rng) for _ in range(samples)]

    names = [n for n in PARTIALS if n in p.coeffs.partials]
    entries = []
    for name in names:
        fn, arg = PARTIALS[name]
        worst = 0.0
        for point in points:
            analytic = p.evaluate(name, point)[0]
            fd = np.empty_like(analytic)
            for j in range(p.dims.arg_dim(arg)):
                plus = dict(point)
                minus = dict(point)
                plus[arg] = point[arg].copy()
                minus[arg] = point[arg].copy()
                plus[arg][0, j] += step
                minus[arg][0, j] -= step
                fd[..., j] = (p.evaluate(fn, plus)[0] - p.evaluate(fn, minus)[0]) / (2.0 * step)
            rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
            worst = max(worst, float(np.max(rel, initial=0.0)))
        entries.append(GradientCheckEntry(name, worst, worst <= tol))

    bounds = []
    for fn in ("sigma2", "h"):
        biggest = max(float(np.max(np.abs(p.evaluate(fn, pt)), initial=0.0)) for pt in points)
        bound = float(p.coeffs.bound_C)
        bounds.append(BoundCheckEntry(fn, biggest, bound, biggest <= bound))
        if biggest > bound:
            print(f"⚠️ {fn} reached {biggest:.3g} on samples, above the declared bound {bound:.3g}")
    return GradientCheckReport(entries, bounds, tol)
