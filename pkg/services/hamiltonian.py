"""
Hamiltonian of the partially observed control problem and its partials.

    H = l + <b, p> + <sigma1, q1> + <sigma2, q2> + <f, k> + R2eff * h

R2eff is the already-shifted observation adjoint (see ``shift_r2``); this
module treats it as an independent scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from services.problem import ProblemInstance

WRT = ("x", "y", "z1", "z2", "u")


@dataclass(frozen=True, eq=False)
class HamiltonianPoint:
    """
    Batched evaluation point; every array has a leading path axis of size M.

    Shapes: x, p, q1, q2 (M, n); y, z1, z2, k (M, m); u (M, k); R2eff (M,).
    """

    t: float
    x: np.ndarray
    y: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    u: np.ndarray
    p: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    k: np.ndarray
    R2eff: np.ndarray

    def state(self) -> dict:
        return {"t": self.t, "x": self.x, "y": self.y, "z1": self.z1, "z2": self.z2, "u": self.u}

    def with_values(self, **changes) -> "HamiltonianPoint":
        return replace(self, **changes)

    def zero_adjoint(self) -> "HamiltonianPoint":
        return replace(
            self,
            p=np.zeros_like(self.p),
            q1=np.zeros_like(self.q1),
            q2=np.zeros_like(self.q2),
            k=np.zeros_like(self.k),
            R2eff=np.zeros_like(self.R2eff),
        )


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ma,ma->m", a, b)


def _jt(jac: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Transposed Jacobian times vector, per path: (M, a, c), (M, a) -> (M, c)."""
    return np.einsum("mac,ma->mc", jac, v)


def shift_r2(R2: np.ndarray, sigma2: np.ndarray, p: np.ndarray, z2: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Shifted observation adjoint R2 - <sigma2, p> - <z2, k>, per path."""
    return R2 - _dot(sigma2, p) - _dot(z2, k)


def eval_H(pt: HamiltonianPoint, problem: ProblemInstance) -> np.ndarray:
    """
    Evaluate the Hamiltonian at a batched point.

    Args:
        pt: Evaluation point
        problem: Problem supplying the coefficient evaluators

    Returns:
        H per path, shape (M,)
    """
    s = pt.state()
    return (
        problem.evaluate("l", s)
        + _dot(problem.evaluate("b", s), pt.p)
        + _dot(problem.evaluate("sigma1", s), pt.q1)
        + _dot(problem.evaluate("sigma2", s), pt.q2)
        + _dot(problem.evaluate("f", s), pt.k)
        + pt.R2eff * problem.evaluate("h", s)
    )


def grad_H(pt: HamiltonianPoint, problem: ProblemInstance, wrt: str) -> np.ndarray:
    """
    Exact partial of H with respect to one argument group.

    H_y, H_z1 and H_z2 only involve l and f since b, sigma1, sigma2 and h do
    not depend on (y, z). The z2-dependence of the shift is already folded
    into R2eff and is not differentiated here.

    Args:
        pt: Evaluation point
        problem: Problem supplying the partial evaluators
        wrt: One of "x", "y", "z1", "z2", "u"

    Returns:
        Partial per path, shape (M, dim(wrt))

    Raises:
        MissingPartial: A required partial was not supplied
    """
    if wrt not in WRT:
        raise ValueError(f"wrt must be one of {WRT}, got '{wrt}'")
    s = pt.state()
    grad = problem.evaluate(f"l_{wrt}", s) + _jt(problem.evaluate(f"f_{wrt}", s), pt.k)
    if wrt in ("x", "u"):
        grad = (
            grad
            + _jt(problem.evaluate(f"b_{wrt}", s), pt.p)
            + _jt(problem.evaluate(f"sigma1_{wrt}", s), pt.q1)
            + _jt(problem.evaluate(f"sigma2_{wrt}", s), pt.q2)
            + problem.evaluate(f"h_{wrt}", s) * pt.R2eff[:, None]
        )
    return grad
