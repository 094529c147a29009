"""Damped nonlinear least squares (Levenberg-Marquardt).

Minimises ``0.5 * ||r(x)||^2``; costs reported are the plain sum of squares.
Damping is Marquardt's multiplicative form ``J^T J + mu * diag(J^T J)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import NumericalBreakdown


class Termination(str, enum.Enum):
    GRAD_TOL = "GradTol"
    STEP_TOL = "StepTol"
    MAX_ITERS = "MaxIters"


@dataclass(frozen=True)
class ResidualProblem:
    residual_fn: Callable[[np.ndarray], np.ndarray]
    param_dim: int
    residual_dim: int
    jacobian_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.residual_dim < self.param_dim:
            raise ValueError("need at least as many residuals as parameters")


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 100
    grad_tol: float = 1e-10
    step_tol: float = 1e-12
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 1.0 / 3.0
    fd_eps: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.grad_tol <= 0 or self.step_tol <= 0 or self.initial_damping <= 0 or self.fd_eps <= 0:
            raise ValueError("tolerances and damping must be positive")
        if not (self.damping_up > 1.0 and 0.0 < self.damping_down < 1.0):
            raise ValueError("need damping_up > 1 and 0 < damping_down < 1")


@dataclass
class SolverReport:
    solution: np.ndarray
    final_cost: float
    iterations: int
    termination: Termination
    initial_cost: float = float("nan")
    cost_history: list = field(default_factory=list)  # cost after every accepted step, starting at x0


def numeric_jacobian(problem: ResidualProblem, x, eps: float = 1e-6) -> np.ndarray:
    """Central differences, one column per parameter."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    J = np.empty((problem.residual_dim, x.size))
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = eps
        J[:, j] = (problem.residual_fn(x + step) - problem.residual_fn(x - step)) / (2.0 * eps)
    return J


def damped_step(J: np.ndarray, r: np.ndarray, damping: float) -> np.ndarray:
    """Solve ``(J^T J + damping * diag(J^T J)) delta = -J^T r`` by Cholesky."""
    A = J.T @ J
    g = J.T @ r
    d = np.diag(A).copy()
    d = np.maximum(d, 1e-12 * max(d.max(initial=0.0), 1.0))
    H = A + damping * np.diag(d)
    if not np.all(np.isfinite(H)) or not np.all(np.isfinite(g)):
        raise NumericalBreakdown("non-finite normal equations")
    try:
        factor = scipy.linalg.cho_factor(H)
    except np.linalg.LinAlgError:
        try:
            factor = scipy.linalg.cho_factor(H + 1e-12 * np.eye(H.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdown("normal equations not positive definite") from exc
    delta = scipy.linalg.cho_solve(factor, -g)
    if not np.all(np.isfinite(delta)):
        raise NumericalBreakdown("non-finite step")
    return delta


def _cost(r: np.ndarray) -> float:
    return float(r @ r)


def solve(problem: ResidualProblem, x0, cfg: SolverConfig = SolverConfig()) -> SolverReport:
    x = np.array(x0, dtype=float).reshape(-1)
    if x.size != problem.param_dim or not np.all(np.isfinite(x)):
        raise ValueError("x0 must be a finite vector of length param_dim")

    def jac(p):
        if problem.jacobian_fn is not None:
            return np.asarray(problem.jacobian_fn(p), dtype=float)
        return numeric_jacobian(problem, p, cfg.fd_eps)

    r = np.asarray(problem.residual_fn(x), dtype=float)
    cost = _cost(r)
    if not np.isfinite(cost):
        raise NumericalBreakdown("residual is non-finite at the initial point")
    history = [cost]
    damping = cfg.initial_damping
    termination = Termination.MAX_ITERS
    iterations = 0

    while iterations < cfg.max_iters:
        iterations += 1
        J = jac(x)
        with np.errstate(invalid="ignore", over="ignore"):  # checked just below
            g = J.T @ r
        if not np.all(np.isfinite(g)):
            raise NumericalBreakdown("non-finite gradient")
        if np.max(np.abs(g)) <= cfg.grad_tol:
            termination = Termination.GRAD_TOL
            break
        accepted = False
        while not accepted:
            delta = damped_step(J, r, damping)
            if np.linalg.norm(delta) <= cfg.step_tol * (np.linalg.norm(x) + cfg.step_tol):
                termination = Termination.STEP_TOL
                break
            x_new = x + delta
            r_new = np.asarray(problem.residual_fn(x_new), dtype=float)
            cost_new = _cost(r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                x, r, cost = x_new, r_new, cost_new
                history.append(cost)
                damping = max(damping * cfg.damping_down, 1e-15)
                accepted = True
            else:
                damping *= cfg.damping_up
        if not accepted:
            break

    return SolverReport(solution=x, final_cost=cost, iterations=iterations, termination=termination,
                        initial_cost=history[0], cost_history=history)
