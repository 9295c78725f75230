"""Nonlinear closure by frozen-coefficient (Picard) iteration.

Each outer step freezes b_i = int_0^1 F_i'(sigma w_i) dsigma and
c_i = F_i'(w_i) along the current iterate w, solves the linear
Stackelberg-Nash problem (followers in equilibrium, leader minimizing
J_eps), and moves w toward the resulting state.  The selection is
deterministic: CG from the previous leader control, which is h = 0 on the
first step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IterationError
from .leader import LeaderResult, PenalizationConfig, minimize_penalized
from .nash import characterization_residuals, qnorm
from .pde import (
    CoupledSystem, LinearizedCoefficients, backward_residual, control_source, forward_residual,
    forward_samples, freeze_coefficients, solve_forward,
)

__all__ = ["OuterConfig", "OuterResult", "freeze_coefficients", "nonlinear_residuals", "run_stackelberg_nash"]


@dataclass(frozen=True)
class OuterConfig:
    max_iter: int = 10
    tol: float = 1e-8
    damping: float = 1.0

    def __post_init__(self):
        if not self.tol > 0.0:
            raise ValueError("outer tolerance must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iter < 1:
            raise ValueError("need at least one outer iteration")


@dataclass
class OuterResult:
    h: np.ndarray
    v: np.ndarray
    y: np.ndarray
    p: np.ndarray
    coeffs: LinearizedCoefficients
    leader: LeaderResult
    iterations: int
    changes: list
    converged: bool
    residuals: dict = field(default_factory=dict)
    bound_ratio: float = float("nan")

    @property
    def terminal_norm(self) -> float:
        return self.leader.terminal_norm


def nonlinear_residuals(problem, h, v, y, p) -> dict:
    """Max-norm residuals of the optimality system with the true F.

    The state equations use F(y); the follower adjoints use F'(y).
    """
    src = control_source(problem, h, v[0], v[1])
    r = forward_residual(problem, y, src)
    out = {"y1": float(np.abs(r[0]).max()), "y2": float(np.abs(r[1]).max())}
    ys = forward_samples(y)
    pot = np.stack([problem.F[j].dF(ys[j]) for j in range(2)])
    for i in range(2):
        g = problem.cost.alphas[i] * problem.omega_d.indicator * (ys - problem.cost.targets[i])
        rp = backward_residual(problem, p[i], g, pot)
        out[f"p1^{i + 1}"] = float(np.abs(rp[0]).max())
        out[f"p2^{i + 1}"] = float(np.abs(rp[1]).max())
    chars = characterization_residuals(problem, v, p)
    out["vop1"], out["vop2"] = chars
    return out


def data_size(problem) -> float:
    """||y0_1|| + ||y0_2|| plus the kappa-weighted target norm, the right side of the a-priori bound."""
    W = problem.space.weights
    y0 = sum(math.sqrt(float(np.sum(W * problem.y0[j] ** 2))) for j in range(2))
    tg = math.sqrt(problem.cost.weighted_target_norm(problem.bundle.kappa, problem.space, problem.time))
    return y0 + tg


def run_stackelberg_nash(problem, outer: OuterConfig | None = None, eps: float = 1e-4, cg_tol: float = 1e-10,
                         cg_max_iter: int = 2000, method: str = "monolithic", w0=None, h0=None,
                         raise_on_failure: bool = True) -> OuterResult:
    """Picard loop w -> state of the linearized Stackelberg-Nash solve at w."""
    outer = OuterConfig() if outer is None else outer
    w = solve_forward(problem) if w0 is None else np.asarray(w0, float)
    h = h0
    changes = []
    leader = coeffs = None
    converged = False
    for _ in range(outer.max_iter):
        coeffs = freeze_coefficients(forward_samples(w), problem.F, problem.d)
        system = CoupledSystem(problem, coeffs)
        leader = minimize_penalized(system, PenalizationConfig(eps, cg_tol, cg_max_iter, h, method))
        h = leader.h
        w_new = (1.0 - outer.damping) * w + outer.damping * leader.y
        change = qnorm(problem, forward_samples(w_new - w))
        changes.append(change)
        w = w_new
        if change < outer.tol:
            converged = True
            break
    if not converged and raise_on_failure:
        raise IterationError(f"outer loop did not reach change < {outer.tol} in {outer.max_iter} iterations",
                             changes)
    state = leader.state
    res = nonlinear_residuals(problem, leader.h, state.v, state.y, state.p)
    y_size = sum(math.sqrt(float(np.sum(problem.space.weights * state.y[j, -1] ** 2))) for j in range(2))
    size = data_size(problem)
    bound = y_size / size if size > 0.0 else float("nan")
    return OuterResult(leader.h, state.v, state.y, state.p, coeffs, leader, len(changes), changes, converged,
                       res, bound)
