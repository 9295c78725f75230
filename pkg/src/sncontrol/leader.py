"""Leader null control by penalization.

For frozen coefficients the map h -> y(T) through the follower optimality
system is affine, so

    J_eps(h) = ||y(T)||^2 / (2 eps) + ||h||^2_{omega_T} / 2

is a strictly convex quadratic.  Its gradient is chi_omega (h - rho_1),
where (rho, psi) solves the coupled adjoint system with
rho(T) = -y(T) / eps.  Minimization uses conjugate gradients in the
discrete L2(omega_T) product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IterationError
from .carleman import loglog_slope
from .nash import linear_coefficients, qinner, qnorm
from .pde import CoupledSystem, backward_samples, forward_samples, freeze_coefficients, solve_forward


@dataclass(frozen=True)
class PenalizationConfig:
    eps: float
    tol: float = 1e-10
    max_iter: int = 2000
    h0: np.ndarray | None = None
    method: str = "monolithic"

    def __post_init__(self):
        if not self.eps > 0.0:
            raise ValueError("eps must be positive")
        if not 0.0 < self.tol < 1.0:
            raise ValueError("tolerance must lie in (0, 1)")


@dataclass
class LeaderResult:
    eps: float
    h: np.ndarray
    state: object  # OptimalitySolution at h
    terminal_norms: tuple  # (||y1(T)||, ||y2(T)||)
    h_norm: float
    iterations: int
    residual: float  # ||grad|| / ||h|| (or ||grad|| when h = 0)
    optimality: float  # ||h - rho_1||_{omega_T} / (1 + ||h||)
    J: float
    J_history: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)

    @property
    def terminal_norm(self) -> float:
        return float(math.hypot(*self.terminal_norms))

    @property
    def v(self):
        return self.state.v

    @property
    def y(self):
        return self.state.y


def default_coefficients(problem):
    """Potentials for leader-only experiments.

    Linear nonlinearities give constants; otherwise the coefficients are
    frozen along the uncontrolled trajectory (the first outer iterate).
    """
    if all(F.linear for F in problem.F):
        return linear_coefficients(problem)
    y = solve_forward(problem)
    return freeze_coefficients(forward_samples(y), problem.F, problem.d)


def leader_system(problem, coeffs=None) -> CoupledSystem:
    return CoupledSystem(problem, default_coefficients(problem) if coeffs is None else coeffs)


def _terminal_sq(problem, yT) -> float:
    return float(np.sum(problem.space.weights * yT**2))


def evaluate_Jeps(system: CoupledSystem, h, eps, method="monolithic") -> float:
    pb = system.problem
    h = pb.omega.indicator * np.asarray(h, float)
    yT = system.optimality(h, method=method).y[:, -1]
    return _terminal_sq(pb, yT) / (2.0 * eps) + 0.5 * qinner(pb, h, h)


def _adjoint_term(system, yT, eps, method):
    """chi_omega rho_1 for terminal data -yT / eps."""
    pb = system.problem
    adj = system.adjoint(-yT / eps, method=method)
    return pb.omega.indicator * backward_samples(adj.rho[0])


def gradient_Jeps(system: CoupledSystem, h, eps, method="monolithic") -> np.ndarray:
    """chi_omega (h - rho_1); vanishes exactly when h = rho_1 on omega_T."""
    pb = system.problem
    h = pb.omega.indicator * np.asarray(h, float)
    yT = system.optimality(h, method=method).y[:, -1]
    return h - _adjoint_term(system, yT, eps, method)


def minimize_penalized(system: CoupledSystem, cfg: PenalizationConfig) -> LeaderResult:
    """Conjugate gradients on H h = -g0 with H v = chi_omega (v - rho_1[v]).

    J_eps is tracked exactly through the affine terminal state, and the
    true gradient is recomputed before accepting convergence.
    """
    pb = system.problem
    eps, method = cfg.eps, cfg.method
    chi = pb.omega.indicator
    m, n = pb.time.m, pb.space.n
    h = np.zeros((m, n)) if cfg.h0 is None else chi * np.asarray(cfg.h0, float)

    def hess(p):
        yT = system.optimality(p, method=method, homogeneous=True).y[:, -1]
        return p - _adjoint_term(system, yT, eps, method), yT

    def objective(yT, h):
        return _terminal_sq(pb, yT) / (2.0 * eps) + 0.5 * qinner(pb, h, h)

    J_hist, r_hist = [], []
    iterations = 0
    while True:
        yT = system.optimality(h, method=method).y[:, -1]
        r = -(h - _adjoint_term(system, yT, eps, method))
        rn, hn = qnorm(pb, r), qnorm(pb, h)
        J_hist.append(objective(yT, h))
        r_hist.append(rn)
        if rn == 0.0 or rn <= cfg.tol * hn:
            break
        if iterations >= cfg.max_iter:
            raise IterationError(f"CG did not converge in {cfg.max_iter} iterations", r_hist)
        # inner CG cycle from the true residual
        p = r.copy()
        rr = rn**2
        while iterations < cfg.max_iter:
            Hp, yTp = hess(p)
            curv = qinner(pb, p, Hp)
            if not curv > 0.0:
                break
            step = rr / curv
            h = h + step * p
            yT = yT + step * yTp
            r = r - step * Hp
            iterations += 1
            J_hist.append(objective(yT, h))
            rr_new = qinner(pb, r, r)
            r_hist.append(math.sqrt(rr_new))
            if math.sqrt(rr_new) <= 0.5 * cfg.tol * qnorm(pb, h):
                break
            p = r + (rr_new / rr) * p
            rr = rr_new

    state = system.optimality(h, method=method)
    yT = state.y[:, -1]
    w = pb.space.weights
    norms = tuple(float(np.sqrt(np.sum(w * yT[j] ** 2))) for j in range(2))
    hn = qnorm(pb, h)
    rho1 = _adjoint_term(system, yT, eps, method)
    opt = qnorm(pb, h - rho1) / (1.0 + hn)
    res = qnorm(pb, h - rho1) / hn if hn > 0.0 else qnorm(pb, h - rho1)
    return LeaderResult(eps, h, state, norms, hn, iterations, res, opt, objective(yT, h), J_hist, r_hist)


# ---------------------------------------------------------------------------
# epsilon sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list  # dicts: eps, y1T, y2T, yT, h_norm, iterations, residual, in_fit
    slope: float
    window: tuple  # (first, last) row indices used in the fit
    results: list = field(default_factory=list, repr=False)

    @property
    def eps(self):
        return np.array([r["eps"] for r in self.rows])

    @property
    def terminal(self):
        return np.array([r["yT"] for r in self.rows])

    @property
    def h_norms(self):
        return np.array([r["h_norm"] for r in self.rows])


def fit_window(eps, values, plateau_slope=0.1) -> tuple:
    """Index window before the discretization floor.

    The floor shows up at the small-eps end as a collapse of the local
    log-log slope; trailing points whose local slope is below
    ``plateau_slope`` are dropped.  At least two points are always kept.
    """
    le, lv = np.log(np.asarray(eps, float)), np.log(np.asarray(values, float))
    local = np.diff(lv) / np.diff(le)
    last = len(le) - 1
    while last > 1 and local[last - 1] < plateau_slope:
        last -= 1
    return 0, last


def epsilon_sweep(system: CoupledSystem, ladder, tol=1e-10, max_iter=2000, method="monolithic",
                  warm_start=True, plateau_slope=0.1) -> SweepResult:
    """Minimize J_eps along a decreasing ladder and fit ||y(T)|| ~ eps^slope."""
    ladder = [float(e) for e in ladder]
    if len(ladder) < 4:
        raise ValueError("epsilon ladder needs at least four points for the slope fit")
    if any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("epsilon ladder must be strictly decreasing")
    results, h0 = [], None
    for eps in ladder:
        res = minimize_penalized(system, PenalizationConfig(eps, tol, max_iter, h0, method))
        results.append(res)
        if warm_start:
            h0 = res.h
    terminal = [r.terminal_norm for r in results]
    lo, hi = fit_window(ladder, terminal, plateau_slope)
    slope = loglog_slope(ladder[lo:hi + 1], terminal[lo:hi + 1])
    rows = [{
        "eps": r.eps, "y1T": r.terminal_norms[0], "y2T": r.terminal_norms[1], "yT": r.terminal_norm,
        "h_norm": r.h_norm, "iterations": r.iterations, "residual": r.residual, "in_fit": lo <= k <= hi,
    } for k, r in enumerate(results)]
    return SweepResult(rows, slope, (lo, hi), results)
