"""Follower game: costs J_1, J_2, their adjoint gradients, the Nash
quasi-equilibrium and the second-order (convexity) check.

Costs use the same time pairing as the solvers: tracking terms are sampled
at forward nodes ``1..m`` and control terms on the ``m`` intervals, so the
adjoint gradients below are exact derivatives of the discrete costs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .carleman import trial_rng
from .errors import IterationError
from .pde import (
    CoupledSystem, LinearizedCoefficients, OptimalitySolution, backward_samples, constant_coefficients,
    control_source, forward_residual, forward_samples, freeze_coefficients, march_backward, march_forward,
    solve_forward,
)


@dataclass(frozen=True)
class CostConfig:
    """Weights alpha_i, mu_i and targets (player, component, m, N) on omega_d."""

    alphas: tuple
    mus: tuple
    targets: np.ndarray

    def __post_init__(self):
        if len(self.alphas) != 2 or len(self.mus) != 2:
            raise ValueError("two followers expected")
        if min(self.alphas) <= 0.0 or min(self.mus) <= 0.0:
            raise ValueError("alpha_i and mu_i must be positive")
        t = np.asarray(self.targets, dtype=float)
        if t.ndim != 4 or t.shape[:2] != (2, 2) or not np.all(np.isfinite(t)):
            raise ValueError("targets must be a finite (2, 2, m, N) array")
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "mus", tuple(float(u) for u in self.mus))
        object.__setattr__(self, "targets", t)

    def weighted_target_norm(self, kappa, space, time) -> float:
        """sum over i, j of the kappa^{-2} weighted L2(Q) norm squared of y_{j,d}^i."""
        k2 = np.asarray(kappa, float)[:, None] ** -2.0
        return float(time.dt * np.sum(space.weights * k2 * self.targets**2))


def bump(x, interval):
    """sin^2 bump supported on the interval, zero outside."""
    lo, hi = interval
    z = np.clip((np.asarray(x, float) - lo) / (hi - lo), 0.0, 1.0)
    return np.sin(np.pi * z) ** 2


TARGET_SHAPE = ((1.0, 0.5), (-0.5, 1.0))


def default_targets(space, omega_d, kappa, amplitude=1.0) -> np.ndarray:
    """y_{j,d}^i = amplitude c_ij kappa(t) g(x) with a bump g on omega_d."""
    g = bump(space.nodes, omega_d.interval) * omega_d.indicator
    base = np.outer(kappa, g)
    return amplitude * np.array([[c * base for c in row] for row in TARGET_SHAPE])


# ---------------------------------------------------------------------------
# inner products and costs
# ---------------------------------------------------------------------------


def qinner(problem, u, v) -> float:
    """dt sum_k <u_k, v_k>_W for interval fields (m, N) or stacks of them."""
    return float(problem.time.dt * np.sum(problem.space.weights * u * v))


def qnorm(problem, u) -> float:
    return float(np.sqrt(qinner(problem, u, u)))


def rho_weighted_norm(problem, w) -> float:
    """sqrt of dt sum rho_*^2 |w|^2 W."""
    return qnorm(problem, problem.rho_star[:, None] * w)


def _controls(problem, v1, v2):
    m, n = problem.time.m, problem.space.n
    z = np.zeros((m, n))
    return [z if v is None else np.asarray(v, float) for v in (v1, v2)]


def cost_terms(problem, i, y, v) -> tuple[float, float]:
    """(tracking, control) parts of J_i for a trajectory and player-i control."""
    c = problem.cost
    diff = forward_samples(y) - c.targets[i]
    track = 0.5 * c.alphas[i] * qinner(problem, problem.omega_d.indicator * diff, diff)
    vm = problem.follower_masks[i].indicator * v
    pen = 0.5 * c.mus[i] * qinner(problem, problem.rho_star[:, None] ** 2 * vm, vm)
    return track, pen


def evaluate_J(problem, i, h=None, v1=None, v2=None, coeffs=None) -> float:
    """J_i(h; v1, v2); the state solves the frozen system if ``coeffs`` is given."""
    v = _controls(problem, v1, v2)
    y = solve_forward(problem, h, v[0], v[1], coeffs=coeffs)
    return sum(cost_terms(problem, i, y, v[i]))


def _adjoint_potentials(problem, y, coeffs):
    if coeffs is not None:
        return coeffs.b, coeffs.d, np.zeros_like(coeffs.b)
    ys = forward_samples(y)
    pot = np.stack([problem.F[j].dF(ys[j]) for j in range(2)])
    curv = np.stack([problem.F[j].d2F(ys[j]) for j in range(2)])
    return pot, problem.d, curv


def gradient_J(problem, i, h=None, v1=None, v2=None, coeffs=None) -> np.ndarray:
    """Riesz representative of D_i J_i: chi_i (mu_i rho_*^2 v^i + p_1^i).

    With ``coeffs`` this is the exact gradient of the frozen-coefficient
    cost; otherwise of the nonlinear cost (fully implicit state).
    """
    v = _controls(problem, v1, v2)
    y = solve_forward(problem, h, v[0], v[1], coeffs=coeffs)
    pot, d, _ = _adjoint_potentials(problem, y, coeffs)
    c = problem.cost
    src = c.alphas[i] * problem.omega_d.indicator * (forward_samples(y) - c.targets[i])
    p = march_backward(problem, pot, d, src, np.zeros((2, problem.space.n)))
    chi = problem.follower_masks[i].indicator
    return chi * (c.mus[i] * problem.rho_star[:, None] ** 2 * v[i] + backward_samples(p[0]))


# ---------------------------------------------------------------------------
# Nash quasi-equilibrium
# ---------------------------------------------------------------------------


@dataclass
class NashSolution:
    h: np.ndarray
    v: np.ndarray  # (2, m, N)
    y: np.ndarray  # (2, m + 1, N)
    p: np.ndarray  # (2, 2, m + 1, N)
    coeffs: LinearizedCoefficients
    frozen: bool  # True when solved for caller-supplied coefficients
    method: str
    residuals: dict = field(default_factory=dict)
    characterization: tuple = (0.0, 0.0)
    bound_ratio: float = 0.0
    history: list = field(default_factory=list)


def characterization_residuals(problem, v, p) -> tuple:
    """||mu_i rho_*^2 v^i + p_1^i|| / ||p_1^i|| on omega_i x (0, T), per player."""
    out = []
    for i in range(2):
        chi = problem.follower_masks[i].indicator
        p1 = chi * backward_samples(p[i][0])
        r = chi * problem.cost.mus[i] * problem.rho_star[:, None] ** 2 * v[i] + p1
        den = qnorm(problem, p1)
        out.append(qnorm(problem, r) / den if den > 0.0 else qnorm(problem, r))
    return tuple(out)


def linear_coefficients(problem) -> LinearizedCoefficients:
    """Constant potentials F_i'(0) for linear nonlinearities."""
    return constant_coefficients(problem, [float(F.dF(np.zeros(1))[0]) for F in problem.F])


def _package(problem, sol: OptimalitySolution, h, coeffs, frozen, history) -> NashSolution:
    system = CoupledSystem(problem, coeffs)
    res = system.optimality_residuals(sol, h)
    if not frozen:
        src = control_source(problem, h, sol.v[0], sol.v[1])
        r = forward_residual(problem, sol.y, src)
        res["nonlinear_y1"], res["nonlinear_y2"] = float(np.abs(r[0]).max()), float(np.abs(r[1]).max())
    hn = 0.0 if h is None else qnorm(problem, problem.omega.indicator * h)
    ratio = qnorm(problem, sol.v) / (1.0 + hn)
    return NashSolution(
        np.zeros_like(sol.v[0]) if h is None else np.asarray(h, float), sol.v, sol.y, sol.p, coeffs, frozen,
        sol.method, res, characterization_residuals(problem, sol.v, sol.p), ratio, history,
    )


def solve_nash(problem, h=None, coeffs=None, method="monolithic", tol=1e-12, max_iter=100,
               system=None) -> NashSolution:
    """Follower equilibrium for leader control ``h``.

    Frozen or linear problems need one coupled solve.  Otherwise the
    coefficients are refrozen at the current state until the state stops
    changing, which yields the quasi-equilibrium of the nonlinear game.
    """
    if system is not None:
        coeffs = system.coeffs
    if coeffs is not None or all(F.linear for F in problem.F):
        frozen = coeffs is not None
        coeffs = linear_coefficients(problem) if coeffs is None else coeffs
        system = system or CoupledSystem(problem, coeffs)
        sol = system.optimality(h, method=method)
        return _package(problem, sol, h, coeffs, frozen, [])
    y = solve_forward(problem, h)
    history = []
    for _ in range(max_iter):
        coeffs = freeze_coefficients(forward_samples(y), problem.F, problem.d)
        sol = CoupledSystem(problem, coeffs).optimality(h, method=method)
        change = qnorm(problem, forward_samples(sol.y - y))
        history.append(change)
        y = sol.y
        if change < tol * (1.0 + qnorm(problem, forward_samples(y))):
            coeffs = freeze_coefficients(forward_samples(y), problem.F, problem.d)
            return _package(problem, sol, h, coeffs, False, history)
    raise IterationError("frozen-coefficient Nash loop did not converge", history)


# ---------------------------------------------------------------------------
# second variation and convexity
# ---------------------------------------------------------------------------


def second_variation(problem, i, w, nash: NashSolution) -> float:
    """D_i^2 J_i(h; v) (w, w) at the equilibrium.

    Sensitivity phi runs forward from the source w chi_i; the second-order
    adjoint eta runs backward with source alpha_i chi_d phi - F''(y) phi p^i.
    Returns int int_{omega_i} eta_1 w + mu_i int int_{omega_i} rho_*^2 w^2.
    """
    m, n = problem.time.m, problem.space.n
    chi = problem.follower_masks[i].indicator
    w = chi * np.asarray(w, float)
    if nash.frozen:
        pot, d, curv = nash.coeffs.b, nash.coeffs.d, np.zeros((2, m, n))
    else:
        pot, d, curv = _adjoint_potentials(problem, nash.y, None)
    src = np.zeros((2, m, n))
    src[0] = w
    phi = march_forward(problem, pot, d, src, np.zeros((2, n)))
    ph = forward_samples(phi)
    c = problem.cost
    eta_src = c.alphas[i] * problem.omega_d.indicator * ph - curv * ph * backward_samples(nash.p[i])
    eta = march_backward(problem, pot, d, eta_src, np.zeros((2, n)))
    return qinner(problem, backward_samples(eta[0]), w) + c.mus[i] * qinner(
        problem, problem.rho_star[:, None] ** 2 * w, w
    )


def random_direction(problem, i, rng, modes=3) -> np.ndarray:
    """Smooth random field supported on omega_i x (0, T)."""
    mask = problem.follower_masks[i]
    lo, hi = mask.interval
    t = problem.time.midpoints / problem.time.T
    xs = np.clip((problem.space.nodes - lo) / (hi - lo), 0.0, 1.0)
    k = np.arange(1, modes + 1)
    T_basis = np.cos(np.pi * np.outer(t, k - 1))
    X_basis = np.sin(np.pi * np.outer(xs, k))
    coef = rng.standard_normal((modes, modes)) / np.outer(k, k)
    return (T_basis @ coef @ X_basis.T) * mask.indicator


@dataclass
class ConvexityEstimate:
    C_hat: float
    mu: float
    second_variations: np.ndarray
    norms_sq: np.ndarray  # rho_*-weighted ||w||^2

    @property
    def lower_bounds_hold(self) -> bool:
        """All samples satisfy D^2 J >= (mu - C_hat) ||w||^2 (up to round-off)."""
        lhs = self.second_variations
        rhs = (self.mu - self.C_hat) * self.norms_sq
        return bool(np.all(lhs >= rhs - 1e-12 * np.abs(rhs).max()))


def convexity_threshold(problem, i, nash: NashSolution, trials=50, seed=0) -> ConvexityEstimate:
    """C_hat = max over random w of mu_i - D^2 J_i(w, w) / ||w||^2_{rho_*}."""
    mu = problem.cost.mus[i]
    d2, nrm = [], []
    for trial in range(trials):
        w = random_direction(problem, i, trial_rng(seed, trial))
        d2.append(second_variation(problem, i, w, nash))
        nrm.append(rho_weighted_norm(problem, w) ** 2)
    d2, nrm = np.array(d2), np.array(nrm)
    return ConvexityEstimate(float(np.max(mu - d2 / nrm)), mu, d2, nrm)
