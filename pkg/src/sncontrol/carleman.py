"""Carleman weights, the weighted functionals I and K, and numerical probes
of the Hardy-Poincare, Caccioppoli and observability inequalities.

Weights are sampled at the interval midpoints of the time grid (never at
t = 0 or t = T, where Theta blows up).  Probes only report empirical
constants; the inequalities themselves are not proved here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .errors import NumericError, ParameterError
from .grid import DegeneracyCoefficient, SpaceGrid, SubdomainMask, TimeGrid, mask_from_interval
from .pde import CoupledSystem, backward_samples, forward_samples

# ---------------------------------------------------------------------------
# sigma
# ---------------------------------------------------------------------------


def _exp_moments(beta, x):
    """(int_0^x e^{bt} dt, int_0^x t e^{bt} dt), stable for small beta."""
    x = np.asarray(x, dtype=float)
    if abs(beta) < 1e-6:
        e0 = x + beta * x**2 / 2 + beta**2 * x**3 / 6
        e1 = x**2 / 2 + beta * x**3 / 3 + beta**2 * x**4 / 8
        return e0, e1
    e0 = np.expm1(beta * x) / beta
    e1 = (x * np.exp(beta * x) - e0) / beta
    return e0, e1


@dataclass(frozen=True)
class SigmaProfile:
    """sigma(x) = scale * 2 * int_0^x (x0 - t) e^{beta t} dt.

    beta is fixed by sigma(1) = 0, so sigma > 0 on (0, 1) and its only
    critical point is x0.
    """

    x0: float
    beta: float
    scale: float
    o0: SubdomainMask

    def __call__(self, x):
        e0, e1 = _exp_moments(self.beta, x)
        return self.scale * 2.0 * (self.x0 * e0 - e1)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        return self.scale * 2.0 * (self.x0 - x) * np.exp(self.beta * x)

    @property
    def sup(self) -> float:
        return float(self(self.x0))

    @property
    def critical_points(self) -> tuple:
        return (self.x0,)

    def samples(self, grid: SpaceGrid):
        return self(grid.nodes), self.derivative(grid.nodes)


def build_sigma(grid: SpaceGrid, o0: SubdomainMask, center: float | None = None,
                peak: float | None = None) -> SigmaProfile:
    """Profile whose only critical point sits inside the open set ``o0``.

    ``center`` defaults to the midpoint of ``o0``; ``peak`` rescales so that
    max sigma equals ``peak``.
    """
    if o0.interval is None:
        raise ParameterError("O_0 must be given as an interval")
    lo, hi = o0.interval
    if not 0.0 < lo < hi < 1.0:
        raise ParameterError(f"O_0 = {o0.interval} must be strictly interior")
    x0 = 0.5 * (lo + hi) if center is None else float(center)
    if not lo < x0 < hi:
        raise ParameterError(f"critical point {x0} not inside O_0 = {o0.interval}")

    def end_value(beta):
        e0, e1 = _exp_moments(beta, 1.0)
        return float(x0 * e0 - e1)

    beta = 0.0 if x0 == 0.5 else brentq(end_value, -200.0, 200.0, xtol=1e-15, rtol=1e-15)
    prof = SigmaProfile(x0, beta, 1.0, o0)
    if peak is not None:
        prof = replace(prof, scale=peak / prof.sup)

    vals, der = prof.samples(grid)
    if np.any(vals <= 0.0):
        raise ParameterError("sigma is not positive at every interior node")
    outside = ~o0.inside
    if np.any(der[outside] == 0.0):
        bad = grid.nodes[outside][der[outside] == 0.0]
        raise ParameterError(f"sigma_x vanishes outside O_0 at x = {bad}")
    sign_change = np.nonzero(np.diff(np.sign(der)))[0]
    x = grid.nodes
    for j in sign_change:
        near = o0.inside[j] or o0.inside[j + 1] or (x[j] < x0 < x[j + 1])
        if not near:
            raise ParameterError(
                f"sigma_x changes sign between x = {grid.nodes[j]} and {grid.nodes[j + 1]}, outside O_0"
            )
    return prof


# ---------------------------------------------------------------------------
# parameters and weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CarlemanParams:
    r: float
    dbar: float
    lam: float
    s: float
    tau: float
    sigma_sup: float
    lower: float
    upper: float

    def with_s(self, s: float) -> "CarlemanParams":
        return replace(self, s=float(s))


def lambda_interval(tau: float, sigma_sup: float, r: float, dbar: float, a1: float = 1.0):
    e1 = math.exp(r * sigma_sup)
    e2 = math.exp(2.0 * r * sigma_sup)
    lower = a1 * (2.0 - tau) * (e2 - 1.0) / (dbar * a1 * (2.0 - tau) - 1.0)
    upper = 4.0 * (e2 - e1) / (3.0 * dbar)
    return lower, upper


def choose_parameters(a: DegeneracyCoefficient, sigma: SigmaProfile, T: float, s: float = 1.0) -> CarlemanParams:
    """r and dbar at their lower admissible values, lambda mid-interval."""
    if not a.tau < 1.0:
        raise ParameterError("need tau < 1")
    a1 = float(a(1.0))
    sup = sigma.sup
    r = 4.0 * math.log(2.0) / sup
    dbar = 5.0 / (a1 * (2.0 - a.tau))
    while not dbar * a1 * (2.0 - a.tau) > 1.0:
        dbar *= 2.0
    lower, upper = lambda_interval(a.tau, sup, r, dbar, a1)
    if lower > upper:
        raise ParameterError(f"lambda interval [{lower}, {upper}] is empty")
    return CarlemanParams(r, dbar, 0.5 * (lower + upper), float(s), a.tau, sup, lower, upper)


def theta(t, T):
    t = np.asarray(t, dtype=float)
    return 1.0 / (t * (T - t)) ** 4


def delta(x, params: CarlemanParams, a: DegeneracyCoefficient):
    return params.lam * (a.x_over_a_integral(x) - params.dbar)


@dataclass(frozen=True)
class WeightBundle:
    t: np.ndarray            # (m,) midpoints
    Theta: np.ndarray        # (m,)
    delta: np.ndarray        # (N,)
    Psi: np.ndarray          # (N,)
    phi: np.ndarray          # (m, N)
    eta: np.ndarray          # (m, N)
    Phi: np.ndarray          # (m, N)
    phi_tilde: np.ndarray    # (m, N)
    Theta_tilde: np.ndarray  # (m,)
    phi_star: np.ndarray     # (m,)
    phi_hat: np.ndarray      # (m,)
    rho_star: np.ndarray     # (m,)
    kappa: np.ndarray        # (m,)
    params: CarlemanParams
    T: float

    @property
    def s(self) -> float:
        return self.params.s


def _weight_span(params, a, sigma, space, time):
    """max phi - min phi over midpoints x padded nodes."""
    x = space.padded
    th = theta(time.midpoints, time.T)
    dl = delta(x, params, a)
    vals = np.outer(th, dl)
    return float(vals.max() - vals.min())


def calibrate_s(params, a, sigma, space: SpaceGrid, time: TimeGrid, dynamic_range: float = 1e12) -> float:
    """Largest power of two s with exp(2 s (max phi - min phi)) < dynamic_range."""
    span = _weight_span(params, a, sigma, space, time)
    s_max = math.log(dynamic_range) / (2.0 * span)
    k = math.floor(math.log2(s_max))
    s = 2.0**k
    if s >= s_max:
        s /= 2.0
    return s


def check_weight_inequalities(params: CarlemanParams, a, sigma, space: SpaceGrid, rtol: float = 1e-12):
    """Spatial profiles behind (4/3)Phi <= phi <= Phi, 2 Phi <= phi, delta < 0.

    Theta > 0 factors out, so the checks reduce to delta versus Psi on the
    padded grid.  Raises ParameterError naming the worst node.
    """
    x = space.padded
    dl = delta(x, params, a)
    ps = np.exp(params.r * sigma(x)) - math.exp(2.0 * params.r * params.sigma_sup)
    tol = rtol * np.abs(ps).max()
    checks = {
        "delta < 0": -dl,
        "phi <= Phi": ps - dl + tol,
        "(4/3) Phi <= phi": dl - 4.0 / 3.0 * ps + tol,
        "2 Phi <= phi": dl - 2.0 * ps + tol,
        "4 Phi - 3 phi <= 0": 3.0 * dl - 4.0 * ps + tol,
    }
    for name, margin in checks.items():
        if np.any(margin <= 0.0) if name == "delta < 0" else np.any(margin < 0.0):
            j = int(np.argmin(margin))
            raise ParameterError(f"weight inequality {name} fails at x = {x[j]:.6g} (margin {margin[j]:.3e})")
    return dl, ps


def build_weights(params: CarlemanParams, space: SpaceGrid, time: TimeGrid, a: DegeneracyCoefficient,
                  sigma: SigmaProfile) -> WeightBundle:
    check_weight_inequalities(params, a, sigma, space)
    T, s = time.T, params.s
    t = time.midpoints
    x = space.nodes
    th = theta(t, T)
    dl = delta(x, params, a)
    ers = np.exp(params.r * sigma(x))
    ps = ers - math.exp(2.0 * params.r * params.sigma_sup)
    phi = np.outer(th, dl)
    eta = np.outer(th, ers)
    Phi = np.outer(th, ps)
    th_half = float(theta(0.5 * T, T))
    th_tilde = np.where(t <= 0.5 * T, th_half, th)
    phi_tilde = np.outer(th_tilde, dl)
    delta_min = float(delta(0.0, params, a))  # delta is increasing, min at x = 0
    phi_star = th * delta_min
    phi_hat = th_tilde * delta_min
    with np.errstate(over="ignore"):  # overflow is reported below
        rho_star = np.exp(-s * phi_star / 2.0)
    kappa = np.exp(s * phi_hat)
    bundle = WeightBundle(t, th, dl, ps, phi, eta, Phi, phi_tilde, th_tilde, phi_star, phi_hat,
                          rho_star, kappa, params, T)
    for name in ("phi", "eta", "Phi", "rho_star", "kappa"):
        if not np.all(np.isfinite(getattr(bundle, name))):
            raise NumericError(f"weight {name} is not finite; reduce s")
    return bundle


# ---------------------------------------------------------------------------
# weighted functionals
# ---------------------------------------------------------------------------


def _derivatives(z, space: SpaceGrid, time: TimeGrid, L):
    """Midpoint values, time derivative, (a z_x)_x and z_x for a node trajectory."""
    z = np.asarray(z, dtype=float)
    zm = 0.5 * (z[1:] + z[:-1])
    zt = np.diff(z, axis=0) / time.dt
    div = -(L @ zm.T).T
    padded = np.pad(zm, ((0, 0), (1, 1)))
    zx = np.gradient(padded, space.padded, axis=1)[:, 1:-1]
    return zm, zt, div, zx


def _integrate(integrand, space, time, mask=None):
    w = space.weights if mask is None else space.weights * mask
    return float(time.dt * np.sum(integrand * w))


def functional_I_terms(z, bundle: WeightBundle, a: DegeneracyCoefficient, space, time, L) -> dict:
    s = bundle.s
    th = bundle.Theta[:, None]
    e2 = np.exp(2.0 * s * bundle.phi)
    x = space.nodes
    zm, zt, div, zx = _derivatives(z, space, time, L)
    terms = {
        "time": _integrate(zt**2 * e2 / (s * th), space, time),
        "diffusion": _integrate(div**2 * e2 / (s * th), space, time),
        "zero_order": _integrate(s**3 * th**3 * (x**2 / a(x)) * zm**2 * e2, space, time),
        "gradient": _integrate(s * th * a(x) * zx**2 * e2, space, time),
    }
    for name, val in terms.items():
        if not math.isfinite(val):
            raise NumericError(f"I functional term {name!r} is not finite")
    return terms


def functional_I(z, bundle, a, space, time, L) -> float:
    """Weighted functional with Theta, phi weights over (0, T) x (0, 1)."""
    return sum(functional_I_terms(z, bundle, a, space, time, L).values())


def functional_K(z, bundle: WeightBundle, space, time, L, interval) -> float:
    """Same structure as I with eta, Phi weights over (0, T) x (b1, b2)."""
    b1, b2 = interval
    if not b1 > 0.0:
        raise ValueError("interval for K must avoid the degenerate point x = 0")
    mask = mask_from_interval(space, interval, "K").indicator
    s = bundle.s
    eta = bundle.eta
    e2 = np.exp(2.0 * s * bundle.Phi)
    zm, zt, div, zx = _derivatives(z, space, time, L)
    integrand = (zt**2 + div**2) * e2 / (s * eta) + s**3 * eta**3 * zm**2 * e2 + s * eta * zx**2 * e2
    val = _integrate(integrand, space, time, mask)
    if not math.isfinite(val):
        raise NumericError("K functional is not finite")
    return val


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Per-trial generator, independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trial)]))


def smooth_random_profile(x, rng, modes: int = 6):
    """Random sine series sum_k c_k sin(k pi x) / k vanishing at 0 and 1."""
    k = np.arange(1, modes + 1)
    c = rng.standard_normal(modes) / k
    return np.sin(np.pi * np.outer(x, k)) @ c


def hardy_ratio(z_padded, a: DegeneracyCoefficient, space: SpaceGrid) -> float:
    """[sum a/x^2 z^2 W] / [sum a_{j+1/2} |dz/h|^2 h] for z on the padded grid, z(0) = 0."""
    z = np.asarray(z_padded, dtype=float)
    x = space.nodes
    num = np.sum(a(x) / x**2 * z[1:-1] ** 2 * space.weights)
    h = space.spacings
    den = np.sum(a(space.half_nodes) * np.diff(z) ** 2 / h)
    return float(num / den)


@dataclass
class HardyResult:
    worst: float
    ratios: np.ndarray
    bound: float

    @property
    def within_bound(self) -> bool:
        return self.worst <= 1.1 * self.bound


def probe_hardy(a: DegeneracyCoefficient, space: SpaceGrid, trials: int = 200, seed: int = 0) -> HardyResult:
    """Worst observed Hardy-Poincare ratio over random smooth z with z(0) = 0."""
    theta_ = a.alpha
    if not 0.0 < theta_ < 1.0:
        raise ValueError("Hardy probe needs 0 < alpha < 1")
    bound = 4.0 / (1.0 - theta_) ** 2
    x = space.padded
    ratios = []
    trial = 0
    while len(ratios) < trials:
        rng = trial_rng(seed, trial)
        trial += 1
        k = np.arange(1, 7)
        z = np.sin((k - 0.5) * np.pi * x[:, None]) @ (rng.standard_normal(6) / k)
        p = rng.uniform(1.0, 3.0, size=2)
        z = z + rng.standard_normal() * x ** p[0] + rng.standard_normal() * x ** p[1]
        h = space.spacings
        if np.sum(a(space.half_nodes) * np.diff(z) ** 2 / h) < 1e-14:
            continue  # degenerate draw, resample
        ratios.append(hardy_ratio(z, a, space))
    ratios = np.array(ratios)
    return HardyResult(float(ratios.max()), ratios, bound)


@dataclass
class ProbeResult:
    rows: list  # dicts: trial, seed, lhs, rhs, ratio (+ extras)
    skipped: int
    s: float = float("nan")

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r["ratio"] for r in self.rows])

    @property
    def worst(self) -> float:
        return float(self.ratios.max()) if self.rows else float("nan")

    @property
    def median(self) -> float:
        return float(np.median(self.ratios)) if self.rows else float("nan")


def _random_terminal(problem, rng, modes=6):
    x = problem.space.nodes
    return np.stack([smooth_random_profile(x, rng, modes) for _ in range(2)])


def _system(problem, coeffs):
    return coeffs if isinstance(coeffs, CoupledSystem) else CoupledSystem(problem, coeffs)


def carleman_regime_s(bundle: WeightBundle, level: float = 4.0) -> float:
    """Smallest s with s * Theta * |delta| >= level everywhere.

    The dynamic-range calibration keeps rho_star representable, which pushes
    the peak of s^2 Theta^2 e^{2 s phi} into the last time step.  Probes that
    only use e^{2 s phi} <= 1 can afford this larger s, where the weight
    peaks inside (0, T) and the adjoint has left the terminal layer.
    """
    return max(bundle.s, level / (float(bundle.Theta.min()) * float(np.abs(bundle.delta).min())))


def probe_caccioppoli(problem, coeffs, bundle: WeightBundle, o_prime, o1, trials: int = 50, seed: int = 0,
                      method: str = "monolithic", terminal_fn=None, s: float | None = None) -> ProbeResult:
    """Empirical constant of the local gradient-by-value estimate.

    ``o_prime`` and ``o1`` are intervals with O' compactly inside O_1.  The
    default s is ``carleman_regime_s(bundle)``.
    """
    system = _system(problem, coeffs)
    space, time, L = problem.space, problem.time, problem.L
    inner = mask_from_interval(space, o_prime, "O'").indicator
    outer = mask_from_interval(space, o1, "O1").indicator
    s = carleman_regime_s(bundle) if s is None else float(s)
    e2 = np.exp(2.0 * s * bundle.phi)
    th = bundle.Theta[:, None]
    rows, skipped = [], 0
    for trial in range(trials):
        rng = trial_rng(seed, trial)
        rho_T = _random_terminal(problem, rng) if terminal_fn is None else terminal_fn(trial, rng)
        if not np.any(rho_T):
            skipped += 1
            continue
        sol = system.adjoint(rho_T, method=method)
        fields = list(sol.rho) + list(sol.varrho(problem.cost.alphas))
        grad_sq = np.zeros_like(e2)
        val_sq = np.zeros_like(e2)
        for f in fields:
            zm, _, _, zx = _derivatives(f, space, time, L)
            grad_sq += zx**2
            val_sq += zm**2
        num = _integrate(grad_sq * e2, space, time, inner)
        den = _integrate(s**2 * th**2 * val_sq * e2, space, time, outer)
        if den <= 0.0:
            skipped += 1
            continue
        rows.append({"trial": trial, "seed": seed, "lhs": num, "rhs": den, "ratio": num / den})
    return ProbeResult(rows, skipped, s)


def observability_terms(problem, sol, bundle: WeightBundle):
    """(lhs, rhs, psi part) of the observability inequality for one solve."""
    space, time = problem.space, problem.time
    W = space.weights
    rho0 = float(np.sum(W * sol.rho[:, 0] ** 2))
    k2 = bundle.kappa[:, None] ** 2
    psi_part = sum(float(time.dt * np.sum(W * k2 * forward_samples(sol.psi[i][j]) ** 2))
                   for i in range(2) for j in range(2))
    rhs = float(time.dt * np.sum(W * problem.omega.indicator * backward_samples(sol.rho[0]) ** 2))
    return rho0 + psi_part, rhs, psi_part


def probe_observability(problem, coeffs, bundle: WeightBundle, trials: int = 20, seed: int = 0,
                        method: str = "monolithic", terminal_fn=None) -> ProbeResult:
    """Empirical constant of the observability inequality with kappa weights."""
    system = _system(problem, coeffs)
    rows, skipped = [], 0
    for trial in range(trials):
        rng = trial_rng(seed, trial)
        rho_T = _random_terminal(problem, rng) if terminal_fn is None else terminal_fn(trial, rng)
        if not np.any(rho_T):
            skipped += 1
            continue
        sol = system.adjoint(rho_T, method=method)
        lhs, rhs, psi_part = observability_terms(problem, sol, bundle)
        if rhs <= 0.0:
            skipped += 1
            continue
        rows.append({"trial": trial, "seed": seed, "lhs": lhs, "rhs": rhs, "ratio": lhs / rhs,
                     "psi_part": psi_part})
    return ProbeResult(rows, skipped, bundle.s)


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log ys against log xs."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])
