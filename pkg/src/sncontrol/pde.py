"""Time stepping for the coupled degenerate system and its adjoints.

Implicit Euler on the uniform time grid.  Interval ``k`` (``k = 0..m-1``)
joins nodes ``k`` and ``k + 1``; a forward field uses the data of interval
``k`` to produce node ``k + 1``, a backward field produces node ``k`` from
node ``k + 1``.  With this pairing the backward march is the exact transpose
(for the W-weighted product) of the forward march, so

    <Y^m, P^m> + dt sum_k <Y^{k+1}, G_k> = <Y^0, P^0> + dt sum_k <F_k, P^k>

holds to round-off for any data.  Coupled forward-backward systems (the
follower optimality system and the leader's adjoint system) are solved either
monolithically with a sparse LU of the whole space-time system or by damped
Picard sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from .errors import IterationError, NumericError, SolverError
from .grid import operator_bands

# ---------------------------------------------------------------------------
# nonlinearities and frozen coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Nonlinearity:
    """F with F(0) = 0 and |F'| + |F''| <= M."""

    name: str
    F: Callable
    dF: Callable
    d2F: Callable
    M: float
    linear: bool = False

    def check(self, r=None, rtol=1e-12):
        r = np.linspace(-10.0, 10.0, 2001) if r is None else np.asarray(r, dtype=float)
        if abs(float(self.F(np.zeros(1))[0])) > 0.0:
            raise ValueError(f"{self.name}: F(0) != 0")
        bound = np.abs(self.dF(r)) + np.abs(self.d2F(r))
        if np.any(bound > self.M * (1 + rtol)):
            raise ValueError(f"{self.name}: |F'| + |F''| exceeds M = {self.M}")


def zero_nonlinearity() -> Nonlinearity:
    z = np.zeros_like
    return Nonlinearity("zero", z, z, z, 0.0, linear=True)


def linear_nonlinearity(k: float) -> Nonlinearity:
    return Nonlinearity(
        "linear", lambda r: k * np.asarray(r, float), lambda r: np.full_like(np.asarray(r, float), k),
        lambda r: np.zeros_like(np.asarray(r, float)), abs(k), linear=True,
    )


def sine_nonlinearity(M: float) -> Nonlinearity:
    """F(r) = (M / sqrt 2) sin r, using |cos| + |sin| <= sqrt 2."""
    c = M / math.sqrt(2.0)
    return Nonlinearity("sine", lambda r: c * np.sin(r), lambda r: c * np.cos(r), lambda r: -c * np.sin(r), M)


def _tanh_peak() -> float:
    # max over u = tanh r in [0, 1) of (1 - u^2)(1 + 2u); attained at 3u^2 + u - 1 = 0
    u = (math.sqrt(13.0) - 1.0) / 6.0
    return (1.0 - u * u) * (1.0 + 2.0 * u)


def tanh_nonlinearity(M: float) -> Nonlinearity:
    c = M / _tanh_peak()

    def dF(r):
        return c / np.cosh(r) ** 2

    def d2F(r):
        return -2.0 * c * np.tanh(r) / np.cosh(r) ** 2

    return Nonlinearity("tanh", lambda r: c * np.tanh(r), dF, d2F, M)


def make_nonlinearity(kind: str, M: float = 0.0) -> Nonlinearity:
    kinds = {
        "zero": lambda: zero_nonlinearity(),
        "linear": lambda: linear_nonlinearity(M),
        "sine": lambda: sine_nonlinearity(M),
        "tanh": lambda: tanh_nonlinearity(M),
    }
    if kind not in kinds:
        raise ValueError(f"unknown nonlinearity {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind]()


@dataclass(frozen=True)
class LinearizedCoefficients:
    """Frozen potentials for one outer iteration.

    ``b`` (2, m, N) enters the state equations and the leader adjoint ``rho``;
    ``c`` (2, m, N) enters the follower adjoints ``p`` and the ``psi`` systems;
    ``d`` (m, N) is the coupling of the second component to the first.
    """

    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        for name in ("b", "c", "d"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"coefficient {name} has non-finite entries")
            object.__setattr__(self, name, arr)

    def sup_norms(self) -> dict:
        return {
            "b1": float(np.abs(self.b[0]).max()), "b2": float(np.abs(self.b[1]).max()),
            "c1": float(np.abs(self.c[0]).max()), "c2": float(np.abs(self.c[1]).max()),
            "d": float(np.abs(self.d).max()),
        }


def constant_coefficients(problem, b=0.0, c=None) -> LinearizedCoefficients:
    """Spatially and temporally constant potentials; ``c`` defaults to ``b``."""
    shape = (2, problem.time.m, problem.space.n)
    b_arr = np.broadcast_to(np.asarray(b, float).reshape(-1, 1, 1) if np.ndim(b) else b, shape).copy()
    c = b if c is None else c
    c_arr = np.broadcast_to(np.asarray(c, float).reshape(-1, 1, 1) if np.ndim(c) else c, shape).copy()
    return LinearizedCoefficients(b_arr, c_arr, problem.d)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def freeze_coefficients(w, F, d) -> LinearizedCoefficients:
    """Potentials b_i = int_0^1 F_i'(sigma w_i) dsigma and c_i = F_i'(w_i).

    ``w`` holds interval samples (2, m, N) of a state pair; ``b`` uses
    16-point Gauss-Legendre quadrature in sigma so that b_i w_i = F_i(w_i)
    (to 1e-12 for the tanh nonlinearity while |w| <= 3.5).
    """
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise NumericError("cannot freeze coefficients at a non-finite state")
    sig = 0.5 * (_GL_NODES + 1.0)
    wts = 0.5 * _GL_WEIGHTS
    b = np.empty_like(w)
    c = np.empty_like(w)
    for j in range(2):
        b[j] = sum(wq * F[j].dF(sq * w[j]) for sq, wq in zip(sig, wts))
        c[j] = F[j].dF(w[j])
    coeffs = LinearizedCoefficients(b, c, d)
    for j in range(2):
        bound = F[j].M * (1.0 + 1e-12)
        if np.abs(b[j]).max() > bound or np.abs(c[j]).max() > bound:
            raise NumericError(f"frozen potential {j + 1} exceeds the bound M = {F[j].M}")
    return coeffs


# ---------------------------------------------------------------------------
# single sweeps
# ---------------------------------------------------------------------------


class _Stepper:
    """Solves (I + dt (L + diag(q))) x = rhs for a tridiagonal L."""

    def __init__(self, L, dt):
        lower, diag, upper = operator_bands(L)
        self.n = diag.size
        self.dt = dt
        self._ab = np.zeros((3, self.n))
        self._ab[0, 1:] = dt * upper
        self._ab[2, :-1] = dt * lower
        self._diag = diag
        self._L = L

    def solve(self, q, rhs, scale=1.0):
        ab = self._ab.copy()
        if scale != 1.0:
            ab[0] *= scale
            ab[2] *= scale
        ab[1] = 1.0 + scale * self.dt * (self._diag + q)
        try:
            x = solve_banded((1, 1), ab, rhs, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"tridiagonal solve failed: {exc}") from exc
        return x

    def apply(self, q, x, scale=1.0):
        """(I + scale dt (L + diag q)) x."""
        return x + scale * self.dt * (self._L @ x + q * x)


def _stepper(problem) -> _Stepper:
    cache = problem.__dict__.setdefault("_cache", {})
    key = ("stepper",)
    if key not in cache:
        cache[key] = _Stepper(problem.L, problem.time.dt)
    return cache[key]


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} became non-finite")
    return arr


def march_forward(problem, pot, d, source, y0, scheme="euler"):
    """Linear forward sweep; returns (2, m + 1, N).

    pot: (2, m, N) potentials, d: (m, N) coupling, source: (2, m, N).
    """
    st = _stepper(problem)
    m, dt = problem.time.m, problem.time.dt
    Y = np.zeros((2, m + 1, problem.space.n))
    Y[:, 0] = y0
    for k in range(m):
        if scheme == "euler":
            Y[0, k + 1] = st.solve(pot[0, k], Y[0, k] + dt * source[0, k])
            Y[1, k + 1] = st.solve(pot[1, k], Y[1, k] + dt * (source[1, k] - d[k] * Y[0, k + 1]))
        elif scheme == "cn":
            r1 = st.apply(pot[0, k], Y[0, k], scale=-0.5) + dt * source[0, k]
            Y[0, k + 1] = st.solve(pot[0, k], r1, scale=0.5)
            r2 = (st.apply(pot[1, k], Y[1, k], scale=-0.5) + dt * source[1, k]
                  - 0.5 * dt * d[k] * (Y[0, k] + Y[0, k + 1]))
            Y[1, k + 1] = st.solve(pot[1, k], r2, scale=0.5)
        else:
            raise ValueError(f"unknown time scheme {scheme!r}")
    return _check_finite(Y, "forward solution")


def march_backward(problem, pot, d, source, terminal):
    """Linear backward sweep (transpose of :func:`march_forward`); (2, m + 1, N).

    The first component carries ``+d * p2``, so the second is solved first.
    ``source[:, k]`` pairs with forward node ``k + 1``.
    """
    st = _stepper(problem)
    m, dt = problem.time.m, problem.time.dt
    P = np.zeros((2, m + 1, problem.space.n))
    P[:, m] = terminal
    for k in range(m - 1, -1, -1):
        P[1, k] = st.solve(pot[1, k], P[1, k + 1] + dt * source[1, k])
        P[0, k] = st.solve(pot[0, k], P[0, k + 1] + dt * (source[0, k] - d[k] * P[1, k]))
    return _check_finite(P, "backward solution")


def _newton_step(st, F, rhs, guess, tol=1e-14, max_iter=50):
    """Solve x + dt (L x + F(x)) = rhs by Newton with tridiagonal Jacobians."""
    x = guess.copy()
    for _ in range(max_iter):
        res = st.apply(0.0, x) + st.dt * F.F(x) - rhs
        dx = st.solve(F.dF(x), res)
        x -= dx
        if np.max(np.abs(dx)) <= tol * (1.0 + np.max(np.abs(x))):
            return x
    raise IterationError("Newton sub-iteration did not converge")


def march_forward_nonlinear(problem, source, y0, method="newton"):
    """Forward sweep with the nonlinearities of ``problem``.

    ``newton`` solves the fully implicit step; ``semi-implicit`` evaluates
    F at the previous time level.
    """
    st = _stepper(problem)
    m, dt = problem.time.m, problem.time.dt
    F1, F2 = problem.F
    d = problem.d
    zero = np.zeros(problem.space.n)
    Y = np.zeros((2, m + 1, problem.space.n))
    Y[:, 0] = y0
    for k in range(m):
        if method == "newton":
            Y[0, k + 1] = _newton_step(st, F1, Y[0, k] + dt * source[0, k], Y[0, k])
            rhs2 = Y[1, k] + dt * (source[1, k] - d[k] * Y[0, k + 1])
            Y[1, k + 1] = _newton_step(st, F2, rhs2, Y[1, k])
        elif method == "semi-implicit":
            Y[0, k + 1] = st.solve(zero, Y[0, k] + dt * (source[0, k] - F1.F(Y[0, k])))
            rhs2 = Y[1, k] + dt * (source[1, k] - F2.F(Y[1, k]) - d[k] * Y[0, k + 1])
            Y[1, k + 1] = st.solve(zero, rhs2)
        else:
            raise ValueError(f"unknown nonlinear method {method!r}")
    return _check_finite(Y, "nonlinear forward solution")


def forward_residual(problem, Y, source, pot=None):
    """Implicit-Euler residual of the state equations, in PDE units.

    With ``pot`` None the true nonlinearities are used.  Returns (2, m, N).
    """
    dt = problem.time.dt
    L = problem.L
    Yn = Y[:, 1:]
    dY = (Y[:, 1:] - Y[:, :-1]) / dt
    LY = np.stack([(L @ Yn[j].T).T for j in range(2)])
    if pot is None:
        react = np.stack([problem.F[j].F(Yn[j]) for j in range(2)])
    else:
        react = pot * Yn
    res = dY + LY + react - source
    res[1] += problem.d * Yn[0]
    return res


def backward_residual(problem, P, source, pot):
    dt = problem.time.dt
    L = problem.L
    Pk = P[:, :-1]
    dP = (P[:, :-1] - P[:, 1:]) / dt
    LP = np.stack([(L @ Pk[j].T).T for j in range(2)])
    res = dP + LP + pot * Pk - source
    res[0] += problem.d * Pk[1]
    return res


# ---------------------------------------------------------------------------
# public single-system solvers
# ---------------------------------------------------------------------------


def control_source(problem, h=None, v1=None, v2=None):
    """Forward source (2, m, N) from leader and follower controls."""
    m, n = problem.time.m, problem.space.n
    src = np.zeros((2, m, n))
    for ctrl, mask in ((h, problem.omega), (v1, problem.omega1), (v2, problem.omega2)):
        if ctrl is not None:
            src[0] += np.asarray(ctrl, float) * mask.indicator
    return src


def solve_forward(problem, h=None, v1=None, v2=None, coeffs=None, y0=None,
                  nonlinear="newton", scheme="euler", source=None):
    """State trajectory (2, m + 1, N) for the given controls.

    With ``coeffs`` the linearized system (potentials ``coeffs.b``) is
    solved; otherwise the nonlinearities stored on ``problem``.
    """
    y0 = problem.y0 if y0 is None else np.asarray(y0, float)
    src = control_source(problem, h, v1, v2)
    if source is not None:
        src = src + source
    if coeffs is not None:
        return march_forward(problem, coeffs.b, coeffs.d, src, y0, scheme)
    if all(F.linear for F in problem.F) and scheme == "cn":
        pot = constant_coefficients(problem, [float(F.dF(np.zeros(1))[0]) for F in problem.F])
        return march_forward(problem, pot.b, problem.d, src, y0, scheme)
    return march_forward_nonlinear(problem, src, y0, nonlinear)


def solve_backward(problem, terminal, sources, pot, d=None):
    """Adjoint trajectory (2, m + 1, N) from terminal data at t = T."""
    d = problem.d if d is None else d
    return march_backward(problem, pot, d, np.asarray(sources, float), np.asarray(terminal, float))


def forward_samples(Y):
    """Interval samples of a forward trajectory: nodes 1..m."""
    return Y[..., 1:, :]


def backward_samples(P):
    """Interval samples of a backward trajectory: nodes 0..m-1."""
    return P[..., :-1, :]


# ---------------------------------------------------------------------------
# coupled forward-backward systems
# ---------------------------------------------------------------------------


@dataclass
class OptimalitySolution:
    y: np.ndarray  # (2, m + 1, N)
    p: np.ndarray  # (2 players, 2, m + 1, N)
    v: np.ndarray  # (2 players, m, N) follower controls
    method: str
    iterations: int = 0
    history: list = field(default_factory=list)


@dataclass
class AdjointSolution:
    rho: np.ndarray  # (2, m + 1, N), backward
    psi: np.ndarray  # (2 players, 2, m + 1, N), forward
    method: str
    iterations: int = 0
    history: list = field(default_factory=list)

    def varrho(self, alphas):
        return alphas[0] * self.psi[0] + alphas[1] * self.psi[1]


def _tri_coo(L, dt, q):
    """COO triplets of I + dt (L + diag q)."""
    n = q.size
    lower, diag, upper = operator_bands(L)
    i = np.arange(n)
    rows = np.concatenate([i, i[1:], i[:-1]])
    cols = np.concatenate([i, i[:-1], i[1:]])
    vals = np.concatenate([1.0 + dt * (diag + q), dt * lower, dt * upper])
    return rows, cols, vals


class CoupledSystem:
    """Linear Stackelberg-Nash machinery for one set of frozen coefficients.

    Two coupled problems share one structure: a primary pair running in one
    time direction and two secondary pairs (one per follower) running in the
    other.  ``optimality`` solves the follower system (state forward,
    follower adjoints backward); ``adjoint`` solves its transpose (leader
    adjoint backward, ``psi`` forward).  Monolithic factorizations are cached.
    """

    def __init__(self, problem, coeffs: LinearizedCoefficients):
        self.problem = problem
        self.coeffs = coeffs
        self._lu = {}

    # -- shared helpers ----------------------------------------------------

    @property
    def _shape(self):
        return self.problem.time.m, self.problem.space.n

    def follower_gain(self, i):
        """(m, N) array (1 / mu_i) rho_*^{-2} chi_{omega_i}."""
        pb = self.problem
        R = pb.rho_star ** -2.0
        return (R[:, None] / pb.cost.mus[i]) * pb.follower_masks[i].indicator[None, :]

    def tracking_gain(self, i):
        pb = self.problem
        return pb.cost.alphas[i] * pb.omega_d.indicator

    def follower_controls(self, p):
        """Controls -(1/mu_i) rho_*^{-2} p_1^i on omega_i, shape (2, m, N)."""
        return np.stack([-self.follower_gain(i) * backward_samples(p[i][0]) for i in range(2)])

    def _assemble(self, primary_forward: bool):
        pb = self.problem
        m, n = self._shape
        dt = pb.time.dt
        L = pb.L
        c = self.coeffs
        pot_primary, pot_secondary = c.b, c.c
        rows, cols, vals = [], [], []

        def idx(k, f):
            return (6 * k + f) * n

        def put(r0, c0, rr, cc, vv):
            rows.append(rr + r0)
            cols.append(cc + c0)
            vals.append(vv)

        ar = np.arange(n)
        tri = {}
        for k in range(m):
            for comp in range(2):
                tri[("p", k, comp)] = _tri_coo(L, dt, pot_primary[comp, k])
                tri[("s", k, comp)] = _tri_coo(L, dt, pot_secondary[comp, k])

        def add_pair(k, f1, kind, forward):
            dk = dt * c.d[k]
            r1, c1_, v1 = tri[(kind, k, 0)]
            r2, c2_, v2 = tri[(kind, k, 1)]
            put(idx(k, f1), idx(k, f1), r1, c1_, v1)
            put(idx(k, f1 + 1), idx(k, f1 + 1), r2, c2_, v2)
            if forward:
                put(idx(k, f1 + 1), idx(k, f1), ar, ar, dk)
                if k >= 1:
                    put(idx(k, f1), idx(k - 1, f1), ar, ar, -np.ones(n))
                    put(idx(k, f1 + 1), idx(k - 1, f1 + 1), ar, ar, -np.ones(n))
            else:
                put(idx(k, f1), idx(k, f1 + 1), ar, ar, dk)
                if k + 1 <= m - 1:
                    put(idx(k, f1), idx(k + 1, f1), ar, ar, -np.ones(n))
                    put(idx(k, f1 + 1), idx(k + 1, f1 + 1), ar, ar, -np.ones(n))

        gains = [self.follower_gain(i) for i in range(2)]
        tracks = [self.tracking_gain(i) for i in range(2)]
        for k in range(m):
            add_pair(k, 0, "p", primary_forward)
            for i in range(2):
                fs = 2 + 2 * i
                add_pair(k, fs, "s", not primary_forward)
                if primary_forward:
                    # state row <- follower adjoint; adjoint rows <- state
                    put(idx(k, 0), idx(k, fs), ar, ar, dt * gains[i][k])
                    for comp in range(2):
                        put(idx(k, fs + comp), idx(k, comp), ar, ar, -dt * tracks[i])
                else:
                    # leader adjoint rows <- psi; psi row <- leader adjoint
                    for comp in range(2):
                        put(idx(k, comp), idx(k, fs + comp), ar, ar, -dt * tracks[i])
                    put(idx(k, fs), idx(k, 0), ar, ar, dt * gains[i][k])
        size = 6 * m * n
        A = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
        ).tocsc()
        return A

    def matrix(self, which):
        key = ("A", which)
        if key not in self._lu:
            self._lu[key] = self._assemble(primary_forward=(which == "optimality"))
        return self._lu[key]

    def _factor(self, which):
        key = ("lu", which)
        if key not in self._lu:
            try:
                self._lu[key] = spla.splu(self.matrix(which))
            except RuntimeError as exc:
                raise SolverError(f"monolithic factorization failed: {exc}") from exc
        return self._lu[key]

    def _unpack(self, x):
        m, n = self._shape
        return x.reshape(m, 6, n)

    # -- follower optimality system ---------------------------------------

    def _targets(self, homogeneous):
        pb = self.problem
        if homogeneous:
            return np.zeros((2, 2) + self._shape)
        return pb.cost.targets

    def optimality(self, h=None, method="monolithic", homogeneous=False, damping=0.5,
                   tol=1e-10, max_iter=500, p_init=None):
        pb = self.problem
        m, n = self._shape
        h = np.zeros((m, n)) if h is None else np.asarray(h, float)
        y0 = np.zeros((2, n)) if homogeneous else pb.y0
        yd = self._targets(homogeneous)
        if method == "monolithic":
            return self._optimality_monolithic(h, y0, yd)
        if method == "picard":
            return self._optimality_picard(h, y0, yd, damping, tol, max_iter, p_init)
        raise ValueError(f"unknown coupled method {method!r}")

    def _optimality_monolithic(self, h, y0, yd):
        pb = self.problem
        m, n = self._shape
        dt = pb.time.dt
        rhs = np.zeros((m, 6, n))
        rhs[:, 0] = dt * h * pb.omega.indicator
        rhs[0, 0] += y0[0]
        rhs[0, 1] += y0[1]
        for i in range(2):
            for comp in range(2):
                rhs[:, 2 + 2 * i + comp] = -dt * self.tracking_gain(i) * yd[i, comp]
        x = self._unpack(self._factor("optimality").solve(rhs.ravel()))
        y = np.zeros((2, m + 1, n))
        y[:, 0] = y0
        y[:, 1:] = x[:, 0:2].transpose(1, 0, 2)
        p = np.zeros((2, 2, m + 1, n))
        for i in range(2):
            p[i, :, :-1] = x[:, 2 + 2 * i: 4 + 2 * i].transpose(1, 0, 2)
        _check_finite(y, "optimality state")
        return OptimalitySolution(y, p, self.follower_controls(p), "monolithic")

    def _optimality_picard(self, h, y0, yd, damping, tol, max_iter, p_init):
        pb = self.problem
        m, n = self._shape
        c = self.coeffs
        base = control_source(pb, h)
        p = np.zeros((2, 2, m + 1, n)) if p_init is None else np.array(p_init, float)
        history = []
        for it in range(1, max_iter + 1):
            src = base.copy()
            src[0] -= sum(self.follower_gain(i) * backward_samples(p[i][0]) for i in range(2))
            y = march_forward(pb, c.b, c.d, src, y0)
            p_new = np.stack([
                march_backward(pb, c.c, c.d, self.tracking_gain(i) * (forward_samples(y) - yd[i]),
                               np.zeros((2, n)))
                for i in range(2)
            ])
            change = float(np.sqrt(pb.time.dt * np.sum(pb.space.weights * (p_new - p) ** 2)))
            p = (1.0 - damping) * p + damping * p_new
            history.append(change)
            if change < tol:
                src = base.copy()
                src[0] -= sum(self.follower_gain(i) * backward_samples(p[i][0]) for i in range(2))
                y = march_forward(pb, c.b, c.d, src, y0)
                return OptimalitySolution(y, p, self.follower_controls(p), "picard", it, history)
        raise IterationError(f"Picard optimality sweep did not converge in {max_iter} iterations", history)

    def optimality_residuals(self, sol: OptimalitySolution, h=None, homogeneous=False):
        """Max-norm residual of each of the six equations (PDE units)."""
        pb = self.problem
        m, n = self._shape
        c = self.coeffs
        h = np.zeros((m, n)) if h is None else h
        yd = self._targets(homogeneous)
        src = control_source(pb, h)
        src[0] += sol.v[0] * pb.omega1.indicator + sol.v[1] * pb.omega2.indicator
        out = {}
        ry = forward_residual(pb, sol.y, src, c.b)
        out["y1"], out["y2"] = float(np.abs(ry[0]).max()), float(np.abs(ry[1]).max())
        for i in range(2):
            g = self.tracking_gain(i) * (forward_samples(sol.y) - yd[i])
            rp = backward_residual(pb, sol.p[i], g, c.c)
            out[f"p1^{i + 1}"] = float(np.abs(rp[0]).max())
            out[f"p2^{i + 1}"] = float(np.abs(rp[1]).max())
        return out

    # -- coupled adjoint (leader) system ----------------------------------

    def adjoint(self, rho_T, method="monolithic", damping=0.5, tol=1e-10, max_iter=500):
        rho_T = np.asarray(rho_T, float)
        if method == "monolithic":
            return self._adjoint_monolithic(rho_T)
        if method == "picard":
            return self._adjoint_picard(rho_T, damping, tol, max_iter)
        raise ValueError(f"unknown coupled method {method!r}")

    def _adjoint_monolithic(self, rho_T):
        m, n = self._shape
        rhs = np.zeros((m, 6, n))
        rhs[m - 1, 0] = rho_T[0]
        rhs[m - 1, 1] = rho_T[1]
        x = self._unpack(self._factor("adjoint").solve(rhs.ravel()))
        rho = np.zeros((2, m + 1, n))
        rho[:, m] = rho_T
        rho[:, :-1] = x[:, 0:2].transpose(1, 0, 2)
        psi = np.zeros((2, 2, m + 1, n))
        for i in range(2):
            psi[i, :, 1:] = x[:, 2 + 2 * i: 4 + 2 * i].transpose(1, 0, 2)
        _check_finite(rho, "leader adjoint")
        return AdjointSolution(rho, psi, "monolithic")

    def _psi_from_rho(self, rho):
        pb = self.problem
        m, n = self._shape
        c = self.coeffs
        out = []
        for i in range(2):
            src = np.zeros((2, m, n))
            src[0] = -self.follower_gain(i) * backward_samples(rho[0])
            out.append(march_forward(pb, c.c, c.d, src, np.zeros((2, n))))
        return np.stack(out)

    def _adjoint_picard(self, rho_T, damping, tol, max_iter):
        pb = self.problem
        m, n = self._shape
        c = self.coeffs
        psi = np.zeros((2, 2, m + 1, n))
        history = []
        for it in range(1, max_iter + 1):
            src = sum(self.tracking_gain(i) * forward_samples(psi[i]) for i in range(2))
            rho = march_backward(pb, c.b, c.d, src, rho_T)
            psi_new = self._psi_from_rho(rho)
            change = float(np.sqrt(pb.time.dt * np.sum(pb.space.weights * (psi_new - psi) ** 2)))
            psi = (1.0 - damping) * psi + damping * psi_new
            history.append(change)
            if change < tol:
                src = sum(self.tracking_gain(i) * forward_samples(psi[i]) for i in range(2))
                rho = march_backward(pb, c.b, c.d, src, rho_T)
                return AdjointSolution(rho, psi, "picard", it, history)
        raise IterationError(f"Picard adjoint sweep did not converge in {max_iter} iterations", history)

    def adjoint_residuals(self, sol: AdjointSolution):
        """Residuals of the leader adjoint pair, both psi systems and the
        aggregated varrho system."""
        pb = self.problem
        m, n = self._shape
        c = self.coeffs
        out = {}
        src = sum(self.tracking_gain(i) * forward_samples(sol.psi[i]) for i in range(2))
        r = backward_residual(pb, sol.rho, src, c.b)
        out["rho1"], out["rho2"] = float(np.abs(r[0]).max()), float(np.abs(r[1]).max())
        for i in range(2):
            s = np.zeros((2, m, n))
            s[0] = -self.follower_gain(i) * backward_samples(sol.rho[0])
            rp = forward_residual(pb, sol.psi[i], s, c.c)
            out[f"psi1^{i + 1}"] = float(np.abs(rp[0]).max())
            out[f"psi2^{i + 1}"] = float(np.abs(rp[1]).max())
        al = pb.cost.alphas
        s = np.zeros((2, m, n))
        s[0] = -sum(al[i] * self.follower_gain(i) for i in range(2)) * backward_samples(sol.rho[0])
        rv = forward_residual(pb, sol.varrho(al), s, c.c)
        out["varrho1"], out["varrho2"] = float(np.abs(rv[0]).max()), float(np.abs(rv[1]).max())
        return out


def solve_coupled_optimality(problem, coeffs, h=None, method="monolithic", **kw) -> OptimalitySolution:
    return CoupledSystem(problem, coeffs).optimality(h, method=method, **kw)


def solve_coupled_adjoint(problem, coeffs, rho_T, method="monolithic", **kw) -> AdjointSolution:
    return CoupledSystem(problem, coeffs).adjoint(rho_T, method=method, **kw)
