"""Discretization of (0, T) x (0, 1): grids, masks, quadrature and the
degenerate diffusion operator -(x^alpha u_x)_x in conservative flux form.

Conventions used throughout the package
---------------------------------------
* Spatial unknowns live on the ``N`` interior nodes; x = 0 and x = 1 carry
  homogeneous Dirichlet data and are never unknowns.
* State trajectories are stored on the ``m + 1`` time nodes ``t_0 .. t_m``.
  Controls, coefficients and weights are piecewise constant on the ``m``
  time intervals and sampled at interval midpoints, so singular time weights
  are never evaluated at t = 0 or t = T.
* The discrete L2(Omega) product is ``<u, v>_W = sum_j W_j u_j v_j`` with
  trapezoid weights ``W``; the operator is self-adjoint for that product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError


@dataclass(frozen=True)
class SpaceGrid:
    nodes: np.ndarray
    grading: float = 1.0

    def __post_init__(self):
        x = np.asarray(self.nodes, dtype=float)
        if x.ndim != 1 or x.size < 3:
            raise ConfigError("space grid needs at least 3 interior nodes", ["n"])
        if x[0] <= 0.0 or x[-1] >= 1.0 or np.any(np.diff(x) <= 0.0):
            raise ConfigError("interior nodes must be strictly increasing in (0, 1)", ["nodes"])
        object.__setattr__(self, "nodes", x)

    @property
    def n(self) -> int:
        return self.nodes.size

    @property
    def padded(self) -> np.ndarray:
        """Nodes including the two boundary points."""
        return np.concatenate(([0.0], self.nodes, [1.0]))

    @property
    def spacings(self) -> np.ndarray:
        """The N + 1 cell lengths x_{j+1} - x_j, boundary cells included."""
        return np.diff(self.padded)

    @property
    def half_nodes(self) -> np.ndarray:
        xp = self.padded
        return 0.5 * (xp[1:] + xp[:-1])

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights for the interior nodes (boundary values vanish)."""
        h = self.spacings
        return 0.5 * (h[1:] + h[:-1])


@dataclass(frozen=True)
class TimeGrid:
    T: float
    m: int

    def __post_init__(self):
        if not self.T > 0.0:
            raise ConfigError("horizon T must be positive", ["T"])
        if int(self.m) < 1:
            raise ConfigError("need at least one time step", ["m"])
        object.__setattr__(self, "m", int(self.m))

    @property
    def dt(self) -> float:
        return self.T / self.m

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.m + 1)

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.m) + 0.5) * self.dt


@dataclass(frozen=True)
class DegeneracyCoefficient:
    """a(x) = x**alpha with 0 <= alpha < 1 (weakly degenerate case)."""

    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("degeneracy exponent must lie in [0, 1)", ["alpha"])

    @property
    def tau(self) -> float:
        return self.alpha

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.alpha == 0.0:
            return np.ones_like(x)
        return x**self.alpha

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.alpha == 0.0:
            return np.zeros_like(x)
        return self.alpha * x ** (self.alpha - 1.0)

    def x_over_a_integral(self, x):
        """Closed form of the integral of y / a(y) from 0 to x."""
        x = np.asarray(x, dtype=float)
        return x ** (2.0 - self.alpha) / (2.0 - self.alpha)

    def check(self, grid: SpaceGrid, rtol: float = 1e-12) -> None:
        """Verify the structural assumptions pointwise on the grid."""
        x = grid.nodes
        ax = self(x)
        if np.any(ax <= 0.0):
            raise ConfigError("a must be positive on (0, 1]", ["alpha"])
        if np.any(x * self.derivative(x) > self.tau * ax * (1 + rtol)):
            raise ConfigError("x a'(x) <= tau a(x) violated", ["alpha"])
        ratio = x**2 / ax
        if np.any(np.diff(ratio) < -rtol * ratio[1:]):
            raise ConfigError("x^2 / a(x) is not non-decreasing", ["alpha"])


@dataclass(frozen=True)
class SubdomainMask:
    name: str
    inside: np.ndarray
    interval: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "inside", np.asarray(self.inside, dtype=bool))

    @property
    def indicator(self) -> np.ndarray:
        return self.inside.astype(float)

    @property
    def count(self) -> int:
        return int(self.inside.sum())

    def __and__(self, other: "SubdomainMask") -> "SubdomainMask":
        return SubdomainMask(f"{self.name}&{other.name}", self.inside & other.inside)


def build_space_grid(n: int, grading: float = 1.0) -> SpaceGrid:
    """Interior nodes x_j = (j / (n + 1))**grading, j = 1..n."""
    if int(n) != n or n < 3:
        raise ConfigError("n must be an integer >= 3", ["n"])
    if not grading >= 1.0:
        raise ConfigError("grading exponent must be >= 1", ["grading"])
    j = np.arange(1, int(n) + 1)
    return SpaceGrid((j / (n + 1.0)) ** grading, float(grading))


def mask_from_interval(grid: SpaceGrid, interval, name: str = "") -> SubdomainMask:
    """Nodes lying strictly inside the open interval (lo, hi)."""
    lo, hi = interval
    if not 0.0 <= lo < hi <= 1.0:
        raise ConfigError(f"bad interval {interval!r} for {name or 'mask'}", [name])
    x = grid.nodes
    return SubdomainMask(name, (x > lo) & (x < hi), (float(lo), float(hi)))


def assemble_degenerate_operator(a: DegeneracyCoefficient, grid: SpaceGrid) -> sp.csr_matrix:
    """Flux-form matrix L with (L u)_j ~ -(a u_x)_x(x_j), Dirichlet rows eliminated.

    The coefficient is sampled at cell midpoints only, so a(0) is never used.
    ``diag(W) @ L`` is symmetric.
    """
    h = grid.spacings
    flux = a(grid.half_nodes) / h  # N + 1 conductances
    w = grid.weights
    main = (flux[:-1] + flux[1:]) / w
    upper = -flux[1:-1] / w[:-1]
    lower = -flux[1:-1] / w[1:]
    return sp.diags([lower, main, upper], [-1, 0, 1], format="csr")


def operator_bands(L: sp.spmatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(lower, diag, upper) diagonals of a tridiagonal matrix."""
    return L.diagonal(-1), L.diagonal(0), L.diagonal(1)


def l2_inner(u, v, grid: SpaceGrid):
    return np.sum(grid.weights * u * v, axis=-1)


def gradient_energy(u, a: DegeneracyCoefficient, grid: SpaceGrid):
    """Cellwise sum of a(x_{j+1/2}) |du/h|^2 h, with zero boundary values."""
    u = np.asarray(u, dtype=float)
    pad = [(0, 0)] * (u.ndim - 1) + [(1, 1)]
    du = np.diff(np.pad(u, pad), axis=-1)
    h = grid.spacings
    return np.sum(a(grid.half_nodes) * du**2 / h, axis=-1)


def weighted_norms(u, a: DegeneracyCoefficient, grid: SpaceGrid) -> dict:
    """Discrete L2 and H^1_a norms of a grid function vanishing at x = 0, 1."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != grid.n:
        raise ValueError(f"field has {u.shape[-1]} nodes, grid has {grid.n}")
    l2sq = l2_inner(u, u, grid)
    h1sq = l2sq + gradient_energy(u, a, grid)
    return {"l2": np.sqrt(l2sq), "h1a": np.sqrt(h1sq)}


def spacetime_norm(u, grid: SpaceGrid, time: TimeGrid) -> float:
    """sqrt(dt * sum_k ||u_k||_W^2) for a field sampled on the m intervals."""
    return float(np.sqrt(time.dt * np.sum(grid.weights * np.asarray(u) ** 2)))


def restrict_to_mask(u, mask: SubdomainMask):
    """Zero every spatial entry outside the mask (last axis is space)."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != mask.inside.size:
        raise ValueError(f"field has {u.shape[-1]} nodes, mask has {mask.inside.size}")
    return u * mask.indicator
