"""Assemble a discrete problem instance from a :class:`RunConfig`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .carleman import (
    CarlemanParams, SigmaProfile, WeightBundle, build_sigma, build_weights, calibrate_s, choose_parameters,
)
from .config import RunConfig
from .errors import ConfigError
from .grid import (
    DegeneracyCoefficient, SpaceGrid, SubdomainMask, TimeGrid, assemble_degenerate_operator,
    build_space_grid, mask_from_interval,
)
from .nash import CostConfig, default_targets
from .pde import make_nonlinearity


@dataclass(eq=False)
class Problem:
    """Everything the solvers need; arrays are treated as read-only."""

    config: RunConfig
    space: SpaceGrid
    time: TimeGrid
    a: DegeneracyCoefficient
    L: object
    omega: SubdomainMask
    omega1: SubdomainMask
    omega2: SubdomainMask
    omega_d: SubdomainMask
    nested: tuple  # O_0 .. O_3
    sigma: SigmaProfile
    params: CarlemanParams
    bundle: WeightBundle
    d: np.ndarray  # (m, N)
    F: tuple
    y0: np.ndarray  # (2, N)
    cost: CostConfig
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def rho_star(self) -> np.ndarray:
        return self.bundle.rho_star

    @property
    def follower_masks(self) -> tuple:
        return (self.omega1, self.omega2)

    def with_cost(self, **kw) -> "Problem":
        """Copy with some cost fields replaced (fresh solver cache)."""
        cost = CostConfig(
            kw.pop("alphas", self.cost.alphas), kw.pop("mus", self.cost.mus), kw.pop("targets", self.cost.targets)
        )
        return self.replace(cost=cost, **kw)

    def replace(self, **kw) -> "Problem":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "_cache"}
        values.update(kw)
        return Problem(**values)


def default_initial_data(space: SpaceGrid, amplitude: float) -> np.ndarray:
    x = space.nodes
    return amplitude * np.stack([np.sin(np.pi * x), 0.5 * np.sin(2.0 * np.pi * x)])


def make_problem(cfg: RunConfig | None = None, F: tuple | None = None, y0=None, targets=None) -> Problem:
    cfg = RunConfig() if cfg is None else cfg
    space = build_space_grid(cfg.n, cfg.grading)
    time = TimeGrid(cfg.T, cfg.m)
    a = DegeneracyCoefficient(cfg.alpha)
    a.check(space)
    L = assemble_degenerate_operator(a, space)
    masks = {name: mask_from_interval(space, getattr(cfg, name), name)
             for name in ("omega", "omega1", "omega2", "omega_d", "o0", "o1", "o2", "o3")}
    for name in ("omega", "omega1", "omega2", "omega_d"):
        if masks[name].count == 0:
            raise ConfigError(f"{name} contains no grid node; refine n", [name, "n"])
    sigma = build_sigma(space, masks["o0"])
    params = choose_parameters(a, sigma, cfg.T)
    s = calibrate_s(params, a, sigma, space, time, cfg.dynamic_range) if cfg.s == "calibrate" else float(cfg.s)
    params = params.with_s(s)
    bundle = build_weights(params, space, time, a, sigma)
    if F is None:
        nl = make_nonlinearity(cfg.nonlinearity, cfg.M)
        F = (nl, nl)
    y0 = default_initial_data(space, cfg.y0_amplitude) if y0 is None else np.asarray(y0, float)
    if targets is None:
        targets = default_targets(space, masks["omega_d"], bundle.kappa, cfg.target_amplitude)
    cost = CostConfig((cfg.alpha1, cfg.alpha2), (cfg.mu1, cfg.mu2), targets)
    d = np.full((time.m, space.n), cfg.d0)
    return Problem(
        cfg, space, time, a, L, masks["omega"], masks["omega1"], masks["omega2"], masks["omega_d"],
        tuple(masks[f"o{k}"] for k in range(4)), sigma, params, bundle, d, tuple(F), y0, cost,
    )
