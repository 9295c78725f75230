"""Command line front end.

    sncontrol EXPERIMENT [--config PATH] [--seed N] [--out DIR]

EXPERIMENT is one of forward, nash, leader-sweep, carleman-probe, full.
The output directory defaults to $SNCONTROL_OUT, then ``./out``.  Exit
status is 0 on success, 2 on usage errors and the error class code
otherwise; failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import artifacts as art
from .carleman import probe_caccioppoli, probe_hardy, probe_observability
from .config import parse_config
from .errors import SNControlError
from .grid import build_space_grid
from .leader import epsilon_sweep, leader_system
from .nash import convexity_threshold, evaluate_J, solve_nash
from .outer import OuterConfig, run_stackelberg_nash
from .pde import solve_forward
from .problem import make_problem

EXPERIMENTS = ("forward", "nash", "leader-sweep", "carleman-probe", "full")
OUT_ENV = "SNCONTROL_OUT"


def _trajectory_rows(problem, y, name):
    t = problem.time.nodes
    rows = []
    for j in range(y.shape[0]):
        for k in range(y.shape[1]):
            rows.append([f"{name}{j + 1}", k, float(t[k])] + [float(v) for v in y[j, k]])
    return rows


def _trajectory_columns(problem):
    return ["field", "k", "t"] + [f"x{j}" for j in range(1, problem.space.n + 1)]


def _field_rows(problem, v, name):
    t = problem.time.midpoints
    return [[name, k, float(t[k])] + [float(x) for x in v[k]] for k in range(v.shape[0])]


def _norms_over_time(problem, y):
    W = problem.space.weights
    return [np.sqrt(np.sum(W * y[j] ** 2, axis=1)) for j in range(2)]


def run_forward(problem, cfg, out, chash):
    y = solve_forward(problem)
    path = os.path.join(out, "forward_trajectory.csv")
    art.write_csv(path, _trajectory_columns(problem), _trajectory_rows(problem, y, "y"), chash)
    n1, n2 = _norms_over_time(problem, y)
    t = problem.time.nodes
    art.write_svg(os.path.join(out, "forward_norms.svg"), [("|y1(t)|", t, n1), ("|y2(t)|", t, n2)], chash,
                  title="uncontrolled state", xlabel="t", ylabel="L2 norm")
    summary = {"experiment": "forward", "terminal_norms": [float(n1[-1]), float(n2[-1])],
               "max_abs": float(np.abs(y).max())}
    art.write_json(os.path.join(out, "forward_summary.json"), summary, chash)
    return summary


def run_nash(problem, cfg, out, chash):
    sol = solve_nash(problem, method=cfg.coupled_method)
    rows = []
    for i in range(2):
        conv = convexity_threshold(problem, i, sol, trials=cfg.probe_trials, seed=cfg.seed)
        J = evaluate_J(problem, i, None, sol.v[0], sol.v[1], coeffs=sol.coeffs if sol.frozen else None)
        rows.append({"player": i + 1, "J": J, "characterization": sol.characterization[i],
                     "C_hat": conv.C_hat, "mu": problem.cost.mus[i], "bound_ratio": sol.bound_ratio})
    cols = ["player", "J", "characterization", "C_hat", "mu", "bound_ratio"]
    art.write_csv(os.path.join(out, "nash_summary.csv"), cols, rows, chash)
    res_rows = [{"equation": k, "residual": v} for k, v in sorted(sol.residuals.items())]
    art.write_csv(os.path.join(out, "nash_residuals.csv"), ["equation", "residual"], res_rows, chash)
    hist = [{"iteration": k + 1, "change": c} for k, c in enumerate(sol.history)]
    art.write_csv(os.path.join(out, "nash_history.csv"), ["iteration", "change"], hist, chash)
    ctrl = _field_rows(problem, sol.v[0], "v1") + _field_rows(problem, sol.v[1], "v2")
    art.write_csv(os.path.join(out, "nash_controls.csv"), _trajectory_columns(problem), ctrl, chash)
    summary = {"experiment": "nash", "players": rows, "residuals": sol.residuals}
    art.write_json(os.path.join(out, "nash_summary.json"), summary, chash)
    return summary


def run_leader_sweep(problem, cfg, out, chash):
    system = leader_system(problem)
    sw = epsilon_sweep(system, cfg.ladder, tol=cfg.cg_tol, max_iter=cfg.cg_max_iter, method=cfg.coupled_method)
    cols = ["eps", "y1T", "y2T", "yT", "h_norm", "iterations", "residual", "in_fit", "slope"]
    rows = [{**r, "slope": sw.slope} for r in sw.rows]
    art.write_csv(os.path.join(out, "leader_sweep.csv"), cols, rows, chash)
    art.write_svg(os.path.join(out, "leader_sweep.svg"),
                  [("|y(T)|", sw.eps, sw.terminal), ("|h_eps|", sw.eps, sw.h_norms)], chash,
                  title="penalized null control", xlabel="eps", ylabel="norm", logx=True, logy=True,
                  note=f"fitted slope {sw.slope:.3f}")
    summary = {"experiment": "leader-sweep", "slope": sw.slope, "window": list(sw.window), "rows": sw.rows}
    art.write_json(os.path.join(out, "leader_sweep.json"), summary, chash)
    return summary


def _probe_rows(result):
    rows = [{**r, "kind": "trial"} for r in result.rows]
    for name, val in (("max", result.worst), ("median", result.median)):
        rows.append({"kind": name, "trial": "", "seed": "", "lhs": "", "rhs": "", "ratio": val})
    return rows


def run_carleman_probe(problem, cfg, out, chash):
    b = problem.bundle
    t = b.t
    cols = ["k", "t", "Theta", "Theta_tilde", "phi_star", "phi_hat", "rho_star", "kappa"]
    rows = [[k, float(t[k]), float(b.Theta[k]), float(b.Theta_tilde[k]), float(b.phi_star[k]),
             float(b.phi_hat[k]), float(b.rho_star[k]), float(b.kappa[k])] for k in range(t.size)]
    art.write_csv(os.path.join(out, "carleman_weights.csv"), cols, rows, chash)
    system = leader_system(problem)
    obs = probe_observability(problem, system, b, trials=cfg.probe_trials, seed=cfg.seed,
                              method=cfg.coupled_method)
    cols = ["kind", "trial", "seed", "lhs", "rhs", "ratio"]
    art.write_csv(os.path.join(out, "observability_probe.csv"), cols, _probe_rows(obs), chash)
    lo, hi = problem.config.o1
    inner = (lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
    cac = probe_caccioppoli(problem, system, b, inner, problem.config.o1, trials=cfg.probe_trials,
                            seed=cfg.seed, method=cfg.coupled_method)
    art.write_csv(os.path.join(out, "caccioppoli_probe.csv"), cols, _probe_rows(cac), chash)
    hardy = None
    if 0.0 < problem.a.alpha < 1.0:
        hardy = probe_hardy(problem.a, build_space_grid(400), trials=200, seed=cfg.seed)
        hrows = [{"trial": k, "ratio": float(r)} for k, r in enumerate(hardy.ratios)]
        art.write_csv(os.path.join(out, "hardy_probe.csv"), ["trial", "ratio"], hrows, chash)
    summary = {
        "experiment": "carleman-probe", "s": b.s, "r": b.params.r, "dbar": b.params.dbar,
        "lambda": b.params.lam, "lambda_interval": [b.params.lower, b.params.upper],
        "observability_max": obs.worst, "observability_median": obs.median,
        "caccioppoli_max": cac.worst, "caccioppoli_s": cac.s, "hardy_worst": None if hardy is None else hardy.worst,
        "hardy_bound": None if hardy is None else hardy.bound,
    }
    art.write_json(os.path.join(out, "carleman_summary.json"), summary, chash)
    return summary


def run_full(problem, cfg, out, chash):
    outer = OuterConfig(cfg.outer_max_iter, cfg.outer_tol, cfg.damping)
    res = run_stackelberg_nash(problem, outer, eps=cfg.epsilon, cg_tol=cfg.cg_tol, cg_max_iter=cfg.cg_max_iter,
                               method=cfg.coupled_method)
    art.write_csv(os.path.join(out, "full_trajectory.csv"), _trajectory_columns(problem),
                  _trajectory_rows(problem, res.y, "y"), chash)
    ctrl = (_field_rows(problem, res.h * problem.omega.indicator, "h") + _field_rows(problem, res.v[0], "v1")
            + _field_rows(problem, res.v[1], "v2"))
    art.write_csv(os.path.join(out, "full_controls.csv"), _trajectory_columns(problem), ctrl, chash)
    hist = [{"iteration": k + 1, "change": c} for k, c in enumerate(res.changes)]
    art.write_csv(os.path.join(out, "full_changes.csv"), ["iteration", "change"], hist, chash)
    summary = {
        "experiment": "full", "iterations": res.iterations, "converged": res.converged,
        "changes": res.changes, "terminal_norms": list(res.leader.terminal_norms),
        "h_norm": res.leader.h_norm, "cg_iterations": res.leader.iterations, "residuals": res.residuals,
        "bound_ratio": res.bound_ratio, "epsilon": cfg.epsilon,
    }
    art.write_json(os.path.join(out, "full_summary.json"), summary, chash)
    return summary


RUNNERS = {
    "forward": run_forward,
    "nash": run_nash,
    "leader-sweep": run_leader_sweep,
    "carleman-probe": run_carleman_probe,
    "full": run_full,
}


def run_experiment(name, cfg, out) -> dict:
    """Dispatch one experiment; returns its JSON summary."""
    if name not in RUNNERS:
        raise ValueError(f"unknown experiment {name!r}")
    problem = make_problem(cfg)
    os.makedirs(out, exist_ok=True)
    return RUNNERS[name](problem, cfg, out, cfg.config_hash())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sncontrol", description="Stackelberg-Nash control experiments")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", default=None, help="INI run configuration (defaults when omitted)")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./out)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out or os.environ.get(OUT_ENV) or "out"
    try:
        cfg = parse_config(args.config, seed=args.seed)
        summary = run_experiment(args.experiment, cfg, out)
    except (SNControlError, ValueError) as exc:
        code = getattr(exc, "exit_code", SNControlError.exit_code)
        err = {"error": type(exc).__name__, "exit_code": code, "message": str(exc),
               "fields": list(getattr(exc, "fields", ()))}
        print(json.dumps(err), file=sys.stderr)
        return code
    print(json.dumps({"experiment": args.experiment, "out": out, "config_hash": cfg.config_hash()}))
    return 0 if summary is not None else 1


if __name__ == "__main__":
    sys.exit(main())
