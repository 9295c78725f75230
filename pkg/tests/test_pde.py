import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sncontrol import RunConfig, make_problem
from sncontrol.errors import IterationError, NumericError
from sncontrol.grid import weighted_norms
from sncontrol.leader import leader_system
from sncontrol.pde import (
    CoupledSystem, LinearizedCoefficients, Nonlinearity, constant_coefficients, forward_residual,
    forward_samples, freeze_coefficients, make_nonlinearity, march_backward, march_forward, sine_nonlinearity,
    solve_backward, solve_forward, tanh_nonlinearity,
)


def _inner(problem, u, v):
    return float(np.sum(problem.space.weights * u * v))


def _l2(problem, u):
    return math.sqrt(_inner(problem, u, u))


@pytest.fixture(scope="module", params=[0.0, 0.5, 0.9], ids=lambda a: f"alpha={a}")
def duality_problem(request):
    return make_problem(RunConfig(n=40, m=40, alpha=request.param))


# ------------------------------------------------------------ zero data


def test_zero_data_gives_zero_state(small_problem):
    y = solve_forward(small_problem, y0=np.zeros((2, small_problem.space.n)))
    assert not np.any(y)


def test_zero_terminal_gives_zero_adjoint(small_problem):
    m, n = small_problem.time.m, small_problem.space.n
    pot = np.zeros((2, m, n))
    assert not np.any(solve_backward(small_problem, np.zeros((2, n)), np.zeros((2, m, n)), pot))


def test_zero_data_gives_zero_coupled_solutions(small_problem):
    pb = small_problem.replace(y0=np.zeros_like(small_problem.y0)).with_cost(
        targets=np.zeros_like(small_problem.cost.targets))
    system = leader_system(pb)
    sol = system.optimality()
    assert not np.any(sol.y) and not np.any(sol.p) and not np.any(sol.v)
    adj = system.adjoint(np.zeros((2, pb.space.n)))
    assert not np.any(adj.rho) and not np.any(adj.psi)


# ---------------------------------------------------------- dissipation


def test_uncoupled_heat_flow_is_dissipative(small_problem):
    pb = small_problem
    m, n = pb.time.m, pb.space.n
    y = march_forward(pb, np.zeros((2, m, n)), np.zeros((m, n)), np.zeros((2, m, n)), pb.y0)
    norms = np.array([_l2(pb, y[0, k]) for k in range(m + 1)])
    assert np.all(np.diff(norms) <= 1e-15)
    assert norms[-1] < norms[0]


# ------------------------------------------------------------- duality


def _random_fields(problem, rng):
    m, n = problem.time.m, problem.space.n
    pot = 0.3 * rng.standard_normal((2, m, n))
    d = 1.0 + 0.2 * rng.standard_normal((m, n))
    return pot, d


def test_discrete_duality_holds_to_round_off(duality_problem, rng):
    pb = duality_problem
    m, n, dt = pb.time.m, pb.space.n, pb.time.dt
    pot, d = _random_fields(pb, rng)
    f = rng.standard_normal((2, m, n))
    g = rng.standard_normal((2, m, n))
    y0, pT = rng.standard_normal((2, 2, n))
    Y = march_forward(pb, pot, d, f, y0)
    P = march_backward(pb, pot, d, g, pT)
    lhs = sum(_inner(pb, Y[j, m], P[j, m]) + dt * _inner(pb, Y[j, 1:], g[j]) for j in range(2))
    rhs = sum(_inner(pb, Y[j, 0], P[j, 0]) + dt * _inner(pb, f[j], P[j, :-1]) for j in range(2))
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))


def test_time_reversal_with_constant_symmetric_coefficients(small_problem, rng):
    pb = small_problem
    m, n = pb.time.m, pb.space.n
    pot = np.broadcast_to(0.2 * rng.random((2, 1, n)), (2, m, n)).copy()
    zero_d = np.zeros((m, n))
    data = rng.standard_normal((2, n))
    Y = march_forward(pb, pot, zero_d, np.zeros((2, m, n)), data)
    P = march_backward(pb, pot, zero_d, np.zeros((2, m, n)), data)
    assert np.allclose(P[:, ::-1], Y, rtol=1e-13, atol=1e-15)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linear_sweeps_are_linear(small_problem, seed, a, b):
    pb = small_problem
    r = np.random.default_rng(seed)
    m, n = pb.time.m, pb.space.n
    pot, d = _random_fields(pb, r)
    f1, f2 = r.standard_normal((2, 2, m, n))
    u1, u2 = r.standard_normal((2, 2, n))
    Y = march_forward(pb, pot, d, a * f1 + b * f2, a * u1 + b * u2)
    Yc = a * march_forward(pb, pot, d, f1, u1) + b * march_forward(pb, pot, d, f2, u2)
    assert np.allclose(Y, Yc, rtol=1e-11, atol=1e-11)
    P = march_backward(pb, pot, d, a * f1 + b * f2, a * u1 + b * u2)
    Pc = a * march_backward(pb, pot, d, f1, u1) + b * march_backward(pb, pot, d, f2, u2)
    assert np.allclose(P, Pc, rtol=1e-11, atol=1e-11)


def test_coupled_optimality_is_linear_in_leader_control(linear_system, rng):
    m, n = linear_system.problem.time.m, linear_system.problem.space.n
    h1, h2 = rng.standard_normal((2, m, n))
    s1 = linear_system.optimality(h1, homogeneous=True)
    s2 = linear_system.optimality(h2, homogeneous=True)
    s12 = linear_system.optimality(2 * h1 - h2, homogeneous=True)
    assert np.allclose(s12.y, 2 * s1.y - s2.y, atol=1e-12)
    assert np.allclose(s12.p, 2 * s1.p - s2.p, atol=1e-12)


# -------------------------------------------------------- coupled solves


@pytest.fixture(scope="module")
def default_system(small_problem):
    return leader_system(small_problem)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def test_monolithic_and_picard_optimality_agree(default_system, rng):
    h = rng.standard_normal(default_system._shape)
    mono = default_system.optimality(h)
    pic = default_system.optimality(h, method="picard", tol=1e-13)
    assert pic.iterations > 1
    assert _rel(pic.y, mono.y) < 1e-8
    assert _rel(pic.p, mono.p) < 1e-8


def test_monolithic_and_picard_adjoint_agree(default_system, rng):
    rho_T = rng.standard_normal((2, default_system.problem.space.n))
    mono = default_system.adjoint(rho_T)
    pic = default_system.adjoint(rho_T, method="picard", tol=1e-17)  # psi is O(1e-7)
    assert _rel(pic.rho, mono.rho) < 1e-8
    assert _rel(pic.psi, mono.psi) < 1e-8


def test_optimality_residuals_are_small(default_system, rng):
    h = rng.standard_normal(default_system._shape)
    sol = default_system.optimality(h)
    res = default_system.optimality_residuals(sol, h)
    assert set(res) == {"y1", "y2", "p1^1", "p2^1", "p1^2", "p2^2"}
    assert max(res.values()) < 1e-9


def test_adjoint_residuals_include_aggregated_system(default_system, rng):
    sol = default_system.adjoint(rng.standard_normal((2, default_system.problem.space.n)))
    res = default_system.adjoint_residuals(sol)
    assert {"varrho1", "varrho2"} <= set(res)
    assert max(res.values()) < 1e-9


def test_aggregated_field_solves_its_own_forward_system(default_system, rng):
    # independent oracle: march the aggregated system directly from rho
    pb = default_system.problem
    m, n = default_system._shape
    sol = default_system.adjoint(rng.standard_normal((2, n)))
    al = pb.cost.alphas
    src = np.zeros((2, m, n))
    src[0] = -sum(al[i] * default_system.follower_gain(i) for i in range(2)) * sol.rho[0, :-1]
    c = default_system.coeffs
    direct = march_forward(pb, c.c, c.d, src, np.zeros((2, n)))
    assert np.allclose(sol.varrho(al), direct, rtol=1e-10, atol=1e-12)


def test_picard_failure_carries_history(default_system):
    with pytest.raises(IterationError) as info:
        default_system.optimality(method="picard", max_iter=2, tol=1e-300)
    assert len(info.value.history) == 2


def test_unknown_coupled_method(default_system):
    with pytest.raises(ValueError):
        default_system.optimality(method="gmres")
    with pytest.raises(ValueError):
        default_system.adjoint(np.zeros((2, default_system.problem.space.n)), method="gmres")


# ------------------------------------------------------- nonlinear state


def test_newton_forward_solves_the_nonlinear_step(small_problem):
    pb = small_problem
    y = solve_forward(pb)
    r = forward_residual(pb, y, np.zeros((2, pb.time.m, pb.space.n)))
    assert np.abs(r).max() < 1e-11


def test_semi_implicit_converges_to_newton_in_time():
    errs = []
    for m in (20, 40, 80):
        pb = make_problem(RunConfig(n=30, m=m, M=0.1, y0_amplitude=5.0))
        errs.append(np.abs(solve_forward(pb) - solve_forward(pb, nonlinear="semi-implicit")).max())
    assert errs[0] > errs[1] > errs[2]
    assert errs[1] / errs[2] > 1.7


def test_crank_nicolson_is_second_order_for_linear_data():
    def terminal(m):
        pb = make_problem(RunConfig(n=30, m=m, nonlinearity="linear", M=0.5))
        return solve_forward(pb, scheme="cn")[:, -1]

    ref = terminal(640)
    e = [np.abs(terminal(m) - ref).max() for m in (20, 40)]
    assert e[0] / e[1] > 3.5


def test_unknown_scheme_rejected(small_problem):
    c = constant_coefficients(small_problem, 0.0)
    with pytest.raises(ValueError):
        solve_forward(small_problem, coeffs=c, scheme="rk4")


# --------------------------------------------------- a-priori estimates


def _continuum_data(pb):
    """Grid-independent smooth controls and initial data."""
    t = pb.time.midpoints[:, None]
    x = pb.space.nodes[None, :]
    h = np.cos(np.pi * t) * np.sin(2 * np.pi * x)
    v1 = t * np.ones_like(x)
    v2 = np.sin(3 * t) * np.ones_like(x)
    return h, v1, v2


def _energy_ratio(pb):
    h, v1, v2 = _continuum_data(pb)
    y = solve_forward(pb, h, v1, v2)
    W, dt = pb.space.weights, pb.time.dt
    sup = max(float(np.sum(W * (y[0, k] ** 2 + y[1, k] ** 2))) for k in range(pb.time.m + 1))
    grad = dt * sum(weighted_norms(y[j, k], pb.a, pb.space)["h1a"] ** 2 for j in range(2)
                    for k in range(1, pb.time.m + 1))
    data = sum(dt * float(np.sum(W * mk.indicator * u**2)) for u, mk in
               ((h, pb.omega), (v1, pb.omega1), (v2, pb.omega2)))
    data += float(np.sum(W * pb.y0**2))
    return (sup + grad) / data


def test_energy_estimate_constant_is_stable_under_refinement():
    ratios = [_energy_ratio(make_problem(RunConfig(n=n, m=n))) for n in (25, 50, 100)]
    assert all(math.isfinite(r) and r > 0 for r in ratios)
    assert max(ratios) / min(ratios) < 1.2


def _gronwall_rate(pb):
    y = solve_forward(pb)
    n0 = math.hypot(_l2(pb, pb.y0[0]), _l2(pb, pb.y0[1]))
    t = pb.time.nodes[1:]
    nt = np.array([math.hypot(_l2(pb, y[0, k]), _l2(pb, y[1, k])) for k in range(1, pb.time.m + 1)])
    return float(np.max(np.log(nt / n0) / t))


@pytest.mark.parametrize("kind", ["sine", "tanh", "linear"])
def test_gronwall_rate_respects_bound(kind):
    rates = []
    for n in (25, 50):
        pb = make_problem(RunConfig(n=n, m=n, nonlinearity=kind, M=0.5))
        rates.append(_gronwall_rate(pb))
        assert rates[-1] <= 2 * 0.5 + float(np.abs(pb.d).max()) + 1
    assert abs(rates[0] - rates[1]) <= 0.2 * max(1.0, abs(rates[1]))


def test_max_norm_stays_bounded_under_refinement():
    maxima = []
    for n in (50, 100, 200):
        pb = make_problem(RunConfig(n=n, m=50))
        h, v1, v2 = _continuum_data(pb)
        maxima.append(float(np.abs(solve_forward(pb, h, v1, v2)).max()))
    assert max(maxima) / min(maxima) < 1.2


# ------------------------------------------------ frozen coefficients


def test_freeze_at_zero_state_gives_derivative_at_zero(small_problem):
    pb = small_problem
    c = freeze_coefficients(np.zeros((2, pb.time.m, pb.space.n)), pb.F, pb.d)
    slope = float(pb.F[0].dF(np.zeros(1))[0])
    assert np.allclose(c.b, slope) and np.allclose(c.c, slope)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 5.0))
def test_frozen_potential_reproduces_nonlinearity(seed, scale):
    F = sine_nonlinearity(0.3)
    w = scale * np.random.default_rng(seed).standard_normal((2, 4, 7))
    c = freeze_coefficients(w, (F, F), np.ones((4, 7)))
    assert np.allclose(c.b * w, F.F(w), rtol=1e-12, atol=1e-14)
    assert np.array_equal(c.c, F.dF(w))


def test_freeze_rejects_non_finite_state():
    F = sine_nonlinearity(0.1)
    w = np.zeros((2, 2, 3))
    w[1, 0, 0] = np.nan
    with pytest.raises(NumericError):
        freeze_coefficients(w, (F, F), np.ones((2, 3)))


def test_freeze_rejects_potentials_above_bound():
    lying = Nonlinearity("lying", lambda r: 2 * r, lambda r: np.full_like(r, 2.0), np.zeros_like, 1.0, True)
    with pytest.raises(NumericError, match="exceeds"):
        freeze_coefficients(np.ones((2, 2, 3)), (lying, lying), np.ones((2, 3)))


def test_linearized_coefficients_reject_nan():
    with pytest.raises(NumericError):
        LinearizedCoefficients(np.full((2, 1, 1), np.inf), np.zeros((2, 1, 1)), np.zeros((1, 1)))


def test_sup_norms():
    c = LinearizedCoefficients(np.stack([np.full((1, 2), -3.0), np.ones((1, 2))]), np.zeros((2, 1, 2)),
                               np.full((1, 2), 2.0))
    assert c.sup_norms() == {"b1": 3.0, "b2": 1.0, "c1": 0.0, "c2": 0.0, "d": 2.0}


# ------------------------------------------------------- nonlinearities


@pytest.mark.parametrize("kind", ["zero", "linear", "sine", "tanh"])
def test_builtin_nonlinearities_satisfy_bounds(kind):
    F = make_nonlinearity(kind, 0.7)
    F.check()
    assert F.F(np.zeros(3)).tolist() == [0.0, 0.0, 0.0]


def test_tanh_bound_is_attained():
    F = tanh_nonlinearity(1.0)
    r = np.linspace(-3, 3, 200001)
    assert (np.abs(F.dF(r)) + np.abs(F.d2F(r))).max() == pytest.approx(1.0, rel=1e-8)


def test_check_catches_violations():
    shifted = Nonlinearity("shifted", lambda r: r + 1.0, np.ones_like, np.zeros_like, 1.0)
    with pytest.raises(ValueError, match="F\\(0\\)"):
        shifted.check()
    steep = Nonlinearity("steep", lambda r: 3 * r, lambda r: np.full_like(r, 3.0), np.zeros_like, 1.0)
    with pytest.raises(ValueError, match="exceeds"):
        steep.check()


def test_unknown_nonlinearity():
    with pytest.raises(ValueError):
        make_nonlinearity("cubic", 1.0)


def test_coupled_system_shapes(small_problem):
    sys_ = CoupledSystem(small_problem, constant_coefficients(small_problem, 0.05))
    sol = sys_.optimality()
    m, n = small_problem.time.m, small_problem.space.n
    assert sol.y.shape == (2, m + 1, n) and sol.p.shape == (2, 2, m + 1, n) and sol.v.shape == (2, m, n)
    assert forward_samples(sol.y).shape == (2, m, n)
