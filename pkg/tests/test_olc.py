import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from alcsim.netmodel import Bus, Line, build_incidence, make_network
from alcsim.olc import (ConvexCost, InfeasibleAreaError, OlcProblem, OlcSolution,
                        QuadraticCost, check_kkt, equilibrium_drift, quotient_point, solve_olc)
from netgen import random_network


def two_bus_problem(theta=(1.0, 1.0), lim=1.0, p_in=(0.4, 0.0)):
    buses = [Bus(1, "generator", 1, D=1, M=1, theta=theta[0], d_min=-lim, d_max=lim),
             Bus(2, "load", 1, D=1, theta=theta[1], d_min=-lim, d_max=lim)]
    inc = build_incidence(make_network(buses, [Line(1, 2, 5.0)]))
    return OlcProblem.from_network(inc, p_in=np.array(p_in))


def test_symmetric_two_bus():
    sol = solve_olc(two_bus_problem())
    np.testing.assert_allclose(sol.d, [0.2, 0.2], atol=1e-12)
    assert sol.objective == pytest.approx(0.08, abs=1e-12)
    assert sol.kkt.max() <= 1e-8


def test_zero_disturbance():
    sol = solve_olc(two_bus_problem(p_in=(0.0, 0.0)))
    assert np.all(sol.d == 0) and sol.objective == 0


def test_clamped_two_bus_against_grid():
    prob = two_bus_problem(theta=(1.0, 5.0), lim=0.4, p_in=(0.6, 0.0))
    sol = solve_olc(prob)
    np.testing.assert_allclose(sol.d, [0.4, 0.2], atol=1e-10)
    assert sol.objective == pytest.approx(0.36, abs=1e-10)
    d1 = np.arange(-0.4, 0.4 + 5e-5, 1e-4)
    d2 = 0.6 - d1
    ok = np.abs(d2) <= 0.4 + 1e-12
    costs = d1[ok] ** 2 + 5 * d2[ok] ** 2
    assert costs.min() >= sol.objective - 1e-9
    assert sol.gamma_plus[0] > 0 and sol.gamma_minus.max() == 0


def test_check_kkt_hand_built_optimum():
    prob = two_bus_problem()
    # psi from the balance d + S psi = p with psi_1 pinned
    psi = np.array([0.0, -0.2 / 5])
    mu = np.full(2, 0.4)
    z = np.zeros(2)
    sol = OlcSolution(np.array([0.2, 0.2]), psi, mu, z, z, np.zeros(1), np.zeros(1), 0.08)
    r = check_kkt(prob, sol)
    assert max(r.stationarity, r.primal, r.dual, r.complementarity) <= 1e-12

    bumped = OlcSolution(sol.d + np.array([0.1, 0.0]), psi, mu, z, z, np.zeros(1),
                         np.zeros(1), 0.0)
    assert check_kkt(prob, bumped).primal == pytest.approx(0.1, abs=1e-12)

    neg = OlcSolution(sol.d, psi, mu, np.array([-0.3, 0.0]), z, np.zeros(1), np.zeros(1), 0.0)
    assert check_kkt(prob, neg).dual == pytest.approx(0.3)


def test_infeasible_area_named():
    with pytest.raises(InfeasibleAreaError, match="area 1") as info:
        solve_olc(two_bus_problem(p_in=(2.5, 0.0)))
    assert info.value.area == 1


def test_flow_limits_infeasible_detected():
    buses = [Bus(1, "generator", 1, D=1, M=1, d_min=-0.1, d_max=0.1),
             Bus(2, "load", 1, D=1, d_min=-1, d_max=1)]
    inc = build_incidence(make_network(buses, [Line(1, 2, 1.0, p_max=0.05, p_min=-0.05)]))
    # bus 1 must shed 0.5 but can only absorb 0.1 and export 0.05
    with pytest.raises(InfeasibleAreaError, match="virtual-flow"):
        solve_olc(OlcProblem.from_network(inc, p_in=np.array([0.5, 0.0])))


def test_binding_flow_limit_matches_generic_solver():
    buses = [Bus(1, "generator", 1, D=1, M=1, theta=5, d_min=-1, d_max=1),
             Bus(2, "load", 1, D=1, theta=1, d_min=-1, d_max=1),
             Bus(3, "load", 1, D=1, theta=1, d_min=-1, d_max=1)]
    lines = [Line(1, 2, 1.0, p_max=0.1, p_min=-0.1), Line(2, 3, 1.0)]
    inc = build_incidence(make_network(buses, lines))
    prob = OlcProblem.from_network(inc, p_in=np.array([0.6, 0.0, 0.0]))
    sol = solve_olc(prob)
    assert sol.methods[1] == "interior-point"
    assert sol.kkt.max() <= 1e-8
    flows = prob.virtual_flow(sol.psi)
    assert flows[0] == pytest.approx(0.1, abs=1e-9)
    assert sol.sigma_plus[0] > 0

    # independent check on (d2, d3) with d1 = 0.6 - d2 - d3 and flow 1->2 = d2 + d3
    obj = lambda x: 5 * (0.6 - x.sum()) ** 2 + x[0] ** 2 + x[1] ** 2
    cons = [{"type": "ineq", "fun": lambda x: 0.1 - x.sum()},
            {"type": "ineq", "fun": lambda x: x.sum() + 0.1}]
    ref = minimize(obj, np.zeros(2), constraints=cons, method="SLSQP", tol=1e-14)
    assert sol.objective == pytest.approx(ref.fun, abs=1e-9)
    np.testing.assert_allclose(sol.d[1:], ref.x, atol=1e-6)


def test_convex_cost_requires_ell():
    with pytest.raises(ValueError, match="smoothness bound"):
        ConvexCost(np.square, lambda d: 2 * d, lambda d: 2 + 0 * d, u=2.0, ell=None)


def test_non_quadratic_cost():
    # c(d) = d^2 + d^4 / 4 on [-1, 1]: c'' in [2, 5]
    cost = ConvexCost(lambda d: d**2 + d**4 / 4, lambda d: 2 * d + d**3,
                      lambda d: 2 + 3 * d**2, u=2.0, ell=5.0)
    prob = two_bus_problem(p_in=(0.4, 0.0))
    prob = OlcProblem(prob.inc, cost, prob.d_min, prob.d_max, prob.p_in)
    sol = solve_olc(prob)
    np.testing.assert_allclose(sol.d, [0.2, 0.2], atol=1e-10)
    assert sol.mu[0] == pytest.approx(0.4 + 0.008, abs=1e-10)


def test_tighter_tolerance_is_consistent():
    net, _ = random_network(5)
    prob = OlcProblem.from_network(build_incidence(net))
    a = solve_olc(prob, tol=1e-8)
    b = solve_olc(prob, tol=1e-9)
    assert np.max(np.abs(a.d - b.d)) <= 1e-7


@pytest.mark.parametrize("seed", [3, 5, 9, 11])
def test_objective_scaling_keeps_argmin(seed):
    net, _ = random_network(seed)
    prob = OlcProblem.from_network(build_incidence(net))
    a = solve_olc(prob)
    scaled = OlcProblem(prob.inc, prob.cost.scaled(7.5), prob.d_min, prob.d_max, prob.p_in)
    b = solve_olc(scaled)
    np.testing.assert_allclose(a.d, b.d, atol=1e-7)
    assert b.objective == pytest.approx(7.5 * a.objective, rel=1e-9)


def _small_instance(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(2, 4)) for _ in range(int(rng.integers(1, 3)))]
    buses, lines, bid = [], [], 1
    first = []
    for a, k in enumerate(sizes, start=1):
        ids = list(range(bid, bid + k))
        first.append(ids[0])
        for j, i in enumerate(ids):
            lim = float(rng.uniform(0.1, 0.5))
            buses.append(Bus(i, "generator" if j == 0 else "load", a, D=1.0,
                             M=1.0 if j == 0 else None, theta=float(rng.uniform(1, 5)),
                             d_min=-lim, d_max=float(rng.uniform(0.1, 0.5))))
        lines += [Line(x, x + 1, 1.0) for x in ids[:-1]]
        bid += k
    lines += [Line(a, b, 1.0) for a, b in zip(first[:-1], first[1:])]
    prob = OlcProblem.from_network(build_incidence(make_network(buses, lines)))
    p = np.zeros(prob.inc.n_bus)
    for mask in prob.inc.area_masks().values():
        total = 0.95 * rng.uniform(prob.d_min[mask].sum(), prob.d_max[mask].sum())
        p[np.flatnonzero(mask)[0]] = total
    return prob.with_p_in(p)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_brute_force_grid_finds_nothing_cheaper(seed):
    prob = _small_instance(seed)
    sol = solve_olc(prob)
    theta = prob.cost.theta
    best = 0.0
    for mask in prob.inc.area_masks().values():
        idx = np.flatnonzero(mask)
        target = prob.p_in[idx].sum()
        lo, hi = prob.d_min[idx], prob.d_max[idx]
        axes = [np.arange(lo[j], hi[j] + 1e-12, 1e-3) for j in range(idx.size - 1)]
        area_best = np.inf
        if idx.size == 2:
            d0 = axes[0]
            d1 = target - d0
        else:
            g0, g1 = np.meshgrid(axes[0], axes[1], indexing="ij")
            d0, d1 = g0.ravel(), g1.ravel()
        if idx.size == 2:
            ok = (d1 >= lo[1]) & (d1 <= hi[1])
            c = theta[idx[0]] * d0**2 + theta[idx[1]] * d1**2
        else:
            d2 = target - d0 - d1
            ok = (d2 >= lo[2]) & (d2 <= hi[2])
            c = theta[idx[0]] * d0**2 + theta[idx[1]] * d1**2 + theta[idx[2]] * d2**2
        if ok.any():
            area_best = c[ok].min()
        best += area_best
    assert best >= sol.objective - 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_solution_invariants(seed):
    net, sol = random_network(seed % 1000)
    prob = OlcProblem.from_network(build_incidence(net))
    assert sol.kkt.max() <= 1e-8 * max(1.0, np.abs(sol.mu).max())
    for arr in (sol.gamma_plus, sol.gamma_minus, sol.sigma_plus, sol.sigma_minus):
        assert np.all(arr >= 0)
    for mask in prob.inc.area_masks().values():
        assert abs(np.sum(sol.d[mask] - prob.p_in[mask])) <= 1e-8
    # psi gauge: lowest id bus of each area pinned at zero
    for area, ids in net.areas.items():
        assert sol.psi[prob.inc.index(min(ids))] == 0.0


def test_drift_constant_is_zero():
    prob = two_bus_problem()
    rep = equilibrium_drift(lambda t: prob, np.linspace(0, 1, 5))
    assert rep.sup == 0.0


def test_drift_of_ramp():
    base = two_bus_problem(p_in=(0.0, 0.0))
    r = 0.02
    rep = equilibrium_drift(lambda t: base.with_p_in([r * t, 0.0]), np.linspace(0, 10, 11))
    np.testing.assert_allclose(rep.d_rates, r / 2, atol=1e-10)


def test_drift_of_sinusoid_scales_linearly():
    base = two_bus_problem(p_in=(0.0, 0.0))
    f = 1 / 60
    grid = np.linspace(0, 60, 241)

    def sup(a):
        return equilibrium_drift(lambda t: base.with_p_in([a * np.sin(2 * np.pi * f * t), 0.0]),
                                 grid).sup

    eta = sup(0.1) / (2 * np.pi * f * 0.1)
    assert 0 < eta < np.inf
    assert sup(0.05) <= eta * 2 * np.pi * f * 0.05 * (1 + 1e-9)


def test_drift_rejects_bad_grid():
    prob = two_bus_problem()
    with pytest.raises(ValueError):
        equilibrium_drift(lambda t: prob, [0.0, 0.0])


def test_quotient_point_ignores_gauge():
    prob = two_bus_problem()
    sol = solve_olc(prob)
    shifted = OlcSolution(sol.d, sol.psi + 3.0, sol.mu, sol.gamma_plus, sol.gamma_minus,
                          sol.sigma_plus, sol.sigma_minus, sol.objective)
    np.testing.assert_allclose(quotient_point(prob, sol), quotient_point(prob, shifted),
                               atol=1e-12)
