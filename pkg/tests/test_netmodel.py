import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alcsim.netmodel import (Bus, CaseFormatError, Line, NetworkError, build_incidence,
                             line_flow, make_network, network_from_dict, network_to_dict,
                             read_case, validate_network)
from netgen import random_topology


def two_bus_net(B=5.0, extra=()):
    buses = [Bus(1, "generator", 1, D=1.0, M=1.0), Bus(2, "load", 1, D=1.0)]
    return make_network(buses, [Line(1, 2, B), *extra])


def test_two_bus_is_valid():
    assert validate_network(two_bus_net()) == []


def test_antiparallel_line_rejected():
    problems = validate_network(two_bus_net(extra=[Line(2, 1, 1.0)]))
    assert any("antiparallel line" in p for p in problems)


def test_isolated_bus_rejected():
    net = two_bus_net()
    net = make_network(net.buses + (Bus(3, "load", 1, D=1.0),), net.lines)
    assert any("graph not connected" in p for p in validate_network(net))


@pytest.mark.parametrize("bad, rule", [
    (Bus(2, "load", 1, D=0.0), "damping D must be positive"),
    (Bus(2, "generator", 1, D=1.0), "inertia M must be positive"),
    (Bus(3, "load", 1, D=1.0), "contiguous"),
])
def test_bus_rules(bad, rule):
    buses = [Bus(1, "generator", 1, D=1.0, M=1.0), bad]
    net = make_network(buses, [Line(1, bad.id, 1.0)])
    assert any(rule in p for p in validate_network(net))


def test_line_rules():
    net = two_bus_net(B=-1.0)
    assert any("susceptance" in p for p in validate_network(net))
    net = make_network(two_bus_net().buses, [Line(1, 2, 1.0, p_max=0.1, p_min=0.2)])
    assert any("thermal limits" in p for p in validate_network(net))


def test_disconnected_area_subgraph():
    buses = [Bus(1, "generator", 1, D=1, M=1), Bus(2, "load", 2, D=1), Bus(3, "load", 1, D=1)]
    net = make_network(buses, [Line(1, 2, 1.0), Line(2, 3, 1.0)])
    assert any("area 1: internal subgraph not connected" in p for p in validate_network(net))


def test_build_incidence_rejects_invalid():
    with pytest.raises(NetworkError):
        build_incidence(two_bus_net(extra=[Line(2, 1, 1.0)]))


def test_two_bus_matrices():
    inc = build_incidence(two_bus_net())
    np.testing.assert_array_equal(inc.A, [[1.0], [-1.0]])
    np.testing.assert_allclose(inc.S, [[5, -5], [-5, 5]])


def test_path_graph_spectrum():
    buses = [Bus(1, "generator", 1, D=1, M=1), Bus(2, "load", 1, D=1), Bus(3, "load", 1, D=1)]
    inc = build_incidence(make_network(buses, [Line(1, 2, 1.0), Line(2, 3, 1.0)]))
    np.testing.assert_allclose(np.linalg.eigvalsh(inc.S), [0, 1, 3], atol=1e-12)
    np.testing.assert_allclose(np.sort(inc.sigma_S), [1, 3])


def test_tie_line_excluded_from_abar():
    buses = [Bus(1, "generator", 1, D=1, M=1), Bus(2, "load", 1, D=1),
             Bus(3, "generator", 2, D=1, M=1), Bus(4, "load", 2, D=1)]
    lines = [Line(1, 2, 1.0), Line(2, 3, 2.0), Line(3, 4, 3.0)]
    inc = build_incidence(make_network(buses, lines))
    assert list(inc.internal) == [0, 2]
    assert not inc.net.lines[1].internal
    g1 = [inc.index(1), inc.index(2)]
    g2 = [inc.index(3), inc.index(4)]
    assert np.all(inc.S[np.ix_(g1, g2)] == 0)


def test_bus_order_generators_first():
    buses = [Bus(1, "load", 1, D=1), Bus(2, "generator", 1, D=1, M=1),
             Bus(3, "load", 1, D=1), Bus(4, "generator", 1, D=1, M=2)]
    net = make_network(buses, [Line(1, 2, 1), Line(2, 3, 1), Line(3, 4, 1)])
    assert net.order == [2, 4, 1, 3]
    np.testing.assert_array_equal(net.ordered("M")[:2], [1, 2])


def test_rank_tolerance_warning():
    buses = [Bus(1, "generator", 1, D=1, M=1), Bus(2, "load", 1, D=1), Bus(3, "load", 1, D=1)]
    net = make_network(buses, [Line(1, 2, 1.0), Line(2, 3, 1e-9)])
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        inc = build_incidence(net)
    assert any("rank tolerance" in w for w in inc.warnings)


def test_line_flow_examples():
    inc = build_incidence(two_bus_net())
    assert line_flow(inc, np.array([0.1, 0.02]))[0] == pytest.approx(0.4)
    assert np.all(line_flow(inc, np.full(2, 0.3)) == 0)
    flipped = build_incidence(make_network(two_bus_net().buses, [Line(2, 1, 5.0)]))
    assert line_flow(flipped, np.array([0.1, 0.02]))[0] == pytest.approx(-0.4)
    with pytest.raises(ValueError):
        line_flow(inc, np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_incidence_invariants(seed):
    net = random_topology(seed)
    assert validate_network(net) == []
    inc = build_incidence(net)
    np.testing.assert_allclose(inc.A.sum(axis=0), 0.0, atol=0)
    assert np.all(np.abs(inc.A).sum(axis=0) == 2)
    np.testing.assert_array_equal(inc.S, inc.S.T)
    assert np.linalg.eigvalsh(inc.S).min() >= -1e-10
    for mask in inc.area_masks().values():
        assert np.max(np.abs(inc.S @ mask.astype(float))) <= 1e-10
    recon_A = inc.V_A @ np.diag(inc.sigma_A) @ inc.U_A.T
    assert np.linalg.norm(inc.A - recon_A) <= 1e-10 * np.linalg.norm(inc.A)
    recon_S = inc.U_S @ np.diag(inc.sigma_S) @ inc.U_S.T
    assert np.linalg.norm(inc.S - recon_S) <= 1e-10 * max(np.linalg.norm(inc.S), 1e-300)
    np.testing.assert_allclose(inc.A @ inc.U_A @ inc.U_A.T, inc.A, atol=1e-12)
    np.testing.assert_allclose(inc.S @ inc.U_S @ inc.U_S.T, inc.S, atol=1e-10)
    assert np.all(inc.sigma_A > 0) and np.all(inc.sigma_S > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_line_flow_linear(seed, a, b):
    inc = build_incidence(random_topology(seed))
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, inc.n_bus))
    lhs = line_flow(inc, a * x + b * y)
    rhs = a * line_flow(inc, x) + b * line_flow(inc, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    np.testing.assert_allclose(line_flow(inc, np.full(inc.n_bus, a)), 0.0, atol=1e-12)


def test_case_round_trip(tmp_path):
    net = random_topology(7)
    path = tmp_path / "case.json"
    path.write_text(json.dumps(network_to_dict(net)))
    again = read_case(path)
    assert network_to_dict(again) == network_to_dict(net)


def test_malformed_case_reports_location(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"buses": [\n  {"id": 1,,}\n]}')
    with pytest.raises(CaseFormatError, match=r"line 2, column 12 \(offset \d+\)"):
        read_case(path)


def test_missing_field():
    with pytest.raises(CaseFormatError, match="missing field 'D'"):
        network_from_dict({"buses": [{"id": 1, "kind": "load"}], "lines": []})


def test_declared_areas_must_match():
    data = network_to_dict(two_bus_net())
    data["areas"] = [1, 2]
    with pytest.raises(CaseFormatError, match="declared areas"):
        network_from_dict(data)
