"""Seeded random networks for oracle-equivalence checks."""

import numpy as np

from alcsim.netmodel import Bus, Line, build_incidence, make_network
from alcsim.olc import InfeasibleAreaError, OlcProblem, solve_olc


def _tree_edges(rng, ids):
    ids = list(ids)
    rng.shuffle(ids)
    return [(ids[k], ids[int(rng.integers(0, k))]) for k in range(1, len(ids))]


def random_network(seed, n_min=4, n_max=15, max_areas=3):
    """A connected network with binding load limits and, sometimes, a binding flow limit.

    Every area has at least two buses and one generator. Returns ``(net, sol)`` where
    ``sol`` is the oracle optimum at the network's own injections.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_min, n_max + 1))
    n_area = int(rng.integers(1, min(max_areas, n // 2) + 1))
    areas = np.concatenate([np.repeat(np.arange(1, n_area + 1), 2),
                            rng.integers(1, n_area + 1, size=n - 2 * n_area)])
    ids = np.arange(1, n + 1)
    members = {a: [int(i) for i in ids[areas == a]] for a in range(1, n_area + 1)}
    gens = {m[0] for m in members.values()}
    gens |= {int(i) for i in ids if rng.random() < 0.3}

    buses = []
    for i, a in zip(ids, areas):
        g = int(i) in gens
        lim = rng.uniform(0.1, 0.4)
        buses.append(Bus(id=int(i), kind="generator" if g else "load", area=int(a),
                         D=float(rng.uniform(0.5, 2.0)), M=float(rng.uniform(2, 10)) if g else None,
                         theta=float(rng.uniform(1, 5)), d_min=-lim,
                         d_max=float(rng.uniform(0.1, 0.4))))
    edges = []
    for m in members.values():
        edges += _tree_edges(rng, m)
        for _ in range(int(rng.integers(0, 2))):
            a, b = rng.choice(m, size=2, replace=False) if len(m) > 2 else (m[0], m[1])
            if (a, b) not in edges and (b, a) not in edges:
                edges.append((int(a), int(b)))
    reps = [m[int(rng.integers(0, len(m)))] for m in members.values()]
    edges += list(zip(reps[:-1], reps[1:]))
    lines = [Line(int(a), int(b), float(rng.uniform(1, 10))) for a, b in edges]
    net = make_network(buses, lines)

    # injections: per area, a total that pushes the cheapest buses onto their limits
    p_in = {}
    for a, m in members.items():
        cap = sum(net.bus(i).d_min for i in m) if rng.random() < 0.5 else \
            sum(net.bus(i).d_max for i in m)
        total = rng.uniform(0.55, 0.85) * cap
        w = rng.dirichlet(np.ones(len(m)))
        for i, share in zip(m, w):
            p_in[i] = float(total * share)
    net = net.with_buses(p_in=p_in)
    inc = build_incidence(net)
    sol = solve_olc(OlcProblem.from_network(inc))

    # tighten one internal line below its optimal virtual flow on odd seeds
    flows = inc.Bbar * (inc.Abar.T @ sol.psi)
    if seed % 2 and flows.size and np.max(np.abs(flows)) > 1e-3:
        k = int(np.argmax(np.abs(flows)))
        cap = 0.6 * abs(flows[k])
        line_k = inc.internal[k]
        new_lines = [Line(ln.from_bus, ln.to_bus, ln.B, p_max=cap, p_min=-cap)
                     if j == line_k else ln for j, ln in enumerate(net.lines)]
        tight = make_network(net.buses, new_lines)
        try:
            sol = solve_olc(OlcProblem.from_network(build_incidence(tight)))
            net = tight
        except InfeasibleAreaError:
            pass
    return net, sol


def random_topology(seed, n_max=20, max_areas=3, unit=False):
    """Connected multi-area network without limits or injections.

    ``unit`` sets every inertia and susceptance to one.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, n_max + 1))
    n_area = int(rng.integers(1, min(max_areas, n // 2) + 1)) if n >= 2 else 1
    areas = np.concatenate([np.repeat(np.arange(1, n_area + 1), 2),
                            rng.integers(1, n_area + 1, size=n - 2 * n_area)])
    ids = np.arange(1, n + 1)
    members = {a: [int(i) for i in ids[areas == a]] for a in range(1, n_area + 1)}
    buses = [Bus(id=int(i), kind="generator" if k % 3 == 0 else "load", area=int(a),
                 D=float(rng.uniform(0.5, 2)),
                 M=(1.0 if unit else float(rng.uniform(1, 10))) if k % 3 == 0 else None)
             for k, (i, a) in enumerate(zip(ids, areas))]
    edges = []
    for m in members.values():
        edges += _tree_edges(rng, m)
    reps = [m[0] for m in members.values()]
    edges += list(zip(reps[:-1], reps[1:]))
    for _ in range(int(rng.integers(0, 4))):
        a, b = (int(x) for x in rng.choice(ids, size=2, replace=False))
        if (a, b) not in edges and (b, a) not in edges:
            edges.append((a, b))
    B = rng.uniform(0.5, 10, size=len(edges))
    if unit:
        B[:] = 1.0
    return make_network(buses, [Line(a, b, float(w)) for (a, b), w in zip(edges, B)])
