"""Network topology, per-unit parameters and incidence algebra.

All vectors indexed by bus use the *internal* ordering: generator buses first,
then load buses, each group in ascending id. Line vectors follow the order in
which lines appear in the case.
"""

from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GENERATOR = "generator"
LOAD = "load"

RANK_TOL = 1e-9


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    area: int
    D: float
    M: float | None = None
    p_in: float = 0.0
    # OLC data carried with the bus; quadratic cost c(d) = theta * d**2
    theta: float = 1.0
    d_min: float = -np.inf
    d_max: float = np.inf

    @property
    def is_generator(self) -> bool:
        return self.kind == GENERATOR


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    B: float
    p_max: float = np.inf
    p_min: float = -np.inf
    internal: bool = True


@dataclass(frozen=True)
class PowerNetwork:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_mva: float = 100.0
    name: str = ""

    @property
    def areas(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for b in sorted(self.buses, key=lambda b: b.id):
            out.setdefault(b.area, []).append(b.id)
        return out

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    @property
    def order(self) -> list[int]:
        """Bus ids in internal order (generators first)."""
        gens = sorted(b.id for b in self.buses if b.is_generator)
        loads = sorted(b.id for b in self.buses if not b.is_generator)
        return gens + loads

    @property
    def n_gen(self) -> int:
        return sum(1 for b in self.buses if b.is_generator)

    def ordered(self, attr: str) -> np.ndarray:
        """Per-bus attribute as an array in internal order."""
        by_id = {b.id: b for b in self.buses}
        return np.array([getattr(by_id[i], attr) for i in self.order], dtype=float)

    def with_buses(self, **per_bus) -> PowerNetwork:
        """Copy with per-bus fields replaced; values are dicts keyed by bus id."""
        new = []
        for b in self.buses:
            kw = {k: v[b.id] for k, v in per_bus.items() if b.id in v}
            new.append(_replace(b, **kw))
        return PowerNetwork(tuple(new), self.lines, self.base_mva, self.name)


def _replace(obj, **kw):
    from dataclasses import replace

    return replace(obj, **kw) if kw else obj


def make_network(buses, lines, base_mva: float = 100.0, name: str = "") -> PowerNetwork:
    """Build a network, deriving each line's ``internal`` flag from bus areas."""
    buses = tuple(buses)
    area = {b.id: b.area for b in buses}
    fixed = []
    for ln in lines:
        internal = area.get(ln.from_bus) == area.get(ln.to_bus)
        fixed.append(_replace(ln, internal=internal) if ln.internal != internal else ln)
    return PowerNetwork(buses, tuple(fixed), base_mva, name)


# ---------------------------------------------------------------------------
# validation


def _connected(nodes: set[int], edges: list[tuple[int, int]]) -> bool:
    if not nodes:
        return True
    adj: dict[int, list[int]] = {n: [] for n in nodes}
    for a, b in edges:
        if a in adj and b in adj:
            adj[a].append(b)
            adj[b].append(a)
    start = next(iter(nodes))
    seen = {start}
    queue = deque([start])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return seen == nodes


def validate_network(net: PowerNetwork) -> list[str]:
    """Return a list of human-readable rule violations (empty when valid)."""
    problems: list[str] = []
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        problems.append("buses: duplicate bus id")
    if sorted(ids) != list(range(1, len(ids) + 1)):
        problems.append("buses: ids must be contiguous from 1 to |N|")
    area = {}
    for b in net.buses:
        area[b.id] = b.area
        if b.kind not in (GENERATOR, LOAD):
            problems.append(f"bus {b.id}: unknown kind {b.kind!r}")
        if not b.D > 0:
            problems.append(f"bus {b.id}: damping D must be positive")
        if b.kind == GENERATOR and (b.M is None or not b.M > 0):
            problems.append(f"bus {b.id}: generator inertia M must be positive")
        if not b.d_min < b.d_max:
            problems.append(f"bus {b.id}: load limits require d_min < d_max")
        if not b.theta > 0:
            problems.append(f"bus {b.id}: cost coefficient must be positive")

    seen = set()
    for k, ln in enumerate(net.lines):
        tag = f"line {k} ({ln.from_bus}->{ln.to_bus})"
        if ln.from_bus not in area or ln.to_bus not in area:
            problems.append(f"{tag}: unknown endpoint")
            continue
        if ln.from_bus == ln.to_bus:
            problems.append(f"{tag}: self loop")
        if (ln.to_bus, ln.from_bus) in seen:
            problems.append(f"{tag}: antiparallel line")
        if (ln.from_bus, ln.to_bus) in seen:
            problems.append(f"{tag}: duplicate line")
        seen.add((ln.from_bus, ln.to_bus))
        if not ln.B > 0:
            problems.append(f"{tag}: susceptance must be positive")
        if not ln.p_min < ln.p_max:
            problems.append(f"{tag}: thermal limits require p_min < p_max")
        if ln.internal != (area[ln.from_bus] == area[ln.to_bus]):
            problems.append(f"{tag}: internal flag disagrees with bus areas")

    edges = [(ln.from_bus, ln.to_bus) for ln in net.lines]
    if not _connected(set(ids), edges):
        problems.append("network: graph not connected")
    for a, members in net.areas.items():
        internal = [(ln.from_bus, ln.to_bus) for ln in net.lines
                    if area.get(ln.from_bus) == a and area.get(ln.to_bus) == a]
        if not _connected(set(members), internal):
            problems.append(f"area {a}: internal subgraph not connected")
    return problems


class NetworkError(ValueError):
    pass


# ---------------------------------------------------------------------------
# incidence algebra


@dataclass(frozen=True)
class IncidenceSet:
    """Incidence matrices and compact factorizations for one network.

    ``A`` is the signed node-branch incidence (+1 at the sending bus), ``Abar``
    keeps only the internal-line columns, and ``S = Abar diag(Bbar) Abar^T`` is
    the susceptance-weighted Laplacian of the area subgraphs.
    """

    net: PowerNetwork
    order: tuple[int, ...]
    n_gen: int
    A: np.ndarray
    B: np.ndarray
    internal: np.ndarray  # indices of internal lines
    Abar: np.ndarray
    Bbar: np.ndarray
    S: np.ndarray
    V_A: np.ndarray
    sigma_A: np.ndarray
    U_A: np.ndarray
    U_S: np.ndarray
    sigma_S: np.ndarray
    warnings: tuple[str, ...] = field(default=())

    @property
    def n_bus(self) -> int:
        return self.A.shape[0]

    @property
    def n_line(self) -> int:
        return self.A.shape[1]

    @property
    def n_internal(self) -> int:
        return len(self.internal)

    @property
    def A_G(self) -> np.ndarray:
        return self.A[: self.n_gen]

    @property
    def A_L(self) -> np.ndarray:
        return self.A[self.n_gen:]

    def index(self, bus_id: int) -> int:
        return self.order.index(bus_id)

    def bus_vector(self, values: dict[int, float], default: float = 0.0) -> np.ndarray:
        """Dense vector in internal order from a ``{bus_id: value}`` mapping."""
        out = np.full(self.n_bus, default, dtype=float)
        for k, v in values.items():
            out[self.index(k)] = v
        return out

    def area_masks(self) -> dict[int, np.ndarray]:
        areas = self.net.ordered("area")
        return {int(a): areas == a for a in np.unique(areas)}


def _compact_factor(singular: np.ndarray, label: str) -> tuple[np.ndarray, list[str]]:
    notes = []
    if singular.size == 0 or singular.max() == 0:
        return np.zeros(0, dtype=bool), notes
    cut = RANK_TOL * singular.max()
    keep = singular > cut
    near = (singular > cut / 10) & (singular < cut * 10)
    if near.any():
        notes.append(f"{label}: singular value within 10x of rank tolerance")
    return keep, notes


def build_incidence(net: PowerNetwork) -> IncidenceSet:
    problems = validate_network(net)
    if problems:
        raise NetworkError("; ".join(problems))
    order = net.order
    pos = {bid: k for k, bid in enumerate(order)}
    n, m = len(order), len(net.lines)
    A = np.zeros((n, m))
    for k, ln in enumerate(net.lines):
        A[pos[ln.from_bus], k] = 1.0
        A[pos[ln.to_bus], k] = -1.0
    B = np.array([ln.B for ln in net.lines], dtype=float)
    internal = np.array([k for k, ln in enumerate(net.lines) if ln.internal], dtype=int)
    Abar = A[:, internal]
    Bbar = B[internal]
    S = Abar @ np.diag(Bbar) @ Abar.T
    S = 0.5 * (S + S.T)

    notes: list[str] = []
    V, s, Ut = np.linalg.svd(A, full_matrices=False)
    keep, w = _compact_factor(s, "A")
    notes += w
    V_A, sigma_A, U_A = V[:, keep], s[keep], Ut[keep].T

    evals, evecs = np.linalg.eigh(S)
    keep, w = _compact_factor(np.abs(evals), "S")
    notes += w
    U_S, sigma_S = evecs[:, keep], evals[keep]

    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return IncidenceSet(net, tuple(order), net.n_gen, A, B, internal, Abar, Bbar, S,
                        V_A, sigma_A, U_A, U_S, sigma_S, tuple(notes))


def line_flow(inc: IncidenceSet, theta: np.ndarray) -> np.ndarray:
    """DC flow ``B_ij (theta_i - theta_j)`` on every line."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (inc.n_bus,):
        raise ValueError(f"expected {inc.n_bus} angles, got shape {theta.shape}")
    return inc.B * (inc.A.T @ theta)


# ---------------------------------------------------------------------------
# case files


class CaseFormatError(ValueError):
    pass


def network_from_dict(data: dict) -> PowerNetwork:
    defaults = data.get("defaults", {})
    try:
        buses = []
        for raw in data["buses"]:
            buses.append(Bus(
                id=int(raw["id"]),
                kind=str(raw["kind"]),
                area=int(raw.get("area", 1)),
                D=float(raw["D"]),
                M=None if raw.get("M") is None else float(raw["M"]),
                p_in=float(raw.get("p_in", 0.0)),
                theta=float(raw.get("theta", defaults.get("theta", 1.0))),
                d_min=float(raw.get("d_min", defaults.get("d_min", -np.inf))),
                d_max=float(raw.get("d_max", defaults.get("d_max", np.inf))),
            ))
        lines = []
        for raw in data["lines"]:
            lines.append(Line(
                from_bus=int(raw["from"]),
                to_bus=int(raw["to"]),
                B=float(raw["b"]),
                p_max=float(raw.get("p_max", defaults.get("p_max", np.inf))),
                p_min=float(raw.get("p_min", defaults.get("p_min", -np.inf))),
            ))
    except KeyError as exc:
        raise CaseFormatError(f"missing field {exc.args[0]!r}") from None
    net = make_network(buses, lines, float(data.get("base_mva", 100.0)), str(data.get("name", "")))
    if data.get("areas"):
        declared = {int(a["id"]) if isinstance(a, dict) else int(a) for a in data["areas"]}
        if declared != set(net.areas):
            raise CaseFormatError(f"declared areas {sorted(declared)} do not match bus areas "
                                  f"{sorted(net.areas)}")
    return net


def network_to_dict(net: PowerNetwork) -> dict:
    def num(x):
        return None if x is None else (float(x) if np.isfinite(x) else ("inf" if x > 0 else "-inf"))

    return {
        "name": net.name,
        "base_mva": net.base_mva,
        "areas": sorted(net.areas),
        "buses": [
            {"id": b.id, "kind": b.kind, "area": b.area, "M": b.M, "D": b.D, "p_in": b.p_in,
             "theta": b.theta, "d_min": num(b.d_min), "d_max": num(b.d_max)}
            for b in sorted(net.buses, key=lambda b: b.id)
        ],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "b": ln.B, "p_max": num(ln.p_max),
             "p_min": num(ln.p_min)}
            for ln in net.lines
        ],
    }


def read_case(path: str | Path) -> PowerNetwork:
    """Parse a JSON case file. Raises ``CaseFormatError`` with a location on bad input."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno} "
                              f"(offset {exc.pos}): {exc.msg}") from None
    net = network_from_dict(data)
    problems = validate_network(net)
    if problems:
        raise CaseFormatError(f"{path}: " + "; ".join(problems))
    return net
