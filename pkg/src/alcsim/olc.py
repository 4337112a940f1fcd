"""Optimal load control problem and an independent KKT-certified solver.

The solver never touches the closed-loop dynamics. Each control area is
solved on its own since the balance and line constraints never couple areas:

* without active line limits, the per-area optimum is exact from a scalar
  dual bisection on the area's balance multiplier (``d_i = clip((c_i')^{-1}(lam))``);
* when the resulting virtual flows break a thermal limit, the area is
  re-solved in virtual-angle coordinates by a primal-dual interior point method.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq, linprog

from .netmodel import IncidenceSet

DEFAULT_TOL = 1e-8


class InfeasibleAreaError(ValueError):
    def __init__(self, area: int, message: str):
        super().__init__(f"area {area}: {message}")
        self.area = area


class OracleConvergenceError(RuntimeError):
    def __init__(self, message: str, residuals: dict | None = None):
        super().__init__(message)
        self.residuals = residuals or {}


# ---------------------------------------------------------------------------
# costs


class QuadraticCost:
    """Separable cost ``c_i(d) = theta_i d^2``."""

    def __init__(self, theta):
        self.theta = np.asarray(theta, dtype=float)
        if np.any(self.theta <= 0):
            raise ValueError("quadratic cost coefficients must be positive")

    def values(self, d):
        return self.theta * np.asarray(d) ** 2

    def value(self, d) -> float:
        return float(np.sum(self.values(d)))

    def grad(self, d):
        return 2.0 * self.theta * np.asarray(d)

    def hess(self, d):
        return np.broadcast_to(2.0 * self.theta, np.shape(d)).copy()

    def inv_grad(self, x):
        return np.asarray(x) / (2.0 * self.theta)

    @property
    def u(self) -> float:
        return float(2.0 * self.theta.min())

    @property
    def ell(self) -> float:
        return float(2.0 * self.theta.max())

    def curvature_range(self, d_min, d_max):
        c = 2.0 * self.theta
        return c.copy(), c.copy()

    def scaled(self, k: float) -> QuadraticCost:
        return QuadraticCost(self.theta * k)


class ConvexCost:
    """User-supplied separable convex cost.

    ``value``, ``grad`` and ``hess`` act elementwise on the per-bus load vector.
    The smoothness bound ``ell`` is mandatory because the certificate and the
    damping-robustness interval are built from it.
    """

    def __init__(self, value: Callable, grad: Callable, hess: Callable, u: float,
                 ell: float | None, inv_grad: Callable | None = None):
        if ell is None or not np.isfinite(ell):
            raise ValueError("a finite smoothness bound ell is required for non-quadratic costs")
        if not 0 < u <= ell:
            raise ValueError("need 0 < u <= ell")
        self._value, self._grad, self._hess = value, grad, hess
        self._inv = inv_grad
        self.u, self.ell = float(u), float(ell)

    def values(self, d):
        return np.asarray(self._value(np.asarray(d, dtype=float)), dtype=float)

    def value(self, d) -> float:
        return float(np.sum(self.values(d)))

    def grad(self, d):
        return np.asarray(self._grad(np.asarray(d, dtype=float)), dtype=float)

    def hess(self, d):
        return np.asarray(self._hess(np.asarray(d, dtype=float)), dtype=float)

    def inv_grad(self, x):
        if self._inv is not None:
            return np.asarray(self._inv(np.asarray(x, dtype=float)), dtype=float)
        x = np.asarray(x, dtype=float)
        # c' is u-strongly increasing, so the root lies within |x - c'(0)|/u of 0
        g0 = self.grad(np.zeros_like(x))
        width = np.abs(x - g0) / self.u + 1.0
        lo, hi = -width, width
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            above = self.grad(mid) > x
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        return 0.5 * (lo + hi)

    def curvature_range(self, d_min, d_max, samples: int = 65):
        lo_b = np.where(np.isfinite(d_min), d_min, -1.0)
        hi_b = np.where(np.isfinite(d_max), d_max, 1.0)
        grid = np.linspace(0.0, 1.0, samples)[:, None]
        pts = lo_b + grid * (hi_b - lo_b)
        h = np.array([self.hess(row) for row in pts])
        return h.min(axis=0), h.max(axis=0)

    def scaled(self, k: float) -> ConvexCost:
        inv = None if self._inv is None else (lambda x, f=self._inv: f(np.asarray(x) / k))
        return ConvexCost(lambda d: k * self._value(d), lambda d: k * self._grad(d),
                          lambda d: k * self._hess(d), k * self.u, k * self.ell, inv)


# ---------------------------------------------------------------------------
# problem and solution


@dataclass
class OlcProblem:
    inc: IncidenceSet
    cost: QuadraticCost | ConvexCost
    d_min: np.ndarray
    d_max: np.ndarray
    p_in: np.ndarray

    def __post_init__(self):
        n = self.inc.n_bus
        self.d_min = np.broadcast_to(np.asarray(self.d_min, dtype=float), (n,)).copy()
        self.d_max = np.broadcast_to(np.asarray(self.d_max, dtype=float), (n,)).copy()
        self.p_in = np.asarray(self.p_in, dtype=float).copy()
        if self.p_in.shape != (n,):
            raise ValueError(f"p_in must have {n} entries")
        if np.any(self.d_min > self.d_max):
            raise ValueError("d_min must not exceed d_max")

    @classmethod
    def from_network(cls, inc: IncidenceSet, p_in=None, cost=None) -> OlcProblem:
        net = inc.net
        if cost is None:
            cost = QuadraticCost(net.ordered("theta"))
        if p_in is None:
            p_in = net.ordered("p_in")
        return cls(inc, cost, net.ordered("d_min"), net.ordered("d_max"), p_in)

    def with_p_in(self, p_in) -> OlcProblem:
        return OlcProblem(self.inc, self.cost, self.d_min, self.d_max, p_in)

    @property
    def flow_min(self) -> np.ndarray:
        lines = self.inc.net.lines
        return np.array([lines[k].p_min for k in self.inc.internal], dtype=float)

    @property
    def flow_max(self) -> np.ndarray:
        lines = self.inc.net.lines
        return np.array([lines[k].p_max for k in self.inc.internal], dtype=float)

    def virtual_flow(self, psi) -> np.ndarray:
        return self.inc.Bbar * (self.inc.Abar.T @ psi)

    def area_feasibility(self) -> list[tuple[int, str]]:
        bad = []
        for area, mask in self.inc.area_masks().items():
            lo, hi, need = self.d_min[mask].sum(), self.d_max[mask].sum(), self.p_in[mask].sum()
            if not lo - 1e-12 <= need <= hi + 1e-12:
                bad.append((area, f"injection change {need:.6g} pu outside controllable range "
                                  f"[{lo:.6g}, {hi:.6g}] pu"))
        return bad


@dataclass
class KktResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)

    def as_dict(self) -> dict:
        return {"stationarity": self.stationarity, "primal": self.primal, "dual": self.dual,
                "complementarity": self.complementarity}


@dataclass
class OlcSolution:
    d: np.ndarray
    psi: np.ndarray
    mu: np.ndarray
    gamma_plus: np.ndarray
    gamma_minus: np.ndarray
    sigma_plus: np.ndarray
    sigma_minus: np.ndarray
    objective: float
    kkt: KktResiduals | None = None
    methods: dict = field(default_factory=dict)

    def to_dict(self, inc: IncidenceSet | None = None) -> dict:
        out = {
            "objective": self.objective,
            "d": self.d.tolist(), "psi": self.psi.tolist(), "mu": self.mu.tolist(),
            "gamma_plus": self.gamma_plus.tolist(), "gamma_minus": self.gamma_minus.tolist(),
            "sigma_plus": self.sigma_plus.tolist(), "sigma_minus": self.sigma_minus.tolist(),
            "kkt": None if self.kkt is None else self.kkt.as_dict(),
            "methods": {str(k): v for k, v in self.methods.items()},
        }
        if inc is not None:
            out["bus_order"] = list(inc.order)
        return out


# ---------------------------------------------------------------------------
# KKT check


def check_kkt(prob: OlcProblem, sol: OlcSolution) -> KktResiduals:
    """Recompute the four KKT residual norms of the OLC program from scratch."""
    inc, cost = prob.inc, prob.cost
    d, psi, mu = sol.d, sol.psi, sol.mu
    gp, gm, sp, sm = sol.gamma_plus, sol.gamma_minus, sol.sigma_plus, sol.sigma_minus
    flow = prob.virtual_flow(psi)

    stat_d = cost.grad(d) - mu + gp - gm
    stat_psi = -inc.S @ mu + inc.Abar @ (inc.Bbar * (sp - sm))
    stationarity = _inf(np.concatenate([stat_d, stat_psi]))

    balance = d + inc.S @ psi - prob.p_in
    primal = _inf(np.concatenate([
        balance,
        np.maximum(0.0, d - prob.d_max), np.maximum(0.0, prob.d_min - d),
        np.maximum(0.0, flow - prob.flow_max), np.maximum(0.0, prob.flow_min - flow),
    ]))
    dual = _inf(np.maximum(0.0, -np.concatenate([gp, gm, sp, sm])))

    with np.errstate(invalid="ignore"):
        comp = np.concatenate([
            _gap(gp, d - prob.d_max), _gap(gm, prob.d_min - d),
            _gap(sp, flow - prob.flow_max), _gap(sm, prob.flow_min - flow),
        ])
    return KktResiduals(stationarity, primal, dual, _inf(comp))


def _gap(mult, slack):
    # zero multipliers on infinite bounds contribute nothing
    return np.where(mult == 0.0, 0.0, mult * slack)


def _inf(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.max(np.abs(x))) if x.size else 0.0


# ---------------------------------------------------------------------------
# solver


def solve_olc(prob: OlcProblem, tol: float = DEFAULT_TOL, max_iter: int = 200) -> OlcSolution:
    bad = prob.area_feasibility()
    if bad:
        area, msg = bad[0]
        raise InfeasibleAreaError(area, msg)

    inc = prob.inc
    n, ni = inc.n_bus, inc.n_internal
    d = np.zeros(n)
    psi = np.zeros(n)
    mu = np.zeros(n)
    gp, gm = np.zeros(n), np.zeros(n)
    sp, sm = np.zeros(ni), np.zeros(ni)
    methods = {}
    line_area = inc.net.ordered("area")[np.argmax(inc.Abar != 0, axis=0)] if ni else np.zeros(0)

    for area, mask in inc.area_masks().items():
        buses = np.flatnonzero(mask)
        lines = np.flatnonzero(line_area == area)
        res = _solve_area_dual(prob, buses, lines)
        flows = prob.virtual_flow(res["psi"])[lines]
        slack = max(np.max(flows - prob.flow_max[lines], initial=-np.inf),
                    np.max(prob.flow_min[lines] - flows, initial=-np.inf))
        method = "dual-bisection"
        if slack > tol:
            if not _flow_feasible(prob, buses, lines):
                raise InfeasibleAreaError(area, "load and virtual-flow limits admit no "
                                                "feasible operating point")
            res = _solve_area_ipm(prob, buses, lines, tol, max_iter)
            method = "interior-point"
        methods[area] = method
        d[buses] = res["d"][buses]
        psi[buses] = res["psi"][buses]
        mu[buses] = res["mu"][buses]
        gp[buses], gm[buses] = res["gp"][buses], res["gm"][buses]
        sp[lines], sm[lines] = res["sp"][lines], res["sm"][lines]

    sol = OlcSolution(d, psi, mu, gp, gm, sp, sm, prob.cost.value(d), methods=methods)
    sol.kkt = check_kkt(prob, sol)
    scale = max(1.0, _inf(prob.p_in), _inf(mu))
    if sol.kkt.max() > tol * scale:
        raise OracleConvergenceError(
            f"KKT residuals {sol.kkt.max():.3e} above tolerance {tol:.1e}", sol.kkt.as_dict())
    return sol


def _pin_index(inc: IncidenceSet, buses: np.ndarray) -> int:
    ids = [inc.order[k] for k in buses]
    return int(buses[int(np.argmin(ids))])


def _psi_from_balance(inc: IncidenceSet, buses: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``S psi = rhs`` on one area with the lowest-id bus pinned at zero."""
    psi = np.zeros(inc.n_bus)
    pin = _pin_index(inc, buses)
    free = buses[buses != pin]
    if free.size:
        psi[free] = np.linalg.solve(inc.S[np.ix_(free, free)], rhs[free])
    return psi


def _solve_area_dual(prob: OlcProblem, buses: np.ndarray, lines: np.ndarray) -> dict:
    cost, inc = prob.cost, prob.inc
    lo, hi = prob.d_min[buses], prob.d_max[buses]
    target = prob.p_in[buses].sum()

    def full(x):
        v = np.zeros(inc.n_bus)
        v[buses] = x
        return v

    def response(lam):
        return np.clip(full_inv(lam)[buses], lo, hi)

    def full_inv(lam):
        return cost.inv_grad(np.full(inc.n_bus, lam))

    def excess(lam):
        return response(lam).sum() - target

    # bracket the area multiplier using the marginal costs at the load limits
    probe = np.where(np.isfinite(lo), lo, -1.0), np.where(np.isfinite(hi), hi, 1.0)
    g_lo = cost.grad(full(probe[0]))[buses].min()
    g_hi = cost.grad(full(probe[1]))[buses].max()
    a, b = min(g_lo, -1.0), max(g_hi, 1.0)
    while excess(a) > 0:
        a = 2 * a - 1.0
    while excess(b) < 0:
        b = 2 * b + 1.0
    if excess(a) == 0:
        lam = a
    elif excess(b) == 0:
        lam = b
    else:
        lam = brentq(excess, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    d_area = response(lam)
    # absorb the tiny root-finding residual on a bus strictly inside its limits
    err = d_area.sum() - target
    inside = np.flatnonzero((d_area > lo) & (d_area < hi)
                            & (d_area - err > lo) & (d_area - err < hi))
    if inside.size:
        d_area[inside[0]] -= err

    d = full(d_area)
    rhs = prob.p_in - d
    psi = _psi_from_balance(inc, buses, rhs)
    g = cost.grad(d)[buses]
    mu = full(np.full(buses.size, lam))
    gp = full(np.where(d_area >= hi, np.maximum(lam - g, 0.0), 0.0))
    gm = full(np.where(d_area <= lo, np.maximum(g - lam, 0.0), 0.0))
    zeros = np.zeros(inc.n_internal)
    return {"d": d, "psi": psi, "mu": mu, "gp": gp, "gm": gm, "sp": zeros, "sm": zeros.copy()}


def _flow_feasible(prob: OlcProblem, buses: np.ndarray, lines: np.ndarray) -> bool:
    """Phase-one LP over (psi, d) restricted to one area."""
    inc = prob.inc
    S = inc.S[np.ix_(buses, buses)]
    k = buses.size
    F = inc.Bbar[lines, None] * inc.Abar[np.ix_(buses, lines)].T
    hi, lo = prob.flow_max[lines], prob.flow_min[lines]
    rows = np.vstack([F[np.isfinite(hi)], -F[np.isfinite(lo)]])
    A_ub = np.hstack([rows, np.zeros((rows.shape[0], k))])
    b_ub = np.concatenate([hi[np.isfinite(hi)], -lo[np.isfinite(lo)]])
    bounds = [(None, None)] * k + [(None if not np.isfinite(a) else a,
                                    None if not np.isfinite(b) else b)
                                   for a, b in zip(prob.d_min[buses], prob.d_max[buses])]
    res = linprog(np.zeros(2 * k), A_ub=A_ub if rows.size else None,
                  b_ub=b_ub if rows.size else None, A_eq=np.hstack([S, np.eye(k)]),
                  b_eq=prob.p_in[buses], bounds=bounds, method="highs")
    return res.status != 2


def _solve_area_ipm(prob: OlcProblem, buses: np.ndarray, lines: np.ndarray, tol: float,
                    max_iter: int) -> dict:
    """Primal-dual interior point on the area's free virtual angles."""
    inc, cost = prob.inc, prob.cost
    pin = _pin_index(inc, buses)
    free = buses[buses != pin]
    S_af = inc.S[np.ix_(buses, free)]
    F = (inc.Bbar[lines, None] * inc.Abar[np.ix_(buses, lines)].T)[:, buses != pin]
    p = prob.p_in[buses]
    lo, hi = prob.d_min[buses], prob.d_max[buses]
    flo, fhi = prob.flow_min[lines], prob.flow_max[lines]

    # inequality system G x <= h, dropping infinite bounds
    blocks = [(-S_af, hi - p, "gp"), (S_af, p - lo, "gm"), (F, fhi, "sp"), (-F, -flo, "sm")]
    rows, rhs, tags, where = [], [], [], []
    for G_k, h_k, tag in blocks:
        keep = np.isfinite(h_k)
        rows.append(G_k[keep])
        rhs.append(h_k[keep])
        tags += [tag] * int(keep.sum())
        where.append(np.flatnonzero(keep))
    G = np.vstack(rows)
    h = np.concatenate(rhs)

    def full_d(x):
        v = np.zeros(inc.n_bus)
        v[buses] = p - S_af @ x
        return v

    x = np.zeros(free.size)
    s = np.maximum(h - G @ x, 1.0)
    z = np.ones_like(s)
    m = max(h.size, 1)
    for it in range(max_iter):
        dfull = full_d(x)
        g_d = cost.grad(dfull)[buses]
        H = S_af.T @ (cost.hess(dfull)[buses][:, None] * S_af)
        grad = -S_af.T @ g_d
        r_d = grad + G.T @ z
        r_p = G @ x + s - h
        gap = float(s @ z) / m
        if (_inf(r_p) <= tol * 1e-2 and gap <= tol * 1e-2
                and _inf(r_d) <= tol * 1e-1 * max(1.0, _inf(grad))):
            break
        # past this point the Newton system is too ill-conditioned to help;
        # the active-set polish below finishes the job
        if gap <= 1e-14 and _inf(r_p) <= tol * 1e-2:
            break
        # Mehrotra predictor-corrector
        K = H + G.T @ ((z / s)[:, None] * G)
        K = 0.5 * (K + K.T)

        def direction(r_c):
            rhs_x = -r_d - G.T @ ((-r_c + z * r_p) / s)
            dx = np.linalg.solve(K, rhs_x)
            ds = -r_p - G @ dx
            dz = (-r_c - z * ds) / s
            return dx, ds, dz

        dx, ds, dz = direction(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        gap_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (gap_aff / gap) ** 3 if gap > 0 else 0.0
        dx, ds, dz = direction(s * z + ds * dz - sigma * gap)
        a = 0.99 * min(_max_step(s, ds), _max_step(z, dz))
        a = min(a, 1.0)
        x, s, z = x + a * dx, s + a * ds, z + a * dz
    else:
        raise OracleConvergenceError(
            f"interior point did not converge in {max_iter} iterations",
            {"dual": _inf(r_d), "primal": _inf(r_p), "gap": gap})

    polished = _polish(cost, full_d, buses, S_af, G, h, x, z, s)
    if polished is not None:
        x, z = polished
    else:
        z = np.where(s > np.sqrt(tol), 0.0, z)
    d = full_d(x)
    psi = np.zeros(inc.n_bus)
    psi[free] = x
    mult = {"gp": np.zeros(buses.size), "gm": np.zeros(buses.size),
            "sp": np.zeros(lines.size), "sm": np.zeros(lines.size)}
    off = 0
    for (_, _, tag), idx in zip(blocks, where):
        mult[tag][idx] = z[off: off + idx.size]
        off += idx.size

    gp = np.zeros(inc.n_bus)
    gm = np.zeros(inc.n_bus)
    gp[buses], gm[buses] = mult["gp"], mult["gm"]
    sp = np.zeros(inc.n_internal)
    sm = np.zeros(inc.n_internal)
    sp[lines], sm[lines] = mult["sp"], mult["sm"]
    mu = cost.grad(d) + gp - gm
    mu[~np.isin(np.arange(inc.n_bus), buses)] = 0.0
    return {"d": d, "psi": psi, "mu": mu, "gp": gp, "gm": gm, "sp": sp, "sm": sm}


def _polish(cost, full_d, buses, S_af, G, h, x, z, s, newton: int = 20):
    """Refine an interior-point iterate by solving on its active set exactly.

    Constraints whose slack is smaller than their multiplier are taken as active;
    the equality-constrained problem is solved by Newton steps. Returns ``None``
    when the refined point is not a KKT point of the original problem.
    """
    active = np.flatnonzero(s < z)
    GA = G[active]
    for _ in range(newton):
        dfull = full_d(x)
        H = S_af.T @ (cost.hess(dfull)[buses][:, None] * S_af)
        grad = -S_af.T @ cost.grad(dfull)[buses]
        k = active.size
        KKT = np.block([[H, GA.T], [GA, np.zeros((k, k))]])
        rhs = np.concatenate([-grad, h[active] - GA @ x])
        sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
        step = sol[:x.size]
        x = x + step
        if _inf(step) <= 1e-15 * max(1.0, _inf(x)):
            break
    dfull = full_d(x)
    grad = -S_af.T @ cost.grad(dfull)[buses]
    zA = np.linalg.lstsq(GA.T, -grad, rcond=None)[0] if active.size else np.zeros(0)
    z_new = np.zeros(G.shape[0])
    z_new[active] = zA
    scale = max(1.0, _inf(grad))
    if (np.any(zA < -1e-12 * scale) or np.any(G @ x - h > 1e-12 * max(1.0, _inf(h)))
            or _inf(grad + G.T @ z_new) > 1e-11 * scale):
        return None
    return x, np.maximum(z_new, 0.0)


def _max_step(v, dv) -> float:
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


# ---------------------------------------------------------------------------
# equilibrium drift


@dataclass
class DriftReport:
    times: np.ndarray
    rates: np.ndarray  # per-interval drift rate in the chosen metric
    d_rates: np.ndarray  # per-interval per-bus d* derivative
    solutions: list

    @property
    def sup(self) -> float:
        return float(np.max(self.rates)) if self.rates.size else 0.0


def quotient_point(prob: OlcProblem, sol: OlcSolution) -> np.ndarray:
    """Optimum in the coordinates (d, mu, A P, S psi) where it is unique."""
    s_psi = prob.inc.S @ sol.psi
    # at the optimum A P* = S psi* (frequency is zero)
    return np.concatenate([sol.d, sol.mu, s_psi, s_psi])


def equilibrium_drift(prob_at: Callable[[float], OlcProblem], times: Sequence[float],
                      metric: Callable | None = None, tol: float = DEFAULT_TOL) -> DriftReport:
    """Finite-difference drift rate of the instantaneous optimum.

    ``metric(prob, sol_a, sol_b)`` returns the distance between two optima;
    by default the Euclidean distance in :func:`quotient_point` coordinates.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a strictly increasing grid with at least two points")
    probs = [prob_at(float(t)) for t in times]
    sols = [solve_olc(p, tol=tol) for p in probs]
    rates, d_rates = [], []
    for k in range(times.size - 1):
        dt = times[k + 1] - times[k]
        if metric is None:
            dist = np.linalg.norm(quotient_point(probs[k + 1], sols[k + 1])
                                  - quotient_point(probs[k], sols[k]))
        else:
            dist = metric(probs[k], sols[k], sols[k + 1])
        rates.append(dist / dt)
        d_rates.append((sols[k + 1].d - sols[k].d) / dt)
    return DriftReport(times, np.array(rates), np.array(d_rates), sols)
