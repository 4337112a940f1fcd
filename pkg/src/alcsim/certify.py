"""Lyapunov certificates and convergence bounds for the reduced (limit-free) dynamics.

The reduced state is ``z = (d, P, psi, omega_G, mu)``; load-bus frequencies
are eliminated through the algebraic balance. With quadratic-in-error form
``zdot = Xi W(d) (z - z*)`` the certificate is ``V = (z - z*)^T Q (z - z*)``
with ``-W^T Q - Q W - rho Q >= 0``, ``rho = beta^2 / alpha``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .dynamics import ClosedLoop, ControlGains
from .netmodel import IncidenceSet
from .olc import OlcProblem, OlcSolution, QuadraticCost, ConvexCost

PSD_TOL = 1e-9
KERNEL_TOL = 1e-8


class CertificationError(ValueError):
    """The configuration cannot be certified (or the search found nothing)."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# reduced dynamics


class ReducedSystem:
    """Limit-free closed loop written in the multiplier coordinates.

    ``xi`` holds the diagonal step sizes in state order; by default they are
    the plant-matched values ``(eps_d, B, eps_psi, 1/M, eps_mu)``.
    """

    def __init__(self, inc: IncidenceSet, cost, gains: ControlGains | None = None):
        self.inc, self.cost = inc, cost
        gains = gains or ControlGains.uniform(1.0)
        self.gains = gains
        net = inc.net
        n, g, e = inc.n_bus, inc.n_gen, inc.n_line
        self.n, self.g, self.e = n, g, e
        self.D = net.ordered("D")
        self.M_G = net.ordered("M")[:g]
        D_L = self.D[g:]
        self.A_G, self.A_L, self.S = inc.A_G, inc.A_L, inc.S
        self.I_o = np.eye(g, n)
        self.F1 = np.diag(np.concatenate([np.zeros(g), 1.0 / D_L]))
        self.F2 = np.hstack([np.zeros((e, g)), self.A_L.T / D_L])
        self.F3 = self.A_L.T @ (self.A_L / D_L[:, None])
        self.D_G = np.diag(self.D[:g])
        sizes = [n, e, n, g, n]
        off = np.concatenate([[0], np.cumsum(sizes)])
        self.slices = {k: slice(int(off[i]), int(off[i + 1]))
                       for i, k in enumerate(("d", "P", "psi", "omega_G", "mu"))}
        self.size = int(off[-1])

        def vec(v, size):
            return np.broadcast_to(np.asarray(v, dtype=float), (size,))

        self.xi = np.concatenate([vec(gains.eps_d, n), inc.B, vec(gains.eps_psi, n),
                                  1.0 / self.M_G, vec(gains.eps_mu, n)])

    @classmethod
    def from_model(cls, model: ClosedLoop) -> ReducedSystem:
        return cls(model.inc, model.cost, model.gains)

    @property
    def is_identity(self) -> bool:
        return bool(np.allclose(self.xi, 1.0, rtol=0, atol=1e-12))

    def split(self, z):
        return {k: z[..., s] for k, s in self.slices.items()}

    def omega_load(self, z, p_in):
        s = self.split(z)
        g = self.g
        return (-s["d"][g:] - self.A_L @ s["P"] + p_in[g:]) / self.D[g:]

    def derivative(self, z, p_in):
        """Right-hand side evaluated from the component equations."""
        s = self.split(z)
        w = np.concatenate([s["omega_G"], self.omega_load(z, p_in)])
        g = self.g
        dd = -self.cost.grad(s["d"]) + w + s["mu"]
        dP = self.inc.A.T @ w
        dpsi = self.S @ s["mu"]
        dw = p_in[:g] - s["d"][:g] - self.D[:g] * s["omega_G"] - self.A_G @ s["P"]
        dmu = p_in - s["d"] - self.S @ s["psi"]
        return self.xi * np.concatenate([dd, dP, dpsi, dw, dmu])

    def W(self, C) -> np.ndarray:
        """Block matrix of the error dynamics for curvature diagonal ``C``."""
        C = np.diag(np.asarray(C, dtype=float))
        n, e, g = self.n, self.e, self.g
        Z = np.zeros
        I = np.eye(n)
        return np.block([
            [-C - self.F1, -self.F2.T, Z((n, n)), self.I_o.T, I],
            [-self.F2, -self.F3, Z((e, n)), self.A_G.T, Z((e, n))],
            [Z((n, n)), Z((n, e)), Z((n, n)), Z((n, g)), self.S],
            [-self.I_o, -self.A_G, Z((g, n)), -self.D_G, Z((g, n))],
            [-I, Z((n, e)), -self.S, Z((n, g)), Z((n, n))],
        ])

    def from_solution(self, sol: OlcSolution) -> np.ndarray:
        """Reduced equilibrium for an optimum with no binding limits."""
        P = np.zeros(self.e)
        P[self.inc.internal] = self.inc.Bbar * (self.inc.Abar.T @ sol.psi)
        return np.concatenate([sol.d, P, sol.psi, np.zeros(self.g), sol.mu])

    def from_dynamics(self, model: ClosedLoop, z_alc, p_in) -> np.ndarray:
        """Convert a closed-loop state (``x = r``) into reduced coordinates."""
        s = model.layout.split(z_alc)
        w = model.omega(s["omega_G"], s["d"], s["P"], p_in)
        mu = model.mu_from_r(w, s["x"])
        return np.concatenate([s["d"], s["P"], s["psi"], s["omega_G"], mu])


def reduced_derivative(sys: ReducedSystem, z, p_in):
    return sys.derivative(np.asarray(z, dtype=float), np.asarray(p_in, dtype=float))


def integrate_reduced(sys: ReducedSystem, z0, p_in_at, h: float, T: float,
                      decimation: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Classical RK4 on the reduced dynamics; returns stored times and states."""
    n_steps = int(round(T / h))
    z = np.asarray(z0, dtype=float).copy()
    times, rows = [0.0], [z.copy()]
    for k in range(n_steps):
        t = k * h
        p0, pm, p1 = (np.asarray(p_in_at(s), dtype=float) for s in (t, t + h / 2, t + h))
        k1 = sys.derivative(z, p0)
        k2 = sys.derivative(z + 0.5 * h * k1, pm)
        k3 = sys.derivative(z + 0.5 * h * k2, pm)
        k4 = sys.derivative(z + h * k3, p1)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if (k + 1) % decimation == 0 or k + 1 == n_steps:
            times.append((k + 1) * h)
            rows.append(z.copy())
    return np.array(times), np.array(rows)


# ---------------------------------------------------------------------------
# Q


@dataclass
class LyapunovCertificate:
    alpha: float
    beta: float
    Q: np.ndarray
    rho: float
    psd_margin: float
    kernel_basis: np.ndarray
    r_min_eig: float | None = None
    notes: list = field(default_factory=list)

    @property
    def kernel_dim(self) -> int:
        return int(self.kernel_basis.shape[1])

    def norm(self, v) -> float:
        """``||v||_Q``; tiny negative quadratic forms from rounding map to zero."""
        return math.sqrt(max(float(v @ self.Q @ v), 0.0))

    def report(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "rho": self.rho,
                "q_min_eig": self.psd_margin, "r_min_eig_over_samples": self.r_min_eig,
                "kernel_dim": self.kernel_dim,
                "pass": bool(self.psd_margin >= -PSD_TOL
                             and (self.r_min_eig is None or self.r_min_eig >= -PSD_TOL))}


def _q_matrix(inc: IncidenceSet, alpha: float, beta: float) -> np.ndarray:
    # The (d, mu) and (psi, mu) couplings carry the signs that match the error
    # dynamics zdot = W (z - z*) as assembled in ReducedSystem.W and reproduce
    # the closed-form expansion in build_R_blocks.  With +I and -beta S instead,
    # the (mu, mu) block of R is -2I + 2 beta S S - beta^2 I, negative on ker S
    # for every beta, so no certificate could exist.
    n, e, g = inc.n_bus, inc.n_line, inc.n_gen
    Z = np.zeros
    I = np.eye(n)
    PA = inc.U_A @ inc.U_A.T
    PS = inc.U_S @ inc.U_S.T
    A_G = inc.A_G
    return np.block([
        [alpha * I, Z((n, e)), Z((n, n)), Z((n, g)), -I],
        [Z((e, n)), alpha * PA, Z((e, n)), A_G.T, Z((e, n))],
        [Z((n, n)), Z((n, e)), alpha * PS, Z((n, g)), beta * inc.S],
        [Z((g, n)), A_G, Z((g, n)), alpha * np.eye(g), Z((g, n))],
        [-I, Z((n, e)), beta * inc.S, Z((n, g)), alpha * I],
    ])


def build_Q(inc: IncidenceSet, alpha: float, beta: float) -> LyapunovCertificate:
    if not (alpha > 0 and beta > 0):
        raise ValueError("alpha and beta must be positive")
    Q = _q_matrix(inc, alpha, beta)
    return _certificate(Q, alpha, beta)


def _certificate(Q, alpha, beta) -> LyapunovCertificate:
    ev, vec = np.linalg.eigh(0.5 * (Q + Q.T))
    kernel = vec[:, ev < PSD_TOL]
    return LyapunovCertificate(alpha, beta, Q, beta ** 2 / alpha, float(ev[0]), kernel)


def lyapunov_value(cert: LyapunovCertificate, z, z_star) -> float:
    dz = np.asarray(z, dtype=float) - np.asarray(z_star, dtype=float)
    if dz.shape != (cert.Q.shape[0],):
        raise ValueError("state dimension does not match the certificate")
    return float(dz @ cert.Q @ dz)


@dataclass
class KernelReport:
    passed: bool
    kernel_dim: int
    expected_dim: int
    eig_to_set: float  # worst violation of the set conditions by a numerical kernel vector
    set_to_kernel: float  # worst ||Q v|| / ||v|| over the constructed basis
    construction: float  # deviation from a fresh assembly
    symmetry: float
    messages: list = field(default_factory=list)


def equilibrium_kernel_basis(inc: IncidenceSet) -> np.ndarray:
    """Basis of directions that leave every quotient coordinate unchanged."""
    n, e, g = inc.n_bus, inc.n_line, inc.n_gen
    size = 3 * n + e + g
    kA = linalg.null_space(inc.A)
    kS = linalg.null_space(inc.S)
    cols = []
    for v in kA.T:
        z = np.zeros(size)
        z[n:n + e] = v
        cols.append(z)
    for v in kS.T:
        z = np.zeros(size)
        z[n + e:2 * n + e] = v
        cols.append(z)
    return np.array(cols).T if cols else np.zeros((size, 0))


def check_Q_kernel(cert: LyapunovCertificate, inc: IncidenceSet) -> KernelReport:
    """Check that ``ker Q`` is exactly the set ``{dd = 0, dw = 0, dmu = 0, A dP = 0, S dpsi = 0}``."""
    n, e, g = inc.n_bus, inc.n_line, inc.n_gen
    Q = cert.Q
    msgs = []
    fresh = _q_matrix(inc, cert.alpha, cert.beta)
    construction = float(np.max(np.abs(Q - fresh))) if Q.shape == fresh.shape else math.inf
    symmetry = float(np.max(np.abs(Q - Q.T)))
    ev, vec = np.linalg.eigh(0.5 * (Q + Q.T))
    K = vec[:, ev < PSD_TOL]
    worst = 0.0
    for v in K.T:
        parts = [v[:n], v[n + e + n:n + e + n + g], v[n + e + n + g:],
                 inc.A @ v[n:n + e], inc.S @ v[n + e:n + e + n]]
        worst = max(worst, max(float(np.max(np.abs(p))) if p.size else 0.0 for p in parts))
    basis = equilibrium_kernel_basis(inc)
    back = 0.0
    for v in basis.T:
        back = max(back, float(np.linalg.norm(Q @ v) / np.linalg.norm(v)))
    if construction > 1e-12 * max(1.0, cert.alpha):
        msgs.append(f"Q differs from its defining blocks by {construction:.3g}")
    if symmetry > 0:
        msgs.append(f"Q is not symmetric (max asymmetry {symmetry:.3g})")
    if worst > KERNEL_TOL:
        msgs.append(f"a null vector of Q violates the set conditions by {worst:.3g}")
    if back > KERNEL_TOL:
        msgs.append(f"a set direction is not annihilated by Q (residual {back:.3g})")
    if K.shape[1] != basis.shape[1]:
        msgs.append(f"kernel dimension {K.shape[1]} differs from expected {basis.shape[1]}")
    if ev[0] < -PSD_TOL:
        msgs.append(f"Q has a negative eigenvalue {ev[0]:.3g}")
    return KernelReport(not msgs, int(K.shape[1]), int(basis.shape[1]), worst, back,
                        construction, symmetry, msgs)


# ---------------------------------------------------------------------------
# R


def _require_identity(sys: ReducedSystem):
    if not sys.is_identity:
        raise CertificationError(
            "certificates are only defined for unit step sizes (eps_d = eps_psi = eps_mu = 1, "
            "M = 1 at generators, B = 1 on all lines); this configuration has others")


def build_W(sys: ReducedSystem, d) -> np.ndarray:
    return sys.W(sys.cost.hess(np.asarray(d, dtype=float)))


def build_R(sys: ReducedSystem, cert: LyapunovCertificate, d=None, C=None) -> tuple[np.ndarray, float]:
    """``R = -W^T Q - Q W - rho Q`` at load ``d`` (or curvature diagonal ``C``)."""
    _require_identity(sys)
    if C is None:
        if d is None:
            raise ValueError("give d or C")
        C = sys.cost.hess(np.asarray(d, dtype=float))
    W = sys.W(C)
    R = -W.T @ cert.Q - cert.Q @ W - cert.rho * cert.Q
    R = 0.5 * (R + R.T)
    return R, float(np.linalg.eigvalsh(R)[0])


def build_R_blocks(sys: ReducedSystem, C, alpha: float, beta: float) -> np.ndarray:
    """Closed-form block expansion of ``R``; an independent route to :func:`build_R`."""
    inc = sys.inc
    n, e, g = sys.n, sys.e, sys.g
    C = np.diag(np.asarray(C, dtype=float))
    I, Ig = np.eye(n), np.eye(g)
    S, A_G, F1, F2, F3, I_o = sys.S, sys.A_G, sys.F1, sys.F2, sys.F3, sys.I_o
    D_G = sys.D_G
    PA, PS = inc.U_A @ inc.U_A.T, inc.U_S @ inc.U_S.T
    b2a = beta ** 2 / alpha
    L_d = 2 * alpha * C + 2 * alpha * F1 - 2 * I - beta ** 2 * I
    L_P = 2 * alpha * F3 + 2 * A_G.T @ A_G - beta ** 2 * PA
    L_psi = 2 * beta * S @ S - beta ** 2 * PS
    L_w = 2 * alpha * D_G - 2 * A_G @ A_G.T - beta ** 2 * Ig
    L_mu = 2 * I - 2 * beta * S @ S - beta ** 2 * I
    L_Pd = 2 * alpha * F2 + A_G.T @ I_o
    L_dmu = -C - F1 + b2a * I
    L_wP = D_G @ A_G + A_G @ F3.T - b2a * A_G
    Z = np.zeros
    return np.block([
        [L_d, L_Pd.T, (beta - 1) * S, F2.T @ A_G.T, L_dmu],
        [L_Pd, L_P, Z((e, n)), L_wP.T, -F2],
        [(beta - 1) * S, Z((n, e)), L_psi, Z((n, g)), -beta ** 3 / alpha * S],
        [A_G @ F2, L_wP, Z((g, n)), L_w, I_o],
        [L_dmu, -F2.T, -beta ** 3 / alpha * S, I_o.T, L_mu],
    ])


def curvature_samples(cost, d_min, d_max, max_vertices: int = 10,
                      rng: np.random.Generator | int | None = 0) -> np.ndarray:
    """Per-bus curvature vertices plus the midpoint; random vertices past ``max_vertices`` buses.

    ``R`` is affine in each curvature entry, so PSD at every vertex of the box
    of per-bus curvature ranges implies PSD on the whole box.
    """
    lo, hi = cost.curvature_range(np.asarray(d_min, dtype=float), np.asarray(d_max, dtype=float))
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    n = lo.size
    varying = np.flatnonzero(hi - lo > 1e-12 * np.maximum(1.0, np.abs(hi)))
    mid = 0.5 * (lo + hi)
    rows = [mid]
    if varying.size:
        if varying.size <= max_vertices:
            corners = itertools.product((0, 1), repeat=varying.size)
            picks = np.array(list(corners), dtype=bool)
        else:
            gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
            picks = gen.integers(0, 2, size=(2 ** max_vertices, varying.size)).astype(bool)
        for p in picks:
            c = lo.copy()
            c[varying] = np.where(p, hi[varying], lo[varying])
            rows.append(c)
    return np.unique(np.array(rows), axis=0) if n else np.array(rows)


def min_eig_R(sys: ReducedSystem, cert: LyapunovCertificate, samples: np.ndarray) -> float:
    return min(build_R(sys, cert, C=c)[1] for c in samples)


def select_alpha_beta(sys: ReducedSystem, d_min, d_max,
                      alphas=None, betas=None, samples=None) -> LyapunovCertificate:
    """Grid search for ``(alpha, beta)`` with ``Q >= 0`` and ``R >= 0`` on the samples.

    For each alpha the betas are scanned from the largest down and the first
    accepted one kept; the accepted pair with the largest ``rho`` is returned.
    """
    _require_identity(sys)
    if not sys.cost.u > 0:
        raise CertificationError("costs must be strongly convex (u > 0)")
    alphas = np.logspace(0, 4, 33) if alphas is None else np.asarray(alphas, dtype=float)
    betas = np.logspace(-4, 0, 33) if betas is None else np.asarray(betas, dtype=float)
    if samples is None:
        samples = curvature_samples(sys.cost, d_min, d_max)
    best = None
    tried = 0
    worst_seen = {}
    for a in np.sort(alphas):
        for b in np.sort(betas)[::-1]:
            tried += 1
            cert = build_Q(sys.inc, a, b)
            if cert.psd_margin < -PSD_TOL:
                worst_seen[(a, b)] = ("Q", cert.psd_margin)
                continue
            r = min_eig_R(sys, cert, samples)
            if r < -PSD_TOL:
                worst_seen[(a, b)] = ("R", r)
                continue
            cert.r_min_eig = r
            if best is None or cert.rho > best.rho:
                best = cert
            break
    if best is None:
        closest = max(worst_seen.items(), key=lambda kv: kv[1][1]) if worst_seen else None
        raise CertificationError(
            f"no (alpha, beta) accepted among {tried} candidates",
            {"tried": tried, "closest": None if closest is None else
             {"alpha": float(closest[0][0]), "beta": float(closest[0][1]),
              "matrix": closest[1][0], "min_eig": float(closest[1][1])}})
    best.notes.append(f"{tried} candidates examined, {len(samples)} curvature samples")
    return best


def certificate_json(cert: LyapunovCertificate, kernel: KernelReport | None = None) -> str:
    rep = cert.report()
    if kernel is not None:
        rep["pass"] = bool(rep["pass"] and kernel.passed)
    return json.dumps(rep, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# equilibrium set and rates


@dataclass
class EquilibriumSet:
    """An optimum together with the projectors that quotient out its non-unique parts."""

    inc: IncidenceSet
    d: np.ndarray
    P: np.ndarray
    psi: np.ndarray
    mu: np.ndarray
    omega: np.ndarray

    @classmethod
    def from_solution(cls, inc: IncidenceSet, sol: OlcSolution) -> EquilibriumSet:
        P = np.zeros(inc.n_line)
        P[inc.internal] = inc.Bbar * (inc.Abar.T @ sol.psi)
        return cls(inc, sol.d.copy(), P, sol.psi.copy(), sol.mu.copy(), np.zeros(inc.n_bus))

    def distance(self, d, P, psi, mu, omega) -> float:
        """Euclidean distance to the set: exact parts plus row-space projections."""
        inc = self.inc
        dP = inc.U_A.T @ (np.asarray(P) - self.P)
        dpsi = inc.U_S.T @ (np.asarray(psi) - self.psi)
        parts = [np.asarray(d) - self.d, np.asarray(omega) - self.omega,
                 np.asarray(mu) - self.mu, dP, dpsi]
        return float(math.sqrt(sum(float(p @ p) for p in parts)))

    def fixed_point_residual(self, sys: ReducedSystem, p_in) -> float:
        z = np.concatenate([self.d, self.P, self.psi, self.omega[:sys.g], self.mu])
        return float(np.max(np.abs(sys.derivative(z, np.asarray(p_in, dtype=float)))))


def distance_to_set(eq: EquilibriumSet, d, P, psi, mu, omega) -> float:
    return eq.distance(d, P, psi, mu, omega)


@dataclass
class RateFit:
    C0: float
    rho0: float
    r2: float
    n: int


def fit_exponential_rate(times, dist, window: tuple[float, float] | None = None) -> RateFit:
    """Least-squares line through ``(t, ln dist)``; the slope is ``-rho0``."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(dist, dtype=float)
    keep = y > 0
    if window is not None:
        keep &= (t >= window[0]) & (t <= window[1])
    if keep.sum() < 10:
        raise ValueError(f"need at least 10 positive samples in the window, got {int(keep.sum())}")
    fit = stats.linregress(t[keep], np.log(y[keep]))
    return RateFit(float(math.exp(fit.intercept)), float(-fit.slope), float(fit.rvalue ** 2),
                   int(keep.sum()))


# ---------------------------------------------------------------------------
# bounds


def damping_interval(ell: float, D_min: float) -> tuple[float, float]:
    """Open interval of damping offsets under which the stationary controller stays exact."""
    if not (ell > 0 and D_min > 0):
        raise ValueError("need ell > 0 and D_min > 0")
    dp = 1.0 / ell
    root = math.sqrt(dp * dp + dp * D_min)
    return 2.0 * (dp - root), 2.0 * (dp + root)


@dataclass
class TrackingBoundParams:
    b_z: float
    b_g: float
    rho: float
    init: float

    def __post_init__(self):
        if min(self.b_z, self.b_g, self.init) < 0 or not self.rho > 0:
            raise ValueError("bound parameters must be nonnegative with rho > 0")

    @property
    def asymptote(self) -> float:
        return 2.0 * (self.b_z + self.b_g) / self.rho


def tracking_bound(params: TrackingBoundParams, t):
    decay = np.exp(-0.5 * params.rho * np.asarray(t, dtype=float))
    return decay * params.init + (1.0 - decay) * params.asymptote


def q_norm_drift(sys: ReducedSystem, cert: LyapunovCertificate):
    """Metric for :func:`olc.equilibrium_drift` measuring optimum motion in ``||.||_Q``."""
    def metric(prob: OlcProblem, a: OlcSolution, b: OlcSolution) -> float:
        return cert.norm(sys.from_solution(b) - sys.from_solution(a))
    return metric
