"""Closed-loop integration: linear swing plant plus the distributed load controller.

Three controller forms share one state layout ``[omega_G, P, d, psi, gamma+,
gamma-, x, sigma+, sigma-]``:

``alc``
    the deployable controller; ``x`` is the auxiliary integrator ``r`` and
    only local frequency / flow measurements are used.
``gradient``
    the reference primal-dual flow; ``x`` is the virtual-balance multiplier
    ``mu`` and the true injection change is used.
``stationary``
    ``d`` solved algebraically from ``(c')^{-1}(omega + mu)``; load-limit
    multipliers are frozen at zero.

Trajectories are always stored in the ``alc`` representation (``x = r``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .netmodel import IncidenceSet
from .olc import ConvexCost, OlcProblem, QuadraticCost

MODES = ("alc", "gradient", "stationary")
INTEGRATORS = ("rk4", "euler")
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, t: float, message: str = "state diverged"):
        super().__init__(f"{message} at t = {t:.6g} s")
        self.t = t


def positive_projection(x, y):
    """``[x]^+_y``: ``x`` when ``x > 0`` or ``y > 0``, else 0."""
    if np.any(np.asarray(y) < 0):
        raise ValueError("positive projection needs y >= 0")
    return np.where((np.asarray(x) > 0) | (np.asarray(y) > 0), x, 0.0) + 0.0


def _pp(x, y):
    return np.where((x > 0) | (y > 0), x, 0.0)


# ---------------------------------------------------------------------------
# gains


@dataclass
class ControlGains:
    """Controller step sizes.

    Scalars apply to every bus/line; arrays are given in internal order. The
    frequency and flow step sizes are not free: they equal ``1/M`` and ``B``
    so that the plant itself performs those gradient steps.
    """

    eps_d: float | np.ndarray = 0.5
    eps_psi: float | np.ndarray = 0.5
    eps_gamma_plus: float | np.ndarray = 0.5
    eps_gamma_minus: float | np.ndarray = 0.5
    eps_mu: float | np.ndarray = 0.5
    eps_sigma_plus: float | np.ndarray = 0.5
    eps_sigma_minus: float | np.ndarray = 0.5
    K: float | np.ndarray = 0.5
    control_period: float = 0.25
    damping_scale: float | None = None
    damping_offset: float | np.ndarray | None = None

    def __post_init__(self):
        for name in ("eps_d", "eps_psi", "eps_gamma_plus", "eps_gamma_minus", "eps_mu",
                     "eps_sigma_plus", "eps_sigma_minus", "K"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be positive")
        if not self.control_period > 0:
            raise ValueError("control_period must be positive")
        if self.damping_scale is not None and self.damping_offset is not None:
            raise ValueError("give either damping_scale or damping_offset, not both")

    @classmethod
    def uniform(cls, eps: float, K: float | None = None, **kw) -> ControlGains:
        K = eps if K is None else K
        return cls(eps, eps, eps, eps, eps, eps, eps, K, **kw)

    def damping_used(self, D: np.ndarray) -> np.ndarray:
        if self.damping_scale is not None:
            return self.damping_scale * D
        if self.damping_offset is not None:
            return D + np.asarray(self.damping_offset, dtype=float)
        return D.copy()

    def is_identity(self, inc: IncidenceSet) -> bool:
        """True when every step size of the reduced dynamics equals one."""
        net = inc.net
        scalars = [self.eps_d, self.eps_psi, self.eps_mu]
        return (all(np.allclose(s, 1.0) for s in scalars)
                and np.allclose(net.ordered("M")[: inc.n_gen], 1.0)
                and np.allclose(inc.B, 1.0))

    def to_dict(self) -> dict:
        def plain(v):
            return v.tolist() if isinstance(v, np.ndarray) else v
        return {k: plain(v) for k, v in self.__dict__.items()}


# ---------------------------------------------------------------------------
# state layout


@dataclass(frozen=True)
class Layout:
    n_gen: int
    n_bus: int
    n_line: int
    n_internal: int

    def __post_init__(self):
        sizes = [("omega_G", self.n_gen), ("P", self.n_line), ("d", self.n_bus),
                 ("psi", self.n_bus), ("gamma_plus", self.n_bus), ("gamma_minus", self.n_bus),
                 ("x", self.n_bus), ("sigma_plus", self.n_internal),
                 ("sigma_minus", self.n_internal)]
        off = 0
        sl = {}
        for name, n in sizes:
            sl[name] = slice(off, off + n)
            off += n
        object.__setattr__(self, "slices", sl)
        object.__setattr__(self, "size", off)
        object.__setattr__(self, "plant", slice(0, self.n_gen + self.n_line))
        object.__setattr__(self, "controller", slice(self.n_gen + self.n_line, off))
        duals = np.zeros(off, dtype=bool)
        for name in ("gamma_plus", "gamma_minus", "sigma_plus", "sigma_minus"):
            duals[sl[name]] = True
        object.__setattr__(self, "duals", duals)

    def split(self, z: np.ndarray) -> dict[str, np.ndarray]:
        return {k: z[..., s] for k, s in self.slices.items()}

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)


# ---------------------------------------------------------------------------
# model


def omega_load(A_L, d_L, P, p_in_L, D_L):
    """Algebraic load-bus frequency from the instantaneous power balance."""
    return (-np.asarray(d_L) - A_L @ P + p_in_L) / D_L


class ClosedLoop:
    """Plant and controller vector fields for one network and gain set."""

    def __init__(self, inc: IncidenceSet, cost: QuadraticCost | ConvexCost,
                 d_min, d_max, gains: ControlGains):
        self.inc, self.cost, self.gains = inc, cost, gains
        net = inc.net
        n, g = inc.n_bus, inc.n_gen
        self.layout = Layout(g, n, inc.n_line, inc.n_internal)
        self.D = net.ordered("D")
        self.D_used = gains.damping_used(self.D)
        self.delta_a = self.D_used - self.D
        self.M_G = net.ordered("M")[:g]
        self.d_min = np.broadcast_to(np.asarray(d_min, dtype=float), (n,)).copy()
        self.d_max = np.broadcast_to(np.asarray(d_max, dtype=float), (n,)).copy()
        lines = net.lines
        self.f_min = np.array([lines[k].p_min for k in inc.internal], dtype=float)
        self.f_max = np.array([lines[k].p_max for k in inc.internal], dtype=float)
        self.d_min_ok, self.d_max_ok = np.isfinite(self.d_min), np.isfinite(self.d_max)
        self.f_min_ok, self.f_max_ok = np.isfinite(self.f_min), np.isfinite(self.f_max)
        self._d_min = np.where(self.d_min_ok, self.d_min, 0.0)
        self._d_max = np.where(self.d_max_ok, self.d_max, 0.0)
        self._f_min = np.where(self.f_min_ok, self.f_min, 0.0)
        self._f_max = np.where(self.f_max_ok, self.f_max, 0.0)

        def vec(v, size):
            return np.broadcast_to(np.asarray(v, dtype=float), (size,)).copy()

        self.eps_d = vec(gains.eps_d, n)
        self.eps_psi = vec(gains.eps_psi, n)
        self.eps_gp = vec(gains.eps_gamma_plus, n)
        self.eps_gm = vec(gains.eps_gamma_minus, n)
        self.eps_mu = vec(gains.eps_mu, n)
        self.eps_sp = vec(gains.eps_sigma_plus, inc.n_internal)
        self.eps_sm = vec(gains.eps_sigma_minus, inc.n_internal)
        self.K = vec(gains.K, n)
        self.eps_omega = np.zeros(n)
        self.eps_omega[:g] = 1.0 / self.M_G
        # mu = c_w * omega + c_r * r ;  eta = 1 + c_w
        self.c_w = np.zeros(n)
        self.c_w[:g] = self.eps_mu[:g] / self.eps_omega[:g]
        self.c_r = self.eps_mu / self.K
        self.eta = 1.0 + self.c_w
        self.Abar_B = inc.Abar * inc.Bbar
        self.BAbarT = inc.Bbar[:, None] * inc.Abar.T
        self.BAT = inc.B[:, None] * inc.A.T

    @classmethod
    def from_problem(cls, prob: OlcProblem, gains: ControlGains) -> ClosedLoop:
        return cls(prob.inc, prob.cost, prob.d_min, prob.d_max, gains)

    # -- plant ------------------------------------------------------------

    def omega_load(self, d, P, p_in):
        g = self.inc.n_gen
        return omega_load(self.inc.A_L, d[g:], P, p_in[g:], self.D[g:])

    def omega(self, omega_G, d, P, p_in):
        return np.concatenate([omega_G, self.omega_load(d, P, p_in)])

    def plant_derivative(self, omega_G, P, d, p_in):
        """Swing and line-flow derivatives; returns ``(d omega_G/dt, dP/dt, omega)``."""
        g = self.inc.n_gen
        w = self.omega(omega_G, d, P, p_in)
        AP = self.inc.A @ P
        dw = (p_in[:g] - d[:g] - self.D[:g] * omega_G - AP[:g]) / self.M_G
        dP = self.BAT @ w
        return dw, dP, w

    # -- controllers ------------------------------------------------------

    def mu_from_r(self, omega, r):
        return self.c_w * omega + self.c_r * r

    def r_from_mu(self, omega, mu):
        return (mu - self.c_w * omega) / self.c_r

    def _dual_raw(self, d, psi):
        """Ungated multiplier rates (constraint violations times step size)."""
        dgp = np.where(self.d_max_ok, self.eps_gp * (d - self._d_max), 0.0)
        dgm = np.where(self.d_min_ok, self.eps_gm * (self._d_min - d), 0.0)
        vf = self.BAbarT @ psi
        dsp = np.where(self.f_max_ok, self.eps_sp * (vf - self._f_max), 0.0)
        dsm = np.where(self.f_min_ok, self.eps_sm * (self._f_min - vf), 0.0)
        return dgp, dgm, dsp, dsm

    def gate(self, z, dz):
        """Apply the positive projection to the multiplier rows of ``dz``."""
        m = self.layout.duals
        out = dz.copy()
        out[m] = _pp(dz[m], z[m])
        return out

    def controller_derivative(self, c: dict, omega_meas, P_meas, gate: bool = True):
        """ALC update from measured frequency and flows; ``c`` holds controller parts."""
        d, psi, r = c["d"], c["psi"], c["x"]
        gp, gm, sp, sm = c["gamma_plus"], c["gamma_minus"], c["sigma_plus"], c["sigma_minus"]
        mu = self.mu_from_r(omega_meas, r)
        dd = self.eps_d * (-self.cost.grad(d) + self.eta * omega_meas + self.c_r * r - gp + gm)
        dpsi = self.eps_psi * (self.inc.S @ mu - self.Abar_B @ (sp - sm))
        dgp, dgm, dsp, dsm = self._dual_raw(d, psi)
        if gate:
            dgp, dgm, dsp, dsm = _pp(dgp, gp), _pp(dgm, gm), _pp(dsp, sp), _pp(dsm, sm)
        dr = self.K * (self.D_used * omega_meas + self.inc.A @ P_meas - self.inc.S @ psi)
        return {"d": dd, "psi": dpsi, "gamma_plus": dgp, "gamma_minus": dgm, "x": dr,
                "sigma_plus": dsp, "sigma_minus": dsm}

    def stationary_load(self, omega_meas, r):
        """Algebraic load ``(c')^{-1}(eta omega + c_r r)`` from measured frequency."""
        return self.cost.inv_grad(self.eta * omega_meas + self.c_r * r)

    def stationary_solve(self, omega_G, P, r, p_in, noise_w=None):
        """Joint solve of the algebraic load and the load-bus frequency.

        At load buses ``D w + d(w + xi + mu) = p_in - A_L P`` couples the two;
        the left side is strictly increasing in ``w``.
        """
        g, n = self.inc.n_gen, self.inc.n_bus
        xi = np.zeros(n) if noise_w is None else noise_w
        mu = self.c_r * r
        arg = np.zeros(n)
        arg[:g] = self.eta[:g] * (omega_G + xi[:g]) + mu[:g]
        b = p_in[g:] - self.inc.A_L @ P
        D_L = self.D[g:]
        shift = xi[g:] + mu[g:]
        if isinstance(self.cost, QuadraticCost):
            k = 1.0 / (2.0 * self.cost.theta[g:])
            wL = (b - k * shift) / (D_L + k)
        else:
            def resid(w):
                full = arg.copy()
                full[g:] = w + shift
                return D_L * w + self.cost.inv_grad(full)[g:] - b
            f0 = resid(np.zeros_like(b))
            lo, hi = -np.abs(f0) / D_L - 1.0, np.abs(f0) / D_L + 1.0
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                pos = resid(mid) > 0
                hi, lo = np.where(pos, mid, hi), np.where(pos, lo, mid)
            wL = 0.5 * (lo + hi)
        arg[g:] = wL + shift
        return self.cost.inv_grad(arg), wL

    # -- full vector fields -----------------------------------------------
    # Each field takes the state and an input vector ``u``; with quadratic
    # costs the ungated field is affine in (z, u).

    def input_size(self, mode: str) -> int:
        n, e = self.inc.n_bus, self.inc.n_line
        return n if mode == "gradient" else 2 * n + e

    def _split_u(self, u):
        n, e = self.inc.n_bus, self.inc.n_line
        return u[:n], u[n:2 * n], u[2 * n:2 * n + e]

    def alc_field(self, z, u, gate: bool = True):
        """Closed loop with ALC; ``u = [p_in, xi_omega, xi_P]``."""
        p_in, xi_w, xi_P = self._split_u(u)
        s = self.layout.split(z)
        dw, dP, w = self.plant_derivative(s["omega_G"], s["P"], s["d"], p_in)
        c = self.controller_derivative(s, w + xi_w, s["P"] + xi_P, gate)
        return self._pack(dw, dP, c)

    def gradient_field(self, z, u, gate: bool = True):
        """Reference primal-dual flow with ``x = mu``; ``u = p_in`` (true injection)."""
        p_in = u
        s = self.layout.split(z)
        d, psi, mu = s["d"], s["psi"], s["x"]
        gp, gm, sp, sm = s["gamma_plus"], s["gamma_minus"], s["sigma_plus"], s["sigma_minus"]
        dw, dP, w = self.plant_derivative(s["omega_G"], s["P"], d, p_in)
        dd = self.eps_d * (-self.cost.grad(d) + w + mu - gp + gm)
        dpsi = self.eps_psi * (self.inc.S @ mu - self.Abar_B @ (sp - sm))
        dgp, dgm, dsp, dsm = self._dual_raw(d, psi)
        if gate:
            dgp, dgm, dsp, dsm = _pp(dgp, gp), _pp(dgm, gm), _pp(dsp, sp), _pp(dsm, sm)
        dmu = self.eps_mu * (p_in - d - self.inc.S @ psi + self.delta_a * w)
        return self._pack(dw, dP, {"d": dd, "psi": dpsi, "gamma_plus": dgp, "gamma_minus": dgm,
                                   "x": dmu, "sigma_plus": dsp, "sigma_minus": dsm})

    def stationary_field(self, z, u, gate: bool = True):
        """Vector field with algebraic load; the stored ``d`` entries are ignored."""
        p_in, xi_w, xi_P = self._split_u(u)
        s = self.layout.split(z)
        g = self.inc.n_gen
        d, wL = self.stationary_solve(s["omega_G"], s["P"], s["x"], p_in, xi_w)
        w = np.concatenate([s["omega_G"], wL])
        AP = self.inc.A @ s["P"]
        dw = (p_in[:g] - d[:g] - self.D[:g] * s["omega_G"] - AP[:g]) / self.M_G
        dP = self.BAT @ w
        cs = dict(s, d=d)
        c = self.controller_derivative(cs, w + xi_w, s["P"] + xi_P, gate)
        zero = np.zeros_like(d)
        c.update(d=zero, gamma_plus=zero, gamma_minus=zero)
        return self._pack(dw, dP, c)

    def stationary_state(self, z, u):
        """Copy of ``z`` with the algebraic load written into the ``d`` slot."""
        p_in, xi_w, _ = self._split_u(u)
        s = self.layout.split(z)
        d, _ = self.stationary_solve(s["omega_G"], s["P"], s["x"], p_in, xi_w)
        out = z.copy()
        out[self.layout.slices["d"]] = d
        return out

    def field(self, mode: str):
        return {"alc": self.alc_field, "gradient": self.gradient_field,
                "stationary": self.stationary_field}[mode]

    def plant_field(self, z, u, gate: bool = True):
        """Plant alone under a held load command; ``u = [d, p_in]``."""
        n = self.inc.n_bus
        s = self.layout.split(z)
        dw, dP, _ = self.plant_derivative(s["omega_G"], s["P"], u[:n], u[n:])
        out = np.zeros(self.layout.size)
        out[self.layout.slices["omega_G"]] = dw
        out[self.layout.slices["P"]] = dP
        return out

    def held_controller_field(self, stationary: bool):
        """Controller alone with held measurements; ``u = [omega_meas, P_meas]``."""
        n = self.inc.n_bus

        def f(z, u, gate: bool = True):
            c = self.controller_derivative(self.layout.split(z), u[:n], u[n:], gate)
            if stationary:
                zero = np.zeros(n)
                c.update(d=zero, gamma_plus=zero, gamma_minus=zero)
            out = np.zeros(self.layout.size)
            for key, val in c.items():
                out[self.layout.slices[key]] = val
            return out
        return f

    def _pack(self, dw, dP, c):
        out = np.empty(self.layout.size)
        sl = self.layout.slices
        out[sl["omega_G"]] = dw
        out[sl["P"]] = dP
        for k, v in c.items():
            out[sl[k]] = v
        return out

    # -- conversions ------------------------------------------------------

    def to_gradient(self, z, p_in):
        """Map an ``x = r`` state to ``x = mu`` (substitution of the multiplier)."""
        L = self.layout
        s = L.split(z)
        w = self.omega(s["omega_G"], s["d"], s["P"], p_in)
        out = z.copy()
        out[L.slices["x"]] = self.mu_from_r(w, s["x"])
        return out

    def from_gradient(self, z, p_in):
        L = self.layout
        s = L.split(z)
        w = self.omega(s["omega_G"], s["d"], s["P"], p_in)
        out = z.copy()
        out[L.slices["x"]] = self.r_from_mu(w, s["x"])
        return out

    def equilibrium_state(self, sol, P=None) -> np.ndarray:
        """ALC state (``x = r``) at an OLC optimum; flows default to the virtual flows."""
        L = self.layout
        z = L.zeros()
        sl = L.slices
        if P is None:
            P = np.zeros(self.inc.n_line)
            P[self.inc.internal] = self.BAbarT @ sol.psi
        z[sl["P"]] = P
        z[sl["d"]] = sol.d
        z[sl["psi"]] = sol.psi
        z[sl["gamma_plus"]] = sol.gamma_plus
        z[sl["gamma_minus"]] = sol.gamma_minus
        z[sl["sigma_plus"]] = sol.sigma_plus
        z[sl["sigma_minus"]] = sol.sigma_minus
        z[sl["x"]] = self.r_from_mu(np.zeros(self.inc.n_bus), sol.mu)
        return z


# ---------------------------------------------------------------------------
# noise


@dataclass
class NoiseModel:
    sigma_omega: float = 0.0
    sigma_P: float = 0.0

    def __post_init__(self):
        if self.sigma_omega < 0 or self.sigma_P < 0:
            raise ValueError("noise standard deviations must be nonnegative")

    @property
    def active(self) -> bool:
        return self.sigma_omega > 0 or self.sigma_P > 0


def apply_noise(omega, P, noise: NoiseModel, rng: np.random.Generator):
    """Add i.i.d. Gaussian measurement noise to frequencies and flows."""
    omega = np.asarray(omega, dtype=float)
    P = np.asarray(P, dtype=float)
    w = omega + noise.sigma_omega * rng.standard_normal(omega.shape) if noise.sigma_omega else omega
    p = P + noise.sigma_P * rng.standard_normal(P.shape) if noise.sigma_P else P
    return w, p


# ---------------------------------------------------------------------------
# trajectory


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # rows in the alc representation (x = r)
    layout: Layout
    bus_ids: tuple[int, ...]
    line_names: tuple[str, ...]
    omega_L: np.ndarray
    p_in: np.ndarray
    mode: str = "alc"
    derived: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def series(self, name: str) -> np.ndarray:
        return self.states[:, self.layout.slices[name]]

    @property
    def omega(self) -> np.ndarray:
        return np.hstack([self.series("omega_G"), self.omega_L])

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def csv_header(self) -> list[str]:
        internal_names = [n for n, s in zip(self.line_names, self.derived.get("_internal", []))]
        b = self.bus_ids
        head = ["time"] + [f"omega_{i}" for i in b] + [f"P_{n}" for n in self.line_names]
        head += [f"d_{i}" for i in b] + [f"psi_{i}" for i in b] + [f"r_{i}" for i in b]
        head += [f"gammaP_{i}" for i in b] + [f"gammaM_{i}" for i in b]
        names = self.derived.get("_internal_names", internal_names)
        head += [f"sigmaP_{n}" for n in names] + [f"sigmaM_{n}" for n in names]
        return head

    def csv_rows(self):
        sl = self.layout.slices
        for k, t in enumerate(self.times):
            z = self.states[k]
            row = np.concatenate([[t], self.series("omega_G")[k], self.omega_L[k], z[sl["P"]],
                                  z[sl["d"]], z[sl["psi"]], z[sl["x"]], z[sl["gamma_plus"]],
                                  z[sl["gamma_minus"]], z[sl["sigma_plus"]],
                                  z[sl["sigma_minus"]]])
            yield row

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.csv_header())
            for row in self.csv_rows():
                w.writerow([format(float(v), ".17g") for v in row])


def read_trajectory_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    return header, data


# ---------------------------------------------------------------------------
# integration


class _Stepper:
    """One fixed step of a gated field ``f(z, u)``; multipliers clamped at zero."""

    def __init__(self, f, gate, duals, h, method):
        self.f, self.gate, self.duals, self.h, self.method = f, gate, duals, h, method

    def clamp(self, z):
        m = self.duals
        if np.any(z[m] < 0):
            z = z.copy()
            z[m] = np.maximum(z[m], 0.0)
        return z

    def step(self, z, u):
        h, clamp = self.h, self.clamp

        def f(v):
            return self.gate(v, self.f(v, u, False))
        k1 = f(z)
        if self.method == "euler":
            return clamp(z + h * k1)
        k2 = f(clamp(z + 0.5 * h * k1))
        k3 = f(clamp(z + 0.5 * h * k2))
        k4 = f(clamp(z + h * k3))
        return clamp(z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))


class _AffineStepper(_Stepper):
    """Exact RK4/Euler step of an affine field with the gate frozen over the step.

    The ungated field ``J z + U u + c`` is recovered by probing; the step
    matrices are cached per gate pattern, so each step costs one product.
    Without active gates this coincides with the classical scheme. Rows whose
    derivative is identically zero are left untouched, and each cached map
    only reads the state entries it depends on.
    """

    def __init__(self, f, gate, duals, h, method, n, n_u):
        super().__init__(f, gate, duals, h, method)
        zero_z, zero_u = np.zeros(n), np.zeros(n_u)
        c0 = f(zero_z, zero_u, False)
        eye = np.eye(n)
        J = np.column_stack([f(eye[j], zero_u, False) - c0 for j in range(n)])
        eye_u = np.eye(n_u)
        U = np.column_stack([f(zero_z, eye_u[k], False) - c0 for k in range(n_u)])
        self.J, self.U, self.c, self.n = J, U, c0, n
        self.live = np.flatnonzero(np.any(J != 0, axis=1) | np.any(U != 0, axis=1) | (c0 != 0))
        self.dual_rows = np.flatnonzero(duals)
        self.dual_rows = self.dual_rows[np.isin(self.dual_rows, self.live)]
        J_d = J[self.dual_rows]
        self.dual_cols = np.flatnonzero(np.any(J_d != 0, axis=0))
        self.J_d = J_d[:, self.dual_cols]
        self.cache: dict[bytes, tuple] = {}
        self._last = (None, None, None)

    def _matrices(self, key, active):
        hit = self.cache.get(key)
        if hit is None:
            hJ = self.h * (self.J * active[:, None])
            eye = np.eye(self.n)
            if self.method == "euler":
                T, Phi = eye + hJ, self.h * eye
            else:
                hJ2 = hJ @ hJ
                hJ3 = hJ2 @ hJ
                T = eye + hJ + hJ2 / 2 + hJ3 / 6 + hJ3 @ hJ / 24
                Phi = self.h * (eye + hJ / 2 + hJ2 / 6 + hJ3 / 24)
            Phi = Phi * active[None, :]
            rows = self.live
            T_rows = T[rows]
            cols = np.flatnonzero(np.any(T_rows != 0, axis=0))
            hit = (T_rows[:, cols], cols, Phi[rows])
            self.cache[key] = hit
        return hit

    def step(self, z, u):
        u_key = u.tobytes()
        if self._last[0] == u_key:
            c = self._last[1]
        else:
            c = self.c + self.U @ u
            self._last = (u_key, c, {})
        active = np.ones(self.n, dtype=bool)
        if self.dual_rows.size:
            raw = self.J_d @ z[self.dual_cols] + c[self.dual_rows]
            active[self.dual_rows] = (raw > 0) | (z[self.dual_rows] > 0)
        key = active.tobytes()
        T, cols, Phi = self._matrices(key, active)
        phic = self._last[2].get(key)
        if phic is None:
            phic = Phi @ c
            self._last[2][key] = phic
        out = z.copy()
        out[self.live] = T @ z[cols] + phic
        return self.clamp(out)


def make_stepper(model: ClosedLoop, f, n_u: int, h: float, method: str) -> _Stepper:
    L = model.layout
    if isinstance(model.cost, QuadraticCost):
        return _AffineStepper(f, model.gate, L.duals, h, method, L.size, n_u)
    return _Stepper(f, model.gate, L.duals, h, method)


def integrate(model: ClosedLoop, z0: np.ndarray, p_in_at: Callable[[float], np.ndarray],
              h: float, T: float, mode: str = "alc", sampled: bool = False,
              integrator: str = "rk4", noise: NoiseModel | None = None,
              rng: np.random.Generator | int | None = None, decimation: int = 100,
              controller_enabled: bool = True) -> Trajectory:
    """Fixed-step integration of the closed loop over ``[0, T]``.

    ``z0`` is given in the representation of ``mode`` (``x = mu`` for the
    gradient flow, ``x = r`` otherwise). With ``sampled=True`` the controller
    state only changes at multiples of ``gains.control_period``: at each
    boundary it reads (noisy) measurements, advances its own dynamics over one
    period with those measurements held, and the resulting load command is
    held by the plant until the next boundary.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if integrator not in INTEGRATORS:
        raise ValueError(f"unknown integrator {integrator!r}")
    if not (h > 0 and T > h):
        raise ValueError("need h > 0 and T > h")
    if decimation < 1:
        raise ValueError("decimation must be >= 1")
    noise = noise or NoiseModel()
    if mode == "gradient" and (sampled or noise.active):
        raise ValueError("the gradient reference flow runs continuous and noiseless only")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    L = model.layout
    n, e = L.n_bus, L.n_line
    n_steps = int(round(T / h))
    z = np.asarray(z0, dtype=float).copy()
    if z.shape != (L.size,):
        raise ValueError(f"initial state must have {L.size} entries")
    if np.any(z[L.duals] < 0):
        raise ValueError("initial multipliers must be nonnegative")
    period_steps = max(1, int(round(model.gains.control_period / h)))
    if sampled and not math.isclose(period_steps * h, model.gains.control_period, rel_tol=1e-9):
        raise ValueError("control period must be a multiple of the step size")

    zero_n, zero_e = np.zeros(n), np.zeros(e)
    if not controller_enabled:
        z[L.controller] = 0.0
        plant = make_stepper(model, model.plant_field, 2 * n, h, integrator)
    elif sampled:
        plant = make_stepper(model, model.plant_field, 2 * n, h, integrator)
        ctrl = make_stepper(model, model.held_controller_field(mode == "stationary"),
                            n + e, h, integrator)
    else:
        full = make_stepper(model, model.field(mode), model.input_size(mode), h, integrator)

    def inputs(p_in, xi_w=zero_n, xi_P=zero_e):
        return p_in if mode == "gradient" else np.concatenate([p_in, xi_w, xi_P])

    times, rows, wl_rows, pin_rows = [], [], [], []
    flags: set[str] = set()

    def record(t, z, p_in):
        s = L.split(z)
        alc = model.from_gradient(z, p_in) if mode == "gradient" else z
        times.append(t)
        rows.append(alc.copy())
        wl_rows.append(model.omega_load(s["d"], s["P"], p_in))
        pin_rows.append(p_in.copy())

    def check_limits(z):
        d = z[L.slices["d"]]
        if np.any(d > model.d_max) or np.any(d < model.d_min):
            flags.add("stationary load outside limits")

    p_in = np.asarray(p_in_at(0.0), dtype=float)
    if mode == "stationary" and controller_enabled and not sampled:
        z = model.stationary_state(z, inputs(p_in))
    record(0.0, z, p_in)

    held = z[L.slices["d"]].copy()
    has_duals = bool(np.any(L.duals))
    dual_min = float(z[L.duals].min()) if has_duals else math.inf
    for k in range(n_steps):
        t = k * h
        p_in = np.asarray(p_in_at(t), dtype=float)

        if not controller_enabled:
            z = plant.step(z, np.concatenate([zero_n, p_in]))
        elif not sampled:
            xi_w, xi_P = zero_n, zero_e
            if noise.active:
                xi_w = noise.sigma_omega * rng.standard_normal(n) if noise.sigma_omega else zero_n
                xi_P = noise.sigma_P * rng.standard_normal(e) if noise.sigma_P else zero_e
            u = inputs(p_in, xi_w, xi_P)
            z = full.step(z, u)
            if mode == "stationary":
                z = model.stationary_state(z, u)
                check_limits(z)
        else:
            if k % period_steps == 0:
                s = L.split(z)
                w = model.omega(s["omega_G"], held, s["P"], p_in)
                w_m, P_m = apply_noise(w, s["P"], noise, rng)
                y = np.concatenate([w_m, P_m])
                zc = z
                for _ in range(period_steps):
                    zc = ctrl.step(zc, y)
                    if has_duals:
                        dual_min = min(dual_min, float(zc[L.duals].min()))
                z = np.concatenate([z[L.plant], zc[L.controller]])
                if mode == "stationary":
                    z[L.slices["d"]] = model.stationary_load(w_m, z[L.slices["x"]])
                    check_limits(z)
                held = z[L.slices["d"]].copy()
            z = plant.step(z, np.concatenate([held, p_in]))

        if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > DIVERGENCE_LIMIT:
            raise DivergenceError((k + 1) * h)
        if has_duals:
            dual_min = min(dual_min, float(z[L.duals].min()))
        if (k + 1) % decimation == 0 or k + 1 == n_steps:
            record((k + 1) * h, z, np.asarray(p_in_at((k + 1) * h), dtype=float))

    names = _line_names(model.inc)
    traj = Trajectory(np.array(times), np.array(rows), L, tuple(model.inc.order),
                      tuple(names), np.array(wl_rows), np.array(pin_rows), mode,
                      flags=sorted(flags))
    traj.derived["_internal_names"] = [names[k] for k in model.inc.internal]
    # smallest multiplier seen at any step, not only at stored samples
    traj.derived["dual_min"] = dual_min
    return traj


def _line_names(inc: IncidenceSet) -> list[str]:
    return [f"{ln.from_bus}_{ln.to_bus}" for ln in inc.net.lines]


# ---------------------------------------------------------------------------
# steady state


def detect_steady_state(times, values, window: float, tol: float) -> float | None:
    """Earliest sample time after which ``max |dx/dt|`` stays below ``tol``.

    ``values`` has one row per sample. The derivative is the finite difference
    between stored samples; the condition must hold over at least ``window``
    seconds of trajectory to count.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if window >= times[-1] - times[0]:
        raise ValueError("window must be shorter than the trajectory")
    rate = np.max(np.abs(np.diff(values, axis=0)), axis=1) / np.diff(times)
    quiet = rate <= tol
    # last index where the condition fails; the steady segment starts after it
    bad = np.flatnonzero(~quiet)
    start = 0 if bad.size == 0 else bad[-1] + 1
    if start >= rate.size:
        return None
    t0 = times[start]
    if times[-1] - t0 < window:
        return None
    return float(t0)
