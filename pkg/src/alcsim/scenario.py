"""Declarative experiments: disturbances, configs, single runs, sweeps and export."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .certify import EquilibriumSet, fit_exponential_rate
from .dynamics import (MODES, INTEGRATORS, ClosedLoop, ControlGains, DivergenceError,
                       NoiseModel, Trajectory, detect_steady_state, integrate)
from .netmodel import (CaseFormatError, IncidenceSet, PowerNetwork, build_incidence,
                       network_from_dict, validate_network)
from .olc import OlcProblem, QuadraticCost, solve_olc

OMEGA_TOL = 1e-4
NOT_RESTORED = "nominal frequency not restored"
BUNDLED = ("two_bus", "five_bus", "ieee39")


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# cases


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("alcsim") / "data" / f"{name}.json"))


def load_case(path: str | Path) -> tuple[PowerNetwork, dict]:
    """Read a case file (or a bundled case by name); returns the network and its defaults."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        p = bundled_path(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read case file {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{p}: invalid JSON at line {exc.lineno}, column {exc.colno} "
                              f"(offset {exc.pos}): {exc.msg}") from None
    net = network_from_dict(data)
    problems = validate_network(net)
    if problems:
        raise CaseFormatError(f"{p}: " + "; ".join(problems))
    return net, dict(data.get("defaults", {}))


# ---------------------------------------------------------------------------
# disturbances


def synthetic_pv(duration: float, dt: float = 1.0, seed: int = 0, capacity: float = 0.5,
                 ramps: int = 3, noise: float = 0.05, smoothing: int = 10):
    """Seeded stand-in for a measured PV output: ramps plus smoothed noise.

    Returns ``(t, value)`` samples in pu with the output clipped to ``[0, capacity]``.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, duration + dt / 2, dt)
    level = np.full(t.shape, capacity * rng.uniform(0.4, 0.8))
    for _ in range(ramps):
        t0 = rng.uniform(0, duration)
        width = rng.uniform(0.05, 0.2) * duration
        level += capacity * rng.uniform(-0.3, 0.3) * np.clip((t - t0) / width, 0.0, 1.0)
    kernel = np.ones(max(1, smoothing)) / max(1, smoothing)
    wiggle = np.convolve(rng.standard_normal(t.size), kernel, mode="same")
    out = np.clip(level + capacity * noise * wiggle, 0.0, capacity)
    return [(float(a), float(b)) for a, b in zip(t, out)]


@dataclass
class DisturbanceProfile:
    """Additive change of the uncontrollable injection at selected buses.

    ``steps``: ``{bus, magnitude, at}``; ``timeseries``: ``{bus, samples}`` with
    linear interpolation (held constant outside the sampled range);
    ``sinusoids``: ``{bus, amplitude, frequency, phase}`` with frequency in Hz.
    """

    steps: list = field(default_factory=list)
    timeseries: list = field(default_factory=list)
    sinusoids: list = field(default_factory=list)

    def __post_init__(self):
        for ts in self.timeseries:
            t = np.array([s[0] for s in ts["samples"]], dtype=float)
            if t.size < 2 or np.any(np.diff(t) <= 0):
                raise ScenarioError(f"timeseries at bus {ts['bus']}: sample times must be "
                                    "strictly increasing (at least two samples)")

    @classmethod
    def from_dict(cls, data: dict) -> DisturbanceProfile:
        data = dict(data or {})
        unknown = set(data) - {"steps", "timeseries", "sinusoids", "pv"}
        if unknown:
            raise ScenarioError(f"unknown disturbance keys {sorted(unknown)}")
        ts = [dict(bus=int(x["bus"]), samples=[(float(a), float(b)) for a, b in x["samples"]])
              for x in data.get("timeseries", [])]
        for pv in data.get("pv", []):
            pv = dict(pv)
            bus = int(pv.pop("bus"))
            sign = float(pv.pop("sign", 1.0))
            samples = synthetic_pv(**pv)
            ts.append(dict(bus=bus, samples=[(a, sign * b) for a, b in samples]))
        return cls(
            steps=[dict(bus=int(x["bus"]), magnitude=float(x["magnitude"]),
                        at=float(x.get("at", 0.0))) for x in data.get("steps", [])],
            timeseries=ts,
            sinusoids=[dict(bus=int(x["bus"]), amplitude=float(x["amplitude"]),
                            frequency=float(x["frequency"]), phase=float(x.get("phase", 0.0)))
                       for x in data.get("sinusoids", [])])

    def to_dict(self) -> dict:
        return {"steps": self.steps,
                "timeseries": [dict(bus=x["bus"], samples=[list(s) for s in x["samples"]])
                               for x in self.timeseries],
                "sinusoids": self.sinusoids}

    def buses(self) -> set[int]:
        return {x["bus"] for x in self.steps + self.timeseries + self.sinusoids}

    def compile(self, inc: IncidenceSet, base: np.ndarray):
        """Return ``p_in(t)`` in internal bus order."""
        missing = self.buses() - set(inc.order)
        if missing:
            raise ScenarioError(f"disturbance refers to unknown buses {sorted(missing)}")
        steps = [(inc.index(x["bus"]), x["magnitude"], x["at"]) for x in self.steps]
        series = [(inc.index(x["bus"]), np.array([s[0] for s in x["samples"]]),
                   np.array([s[1] for s in x["samples"]])) for x in self.timeseries]
        sines = [(inc.index(x["bus"]), x["amplitude"], 2 * math.pi * x["frequency"], x["phase"])
                 for x in self.sinusoids]
        base = np.asarray(base, dtype=float).copy()
        static = not series and not sines
        step_times = sorted({at for _, _, at in steps})
        cache: dict[int, np.ndarray] = {}

        def p_in(t: float) -> np.ndarray:
            if static:
                k = int(np.searchsorted(step_times, t, side="right"))
                hit = cache.get(k)
                if hit is not None:
                    return hit
            out = base.copy()
            for i, mag, at in steps:
                if t >= at:
                    out[i] += mag
            for i, ts, vs in series:
                out[i] += np.interp(t, ts, vs)
            for i, amp, w, ph in sines:
                out[i] += amp * math.sin(w * t + ph)
            if static:
                cache[k] = out
            return out
        return p_in


# ---------------------------------------------------------------------------
# configuration


SCENARIO_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "alcsim scenario",
    "type": "object",
    "required": ["case"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "case": {"type": "string", "description": "case file path or bundled case name"},
        "gains": {"type": "object", "description": "eps_d, eps_psi, eps_gamma_plus, "
                  "eps_gamma_minus, eps_mu, eps_sigma_plus, eps_sigma_minus, K "
                  "(number or per-bus/per-line list), control_period (s)"},
        "disturbance": {"type": "object", "properties": {
            "steps": {"type": "array", "items": {"type": "object", "required": ["bus", "magnitude"]}},
            "timeseries": {"type": "array", "items": {"type": "object", "required": ["bus", "samples"]}},
            "sinusoids": {"type": "array", "items": {"type": "object",
                                                      "required": ["bus", "amplitude", "frequency"]}},
            "pv": {"type": "array", "items": {"type": "object", "required": ["bus", "duration"]}}}},
        "noise": {"type": "object", "properties": {
            "sigma_omega": {"type": "number", "minimum": 0},
            "sigma_P": {"type": "number", "minimum": 0},
            "seed": {"type": "integer"}}},
        "damping_scale": {"type": ["number", "null"]},
        "damping_offset": {"type": ["number", "array", "null"]},
        "duration": {"type": "number", "exclusiveMinimum": 0},
        "step": {"type": "number", "exclusiveMinimum": 0},
        "mode": {"enum": list(MODES)},
        "sampled": {"type": "boolean"},
        "integrator": {"enum": list(INTEGRATORS)},
        "decimation": {"type": "integer", "minimum": 1},
        "alc_enabled": {"type": "boolean"},
        "fit_rate": {"type": "boolean"},
        "p_in": {"type": "object", "description": "base injection overrides {bus id: pu}"},
    },
}


@dataclass
class ScenarioConfig:
    case: str
    name: str = ""
    gains: dict = field(default_factory=dict)
    disturbance: DisturbanceProfile = field(default_factory=DisturbanceProfile)
    sigma_omega: float = 0.0
    sigma_P: float = 0.0
    seed: int = 0
    damping_scale: float | None = None
    damping_offset: Any = None
    duration: float = 60.0
    step: float = 1e-3
    mode: str = "alc"
    sampled: bool = True
    integrator: str = "rk4"
    decimation: int = 100
    alc_enabled: bool = True
    fit_rate: bool = False
    p_in: dict = field(default_factory=dict)
    base_dir: str | None = None

    def __post_init__(self):
        if not (self.duration > 0 and self.step > 0):
            raise ScenarioError("duration and step must be positive")
        if self.duration <= self.step:
            raise ScenarioError("duration must exceed the step")
        if self.sigma_omega < 0 or self.sigma_P < 0:
            raise ScenarioError("noise standard deviations must be nonnegative")
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}")
        if self.integrator not in INTEGRATORS:
            raise ScenarioError(f"integrator must be one of {INTEGRATORS}")
        if self.decimation < 1:
            raise ScenarioError("decimation must be >= 1")

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> ScenarioConfig:
        data = dict(data)
        unknown = set(data) - set(SCENARIO_SCHEMA["properties"])
        if unknown:
            raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")
        if "case" not in data:
            raise ScenarioError("scenario needs a 'case'")
        noise = dict(data.pop("noise", {}) or {})
        bad = set(noise) - {"sigma_omega", "sigma_P", "seed"}
        if bad:
            raise ScenarioError(f"unknown noise keys {sorted(bad)}")
        dist = DisturbanceProfile.from_dict(data.pop("disturbance", {}))
        p_in = {int(k): float(v) for k, v in (data.pop("p_in", {}) or {}).items()}
        kw = {k: v for k, v in data.items()}
        for key in ("duration", "step"):
            if key in kw:
                kw[key] = float(kw[key])
        return cls(disturbance=dist, p_in=p_in,
                   sigma_omega=float(noise.get("sigma_omega", 0.0)),
                   sigma_P=float(noise.get("sigma_P", 0.0)), seed=int(noise.get("seed", 0)),
                   base_dir=None if base_dir is None else str(base_dir), **kw)

    def to_dict(self) -> dict:
        d = {
            "name": self.name, "case": self.case, "gains": self.gains,
            "disturbance": self.disturbance.to_dict(),
            "noise": {"sigma_omega": self.sigma_omega, "sigma_P": self.sigma_P, "seed": self.seed},
            "damping_scale": self.damping_scale, "damping_offset": self.damping_offset,
            "duration": self.duration, "step": self.step, "mode": self.mode,
            "sampled": self.sampled, "integrator": self.integrator,
            "decimation": self.decimation, "alc_enabled": self.alc_enabled,
            "fit_rate": self.fit_rate, "p_in": {str(k): v for k, v in self.p_in.items()},
        }
        return d

    def replace(self, **kw) -> ScenarioConfig:
        new = copy.deepcopy(self)
        for k, v in kw.items():
            if not hasattr(new, k):
                raise ScenarioError(f"unknown scenario field {k!r}")
            setattr(new, k, v)
        new.__post_init__()
        return new

    def case_path(self) -> str:
        p = Path(self.case)
        if not p.is_absolute() and self.base_dir and (Path(self.base_dir) / p).exists():
            return str(Path(self.base_dir) / p)
        return self.case


def read_scenario(path: str | Path) -> ScenarioConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read scenario {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: invalid JSON at line {exc.lineno}, column {exc.colno} "
                            f"(offset {exc.pos}): {exc.msg}") from None
    return ScenarioConfig.from_dict(data, base_dir=p.parent)


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunSummary:
    steady_state_time: float | None = None
    final_omega_max: float | None = None
    final_area_imbalance: float | None = None
    final_cost: float | None = None
    oracle_cost: float | None = None
    cost_gap: float | None = None
    final_d_gap: float | None = None
    load_limit_violation: float | None = None
    flow_limit_violation: float | None = None
    min_multiplier: float | None = None
    fit: dict | None = None
    flags: list = field(default_factory=list)
    error: str | None = None
    label: str = ""
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def build_run(cfg: ScenarioConfig):
    """Network, problem at the base injection, closed-loop model and ``p_in(t)``."""
    net, defaults = load_case(cfg.case_path())
    if cfg.p_in:
        unknown = set(cfg.p_in) - {b.id for b in net.buses}
        if unknown:
            raise ScenarioError(f"p_in override for unknown buses {sorted(unknown)}")
        net = net.with_buses(p_in=cfg.p_in)
    inc = build_incidence(net)
    gains_kw = dict(defaults.get("gains", {}))
    gains_kw.update(cfg.gains)
    list_fields = {k: np.asarray(v, dtype=float) for k, v in gains_kw.items() if isinstance(v, list)}
    gains_kw.update(list_fields)
    offset = cfg.damping_offset
    if isinstance(offset, list):
        offset = np.asarray(offset, dtype=float)
    gains = ControlGains(**gains_kw, damping_scale=cfg.damping_scale, damping_offset=offset)
    base = OlcProblem.from_network(inc)
    model = ClosedLoop.from_problem(base, gains)
    p_in_at = cfg.disturbance.compile(inc, base.p_in)
    return net, inc, base, model, p_in_at


def run_scenario(cfg: ScenarioConfig, rng: np.random.Generator | None = None,
                 oracle_tol: float = 1e-8) -> tuple[Trajectory, RunSummary]:
    net, inc, base, model, p_in_at = build_run(cfg)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    traj = integrate(model, model.layout.zeros(), p_in_at, cfg.step, cfg.duration,
                     mode=cfg.mode, sampled=cfg.sampled, integrator=cfg.integrator,
                     noise=NoiseModel(cfg.sigma_omega, cfg.sigma_P), rng=rng,
                     decimation=cfg.decimation, controller_enabled=cfg.alc_enabled)
    p_final = p_in_at(cfg.duration)
    prob = base.with_p_in(p_final)
    sol = solve_olc(prob, tol=oracle_tol)
    return traj, summarize(traj, model, prob, sol, fit_rate=cfg.fit_rate, label=cfg.name,
                           seed=cfg.seed)


def summarize(traj: Trajectory, model: ClosedLoop, prob: OlcProblem, sol, fit_rate=False,
              label: str = "", seed: int | None = None) -> RunSummary:
    inc = model.inc
    L = traj.layout
    z = traj.final
    s = L.split(z)
    d = s["d"]
    w = traj.omega[-1]
    masks = inc.area_masks()
    p_final = traj.p_in[-1]
    imbalance = max(abs(float(np.sum(d[m] - p_final[m]))) for m in masks.values())
    cost = model.cost.value(d)
    load_viol = float(max(0.0, np.max(d - model.d_max), np.max(model.d_min - d)))
    vf = model.BAbarT @ s["psi"]
    flow_viol = 0.0
    if vf.size:
        flow_viol = float(max(0.0, np.max(vf - model.f_max), np.max(model.f_min - vf)))
    duals = traj.states[:, L.duals]
    sm = RunSummary(
        final_omega_max=float(np.max(np.abs(w))), final_area_imbalance=imbalance,
        final_cost=cost, oracle_cost=sol.objective, cost_gap=abs(cost - sol.objective),
        final_d_gap=float(np.max(np.abs(d - sol.d))), load_limit_violation=load_viol,
        flow_limit_violation=flow_viol,
        min_multiplier=_finite_or_none(min(traj.derived.get("dual_min", math.inf),
                                           duals.min() if duals.size else math.inf)),
        flags=list(traj.flags), label=label, seed=seed)
    if traj.times.size > 3:
        window = min(5.0, 0.25 * (traj.times[-1] - traj.times[0]))
        series = np.hstack([traj.omega, traj.series("d")])
        sm.steady_state_time = detect_steady_state(traj.times, series, window, 1e-4)
    if sm.final_omega_max > 10 * OMEGA_TOL:
        sm.flags.append(NOT_RESTORED)
    if fit_rate:
        eq = EquilibriumSet.from_solution(inc, sol)
        dist = distance_series(traj, model, eq)
        try:
            fit = fit_exponential_rate(traj.times, dist,
                                       window=(0.5 * traj.times[-1], traj.times[-1]))
            sm.fit = {"C0": fit.C0, "rho0": fit.rho0, "r2": fit.r2}
        except ValueError as exc:
            sm.fit = {"error": str(exc)}
    return sm


def _finite_or_none(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def distance_series(traj: Trajectory, model: ClosedLoop, eq: EquilibriumSet) -> np.ndarray:
    L = traj.layout
    out = np.empty(traj.times.size)
    for k in range(traj.times.size):
        s = L.split(traj.states[k])
        w = traj.omega[k]
        mu = model.mu_from_r(w, s["x"])
        out[k] = eq.distance(s["d"], s["P"], s["psi"], mu, w)
    return out


SWEEP_AXES = ("damping_scale", "sigma_omega", "sigma_P")


def run_sweep(base: ScenarioConfig, axis: str, values, master_seed: int | None = None,
              workers: int = 1) -> list[RunSummary]:
    """Independent runs along one parameter axis; failures are recorded, not raised."""
    if axis not in SWEEP_AXES:
        raise ScenarioError(f"sweep axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ScenarioError("sweep axis is empty")
    seq = np.random.SeedSequence(base.seed if master_seed is None else master_seed)
    children = seq.spawn(len(values))
    jobs = [(base, axis, v, c) for v, c in zip(values, children)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_sweep_job, jobs))
    return [_sweep_job(j) for j in jobs]


def _sweep_job(job) -> RunSummary:
    base, axis, value, child = job
    label = f"{axis}={value}"
    seed = int(child.generate_state(1)[0])
    try:
        cfg = base.replace(**{axis: value, "name": label, "seed": seed})
        _, sm = run_scenario(cfg, rng=np.random.default_rng(child))
        return sm
    except (DivergenceError, ValueError, RuntimeError, ArithmeticError) as exc:
        return RunSummary(error=f"{type(exc).__name__}: {exc}", label=label, seed=seed,
                          flags=["run failed"])


# ---------------------------------------------------------------------------
# export


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def export(traj: Trajectory | None, summary: RunSummary | list, out_dir: str | Path,
           config: ScenarioConfig | None = None, certificate: dict | None = None) -> list[Path]:
    """Write ``trajectory.csv``, ``summary.json`` and optionally ``certificate.json``."""
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    written = []
    if traj is not None:
        p = out / "trajectory.csv"
        traj.to_csv(p)
        written.append(p)
    if isinstance(summary, list):
        body = {"runs": [s.to_dict() for s in summary]}
    else:
        body = summary.to_dict()
    doc = {"version": __version__, "summary": body}
    if config is not None:
        doc["config"] = config.to_dict()
    p = out / "summary.json"
    p.write_text(dumps(doc))
    written.append(p)
    if certificate is not None:
        p = out / "certificate.json"
        p.write_text(dumps(certificate))
        written.append(p)
    return written
