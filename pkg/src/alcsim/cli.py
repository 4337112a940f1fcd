"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (infeasible, diverged, certificate
rejected, invalid case), 2 usage or I/O error. Progress goes to stderr; files
are written only into ``--out``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .certify import (CertificationError, ReducedSystem, check_Q_kernel, certificate_json,
                      select_alpha_beta)
from .dynamics import DivergenceError
from .netmodel import CaseFormatError, NetworkError, build_incidence
from .olc import InfeasibleAreaError, OlcProblem, OracleConvergenceError, solve_olc
from .scenario import (BUNDLED, SWEEP_AXES, ScenarioError, bundled_path, dumps, export,
                       load_case, read_scenario, run_scenario, run_sweep)


class UsageError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _out_dir(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path).resolve()
    if not p.is_dir():
        raise UsageError(f"output directory {p} does not exist")
    return p


def _existing(path: str) -> Path:
    if not Path(path).exists() and path in BUNDLED:
        return bundled_path(path)
    p = Path(path).resolve()
    if not p.is_file():
        raise UsageError(f"file {p} does not exist")
    return p


def _scenario(args):
    cfg = read_scenario(_existing(args.scenario))
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.step is not None:
        over["step"] = args.step
    if args.duration is not None:
        over["duration"] = args.duration
    if args.mode is not None:
        over["mode"] = args.mode
    if args.sampled is not None:
        over["sampled"] = args.sampled
    return cfg.replace(**over) if over else cfg


def cmd_simulate(args) -> int:
    out = _out_dir(args.out)
    cfg = _scenario(args)
    _log(f"simulating {cfg.name or args.scenario}: {cfg.duration:g} s at h={cfg.step:g} ({cfg.mode})")
    traj, summary = run_scenario(cfg)
    _log(f"final max |omega| {summary.final_omega_max:.3e} pu, cost gap {summary.cost_gap:.3e}")
    for flag in summary.flags:
        _log(f"flag: {flag}")
    if out is not None:
        for p in export(traj, summary, out, cfg):
            _log(f"wrote {p}")
    return 0


def _parse_overrides(items) -> dict[int, float]:
    out = {}
    for item in items or []:
        try:
            bus, val = item.split("=")
            out[int(bus)] = float(val)
        except ValueError:
            raise UsageError(f"--p-in expects BUS=VALUE, got {item!r}") from None
    return out


def cmd_solve(args) -> int:
    out = _out_dir(args.out)
    net, _ = load_case(_existing(args.case))
    over = _parse_overrides(args.p_in)
    unknown = set(over) - {b.id for b in net.buses}
    if unknown:
        raise UsageError(f"--p-in refers to unknown buses {sorted(unknown)}")
    if over:
        net = net.with_buses(p_in=over)
    inc = build_incidence(net)
    sol = solve_olc(OlcProblem.from_network(inc))
    how = ", ".join(f"area {a}: {m}" for a, m in sol.methods.items())
    _log(f"optimal cost {sol.objective:.9g}, KKT residual {sol.kkt.max():.2e} ({how})")
    if out is not None:
        doc = {"version": __version__, "case": str(args.case),
               "p_in": {str(k): v for k, v in sorted(over.items())},
               "solution": sol.to_dict(inc)}
        (out / "solution.json").write_text(dumps(doc))
        _log(f"wrote {out / 'solution.json'}")
    return 0


def _bounds(vals, name):
    if vals is None:
        return None
    lo, hi = vals
    if not 0 < lo <= hi:
        raise UsageError(f"--{name} needs 0 < LO <= HI")
    return np.logspace(np.log10(lo), np.log10(hi), 33)


def cmd_certify(args) -> int:
    out = _out_dir(args.out)
    net, _ = load_case(_existing(args.case))
    inc = build_incidence(net)
    prob = OlcProblem.from_network(inc)
    sys_ = ReducedSystem(inc, prob.cost)
    cert = select_alpha_beta(sys_, prob.d_min, prob.d_max, alphas=_bounds(args.alpha, "alpha"),
                             betas=_bounds(args.beta, "beta"))
    kernel = check_Q_kernel(cert, inc)
    text = certificate_json(cert, kernel)
    _log(f"alpha={cert.alpha:.4g} beta={cert.beta:.4g} rho={cert.rho:.4g} "
         f"kernel {'ok' if kernel.passed else 'MISMATCH'}")
    if out is not None:
        doc = json.loads(text)
        doc["version"] = __version__
        doc["case"] = str(args.case)
        (out / "certificate.json").write_text(dumps(doc))
        _log(f"wrote {out / 'certificate.json'}")
    if not kernel.passed:
        for m in kernel.messages:
            _log(m)
        return 1
    return 0


def _parse_axis(spec: str):
    try:
        name, vals = spec.split("=", 1)
        values = [float(v) for v in vals.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--axis expects NAME=V1,V2,..., got {spec!r}") from None
    if name not in SWEEP_AXES:
        raise UsageError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}")
    if not values:
        raise UsageError("sweep axis is empty")
    return name, values


def cmd_sweep(args) -> int:
    out = _out_dir(args.out)
    axis, values = _parse_axis(args.axis)
    cfg = _scenario(args)
    _log(f"sweeping {axis} over {len(values)} values")
    runs = run_sweep(cfg, axis, values, master_seed=args.seed, workers=args.workers)
    failed = [r for r in runs if r.error]
    for r in runs:
        _log(f"{r.label}: " + (r.error or f"max |omega| {r.final_omega_max:.3e}"))
    if out is not None:
        export(None, runs, out, cfg)
        _log(f"wrote {out / 'summary.json'}")
    return 1 if failed else 0


def cmd_validate(args) -> int:
    path = _existing(args.case)
    try:
        net, _ = load_case(path)
        inc = build_incidence(net)
    except (CaseFormatError, NetworkError) as exc:
        _log(f"invalid: {exc}")
        return 1
    bad = OlcProblem.from_network(inc).area_feasibility()
    for area, msg in bad:
        _log(f"area {area}: {msg}")
    for w in inc.warnings:
        _log(f"warning: {w}")
    _log(f"{path.name}: {inc.n_bus} buses, {inc.n_line} lines, {len(net.areas)} areas"
         + ("" if not bad else ", infeasible"))
    return 1 if bad else 0


def _add_run_flags(p):
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--out", help="existing output directory")
    p.add_argument("--seed", type=int, help="seed for all noise draws")
    p.add_argument("--step", type=float, help="integration step h (s)")
    p.add_argument("--duration", type=float, help="simulated time (s)")
    p.add_argument("--mode", choices=("alc", "gradient", "stationary"))
    g = p.add_mutually_exclusive_group()
    g.add_argument("--sampled", dest="sampled", action="store_true", default=None,
                   help="hold measurements over each control period")
    g.add_argument("--continuous", dest="sampled", action="store_false",
                   help="continuous-time control")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="alcsim", description="Area-based load control simulator")
    ap.add_argument("--version", action="version", version=f"alcsim {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one scenario")
    _add_run_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("solve", help="solve the optimal load control problem")
    p.add_argument("--case", required=True)
    p.add_argument("--p-in", action="append", metavar="BUS=VALUE",
                   help="override the injection at a bus (repeatable)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("certify", help="search for a Lyapunov certificate")
    p.add_argument("--case", required=True)
    p.add_argument("--alpha", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--beta", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("sweep", help="run a scenario along one parameter axis")
    _add_run_flags(p)
    p.add_argument("--axis", required=True, metavar="NAME=V1,V2,...")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="check a case file")
    p.add_argument("--case", required=True)
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        _log(f"error: {exc}")
        return 2
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        _log(f"error: {exc}")
        return 2
    except InfeasibleAreaError as exc:
        _log(f"infeasible: {exc}")
        return 1
    except CertificationError as exc:
        _log(f"certificate failed: {exc}")
        if exc.diagnostics:
            _log(json.dumps(exc.diagnostics, sort_keys=True))
        return 1
    except DivergenceError as exc:
        _log(f"diverged at t={exc.t:g} s: {exc}")
        return 1
    except OracleConvergenceError as exc:
        _log(f"oracle failed: {exc}")
        return 1
    except (CaseFormatError, NetworkError, ScenarioError) as exc:
        _log(f"error: {exc}")
        return 2
    except ValueError as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
