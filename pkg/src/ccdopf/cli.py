"""Batch command-line front end.

Every command writes plain CSV tables plus a ``manifest.json`` that is enough
to rerun it (``ccdopf rerun DIR/manifest.json --out NEWDIR``). Exit codes:
0 success, 1 chance-constraint validation failed, 2 input error, 3 solver
did not converge.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .admm import AdmmConfig, injection_compare_csv, run_admm
from .config import ConfigError, PvConfig, bundled, load_pv_config
from .distflow import (InjectionSet, bus_table_csv, branch_voltage_profile, edge_table_csv,
                       solve_lindistflow, total_losses)
from .netmodel import CaseFormatError, RadialNetwork, ValidationError, load_case
from .opf import reference_setpoints, solution_csv, solve_centralized
from .policies import CASE_PERTURBATIONS, PolicyKind, PolicyParams, droop_sweep, sweep_breakpoint
from .uncertainty import binomial_tolerance, monte_carlo_violation

EXIT_OK, EXIT_CC_FAIL, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2, 3
FIG3_POLICIES = ("none", "flow_active_reactive", "flow_reactive", "loss_min")
FIG4_EPS = "0.01,0.05,0.1,0.2"
RISE_TOL = 1e-12


class InputError(Exception):
    pass


class SolverError(Exception):
    pass


# -- helpers ----------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def _load_net(path: str | None) -> RadialNetwork:
    p = Path(path) if path else bundled("case33bw.m")
    if not p.is_file():
        raise InputError(f"case file not found: {p}")
    try:
        return load_case(p)
    except (CaseFormatError, ValidationError) as exc:
        raise InputError(f"{p}: {exc}") from exc


def _load_pv(path: str | None, default: str | None) -> PvConfig | None:
    if path is None and default is None:
        return None
    p = Path(path) if path else bundled(default)
    if not p.is_file():
        raise InputError(f"pv config not found: {p}")
    try:
        return load_pv_config(p)
    except ConfigError as exc:
        raise InputError(f"{p}: {exc}") from exc


def _specs(cfg: PvConfig, net: RadialNetwork):
    try:
        return cfg.specs(net)
    except (ConfigError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def parse_droop(text: str) -> list[float]:
    try:
        lo, hi, step = (float(t) for t in text.split(":"))
    except ValueError:
        raise InputError(f"--droop expects LO:HI:STEP, got {text!r}") from None
    if step <= 0 or hi < lo or lo < 0:
        raise InputError("--droop needs 0 <= LO <= HI and STEP > 0")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 12) for i in range(n)]


def parse_eps(text: str | None) -> list[float | None]:
    if text is None:
        return [None]
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InputError(f"--eps expects a comma-separated list, got {text!r}") from None
    if not vals or any(not 0 < v < 0.5 for v in vals):
        raise InputError("--eps values must lie in (0, 0.5)")
    return vals


def write_manifest(out: Path, command: str, args: dict) -> None:
    manifest = {"command": command, "args": args, "version": __version__}
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _abs(path: str | None) -> str | None:
    return str(Path(path).resolve()) if path else None


def profile_rows(net: RadialNetwork, state) -> tuple[list, list]:
    """Root-to-leaf voltage profiles plus a per-branch monotonicity summary."""
    rows, summary = [], []
    for leaf in net.leaves():
        prof = branch_voltage_profile(net, state, leaf)
        rise = 0.0
        prev = None
        for pos, (bus, v) in enumerate(prof):
            up = prev is not None and v > prev + RISE_TOL
            if prev is not None:
                rise = max(rise, v - prev)
            rows.append([leaf, pos, bus, _fmt(v), int(up)])
            prev = v
        summary.append([leaf, int(rise <= RISE_TOL), _fmt(max(rise, 0.0))])
    return rows, summary


# -- commands ---------------------------------------------------------------

def cmd_powerflow(args) -> int:
    net = _load_net(args.case)
    cfg = _load_pv(args.pv, None)
    inj = None
    if cfg is not None:
        specs = _specs(cfg, net)
        inj = InjectionSet({s.node: s.p_ref for s in specs}, {s.node: s.q_ref for s in specs})
    state = solve_lindistflow(net, inj)
    out = Path(args.out)
    _write(out / "bus.csv", bus_table_csv(net, state))
    _write(out / "edge.csv", edge_table_csv(net, state))
    write_manifest(out, "powerflow", {"case": _abs(args.case), "pv": _abs(args.pv)})
    loss = total_losses(net, state)
    vmin = min(math.sqrt(u) for u in state.u.values())
    print(f"losses {loss * net.base_mva:.6f} MW, min voltage {vmin:.5f} p.u.")
    return EXIT_OK


def cmd_policy_sweep(args) -> int:
    net = _load_net(args.case)
    cfg = _load_pv(args.pv, "pv_node5.cfg")
    specs = _specs(cfg, net)
    ks = parse_droop(args.droop)
    variants = [v.strip() for v in args.variant.split(",")]
    for v in variants:
        if v not in CASE_PERTURBATIONS:
            raise InputError(f"unknown variant {v!r} (expected I, II or none)")
    if args.policy == "all":
        policies = list(FIG3_POLICIES)
    else:
        policies = [p.strip() for p in args.policy.split(",")]
    try:
        params = {p: PolicyParams(PolicyKind(p)) for p in policies}
    except ValueError as exc:
        raise InputError(f"unknown policy: {exc}") from exc

    ref = solve_centralized(net, specs)
    if not ref.ok:
        raise SolverError(f"reference OPF {ref.status}")
    refs = reference_setpoints(ref, net, specs)
    out = Path(args.out)
    summary = []
    diverged = 0
    for v in variants:
        pert = CASE_PERTURBATIONS[v]
        for name in policies:
            pts = droop_sweep(net, refs, params[name], ks, pert)
            diverged += sum(pt.status != "ok" for pt in pts)
            bp = sweep_breakpoint(pts) if any(pt.status == "ok" for pt in pts) else math.nan
            nodes = [s.node for s in refs]
            header = ["K", "total_loss_pu", "total_loss_mw", "saturated_flag", "status"]
            header += [f"{c}_{n}_pu" for n in nodes for c in ("p", "q")]
            rows = []
            for pt in pts:
                row = [_fmt(pt.k), _fmt(pt.losses), _fmt(pt.losses * net.base_mva),
                       int(pt.status == "ok" and pt.k >= bp), pt.status]
                for n in nodes:
                    row += [_fmt(x) for x in pt.injections.get(n, (math.nan, math.nan))]
                rows.append(row)
            _write(out / f"sweep_{v}_{name}.csv", _csv(header, rows))
            last = [pt for pt in pts if pt.status == "ok"]
            summary.append([v, name, _fmt(bp), _fmt(last[-1].losses if last else math.nan)])
            print(f"case {v} {name}: breakpoint K={bp:g}, final losses "
                  f"{(last[-1].losses if last else math.nan) * net.base_mva:.6f} MW")
    _write(out / "breakpoints.csv", _csv(["variant", "policy", "breakpoint_K", "final_loss_pu"], summary))
    write_manifest(out, "policy-sweep", {"case": _abs(args.case), "pv": _abs(args.pv), "policy": args.policy,
                                         "droop": args.droop, "variant": args.variant})
    if diverged:
        print(f"{diverged} sweep points diverged", file=sys.stderr)
    return EXIT_OK


def _opf_one(net, cfg, specs, mode, eps, rho, max_iters, out: Path) -> bool:
    model = cfg.model(net, epsilon=eps) if eps is not None else None
    trace_csv = messages_csv = None
    iterations = 0
    if mode == "centralized":
        sol = solve_centralized(net, specs, model)
        converged = sol.ok
    else:
        res = run_admm(net, specs, model, AdmmConfig(rho=rho, max_iters=max_iters))
        sol, converged, iterations = res.solution, res.converged, res.iterations
        trace_csv = res.trace.to_csv(net.base_mva)
        messages_csv = res.bus.log_csv()
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "solution.csv", solution_csv(net, sol))
    inj_rows = [[n, _fmt(sol.injections.p(n)), _fmt(sol.injections.q(n)),
                 _fmt(sol.injections.p(n) * net.base_mva), _fmt(sol.injections.q(n) * net.base_mva)]
                for n in sol.injections.nodes]
    _write(out / "injections.csv", _csv(["node", "p_pu", "q_pu", "p_mw", "q_mvar"], inj_rows))
    if sol.state is not None:
        _write(out / "bus.csv", bus_table_csv(net, sol.state))
        _write(out / "edge.csv", edge_table_csv(net, sol.state))
        rows, summary = profile_rows(net, sol.state)
        _write(out / "profiles.csv", _csv(["leaf", "position", "bus", "v_pu", "rise_flag"], rows))
        _write(out / "profile_summary.csv", _csv(["leaf", "monotone", "max_rise_pu"], summary))
    if trace_csv is not None:
        _write(out / "trace.csv", trace_csv)
        _write(out / "messages.csv", messages_csv)
        central = solve_centralized(net, specs)
        if central.ok:
            _write(out / "injection_compare.csv", injection_compare_csv(net, sol, central))
            _write(out / "reference_centralized.csv",
                   _csv(["quantity", "value_pu", "value_phys"],
                        [["losses", _fmt(central.losses), _fmt(central.losses * net.base_mva)],
                         ["total_q", _fmt(central.injections.total_q()),
                          _fmt(central.injections.total_q() * net.base_mva)]]))
    total_q = sol.injections.total_q() if sol.injections.nodes else 0.0
    summary_rows = [["mode", mode], ["epsilon", "" if eps is None else _fmt(eps)], ["status", sol.status],
                    ["converged", int(converged)], ["iterations", iterations],
                    ["losses_pu", _fmt(sol.losses)], ["total_q_pu", _fmt(total_q)]]
    _write(out / "summary.csv", _csv(["key", "value"], summary_rows))
    tag = "deterministic" if eps is None else f"eps={eps:g}"
    print(f"{mode} {tag}: {sol.status}, losses {sol.losses * net.base_mva:.6f} MW, "
          f"total q {total_q * net.base_mva:.6f} MVAr" + (f", {iterations} iterations" if mode == "admm" else ""))
    return converged


def cmd_opf(args) -> int:
    if args.mode not in ("centralized", "admm"):
        raise InputError(f"unknown mode {args.mode!r} (expected centralized or admm)")
    if args.rho is not None and not args.rho > 0:
        raise InputError("--rho must be positive")
    net = _load_net(args.case)
    cfg = _load_pv(args.pv, "pv_fleet.cfg")
    specs = _specs(cfg, net)
    eps_list = parse_eps(args.eps)
    out = Path(args.out)
    ok = True
    for eps in eps_list:
        sub = out if len(eps_list) == 1 else out / f"eps_{eps:g}"
        try:
            ok &= _opf_one(net, cfg, specs, args.mode, eps, args.rho, args.max_iters, sub)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    write_manifest(out, "opf", {"case": _abs(args.case), "pv": _abs(args.pv), "mode": args.mode,
                                "eps": args.eps, "rho": args.rho, "max_iters": args.max_iters})
    return EXIT_OK if ok else EXIT_SOLVER


def wilson_interval(rate: float, n: int, z: float = 1.96) -> tuple[float, float]:
    denom = 1 + z * z / n
    centre = (rate + z * z / (2 * n)) / denom
    half = z * math.sqrt(rate * (1 - rate) / n + z * z / (4 * n * n)) / denom
    return max(centre - half, 0.0), min(centre + half, 1.0)


def cmd_validate_cc(args) -> int:
    run = Path(args.rundir)
    man_path, inj_path = run / "manifest.json", run / "injections.csv"
    for p in (man_path, inj_path):
        if not p.is_file():
            raise InputError(f"missing solution artifact: {p}")
    man = json.loads(man_path.read_text(encoding="utf-8"))
    if man.get("command") != "opf":
        raise InputError(f"{run} does not hold an opf run")
    margs = man["args"]
    eps_list = parse_eps(margs.get("eps"))
    if len(eps_list) != 1:
        raise InputError("validate one epsilon at a time: point at an eps_* subdirectory")
    net = _load_net(margs.get("case"))
    cfg = _load_pv(margs.get("pv"), "pv_fleet.cfg")
    eps = eps_list[0] if eps_list[0] is not None else cfg.epsilon
    model = cfg.model(net, epsilon=eps)
    with open(inj_path, encoding="utf-8") as fh:
        q_inj = {int(r["node"]): float(r["q_pu"]) for r in csv.DictReader(fh)}
    pf = {e.node: e.pf for e in cfg.entries}
    n = args.samples
    if n < 1:
        raise InputError("--samples must be >= 1")
    rates = monte_carlo_violation(model, q_inj, pf, n, args.seed, net=net)
    tol = binomial_tolerance(eps, n)
    rows = []
    passed = True
    for key in rates:
        rate = rates[key]
        lo, hi = wilson_interval(rate, n)
        if key.startswith("v_"):
            verdict = "info"  # voltage limits are enforced deterministically
        else:
            ok = rate <= model.eps(int(key[key.index("[") + 1:-1])) + tol
            passed &= ok
            verdict = "pass" if ok else "fail"
        rows.append([key, _fmt(rate), _fmt(lo), _fmt(hi), _fmt(eps), _fmt(eps + tol), verdict])
    out = Path(args.out) if args.out else run / "validate"
    _write(out / "cc_report.csv",
           _csv(["constraint", "rate", "ci_lo", "ci_hi", "epsilon", "threshold", "verdict"], rows))
    write_manifest(out, "validate-cc", {"rundir": str(run.resolve()), "samples": n, "seed": args.seed})
    worst = max((float(r[1]) for r in rows if r[6] != "info"), default=0.0)
    print(f"{'PASS' if passed else 'FAIL'}: worst chance-constraint violation rate {worst:.5f} "
          f"(epsilon {eps:g}, {n} samples)")
    return EXIT_OK if passed else EXIT_CC_FAIL


def cmd_figs(args) -> int:
    out = Path(args.out)
    case, pv_fleet = args.case, args.pv
    runs = [
        ("fig3", ["policy-sweep", "--variant", "I,II", "--policy", "all", "--droop", args.droop]),
        ("fig4", ["opf", "--mode", "admm", "--eps", FIG4_EPS]),
        ("fig6", ["opf", "--mode", "centralized"]),
        ("fig7", ["opf", "--mode", "admm", "--eps", "0.05"]),
    ]
    status = EXIT_OK
    for name, argv in runs:
        argv = list(argv)
        if case:
            argv += ["--case", case]
        if pv_fleet and name != "fig3":
            argv += ["--pv", pv_fleet]
        code = main(argv + ["--out", str(out / name)])
        if code != EXIT_OK:
            print(f"{name}: exit {code}", file=sys.stderr)
            status = status or code
    # the loss traces and per-inverter comparison come out of the same runs
    for src, dst in (("fig4", "fig5"), ("fig7", "fig8")):
        if (out / src).is_dir():
            shutil.rmtree(out / dst, ignore_errors=True)
            shutil.copytree(out / src, out / dst)
    if (out / "fig7" / "injections.csv").is_file():
        code = main(["validate-cc", str(out / "fig7"), "--samples", str(args.samples), "--seed", str(args.seed),
                     "--out", str(out / "validation")])
        status = status or code
    write_manifest(out, "figs", {"case": _abs(case), "pv": _abs(pv_fleet), "droop": args.droop,
                                 "samples": args.samples, "seed": args.seed})
    return status


def manifest_argv(manifest: dict) -> list[str]:
    """Command line that reproduces a manifest's run (without --out)."""
    cmd, a = manifest["command"], manifest["args"]
    argv = [cmd]
    if cmd == "validate-cc":
        return argv + [a["rundir"], "--samples", str(a["samples"]), "--seed", str(a["seed"])]
    flags = {"case": "--case", "pv": "--pv", "policy": "--policy", "droop": "--droop", "variant": "--variant",
             "mode": "--mode", "eps": "--eps", "rho": "--rho", "max_iters": "--max-iters",
             "samples": "--samples", "seed": "--seed"}
    for key in sorted(a):
        if a[key] is not None:
            argv += [flags[key], str(a[key])]
    return argv


def cmd_rerun(args) -> int:
    p = Path(args.manifest)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.is_file():
        raise InputError(f"manifest not found: {p}")
    try:
        manifest = json.loads(p.read_text(encoding="utf-8"))
        argv = manifest_argv(manifest)
    except (json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"{p}: malformed manifest ({exc})") from exc
    return main(argv + ["--out", args.out])


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccdopf", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, pv_help):
        p.add_argument("--case", help="Matpower case file (default: bundled case33bw)")
        p.add_argument("--pv", help=pv_help)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("powerflow", help="LinDistFlow voltages and flows")
    common(p, "PV config; inverters inject their p/q references")
    p.set_defaults(func=cmd_powerflow)

    p = sub.add_parser("policy-sweep", help="closed-loop losses against droop K")
    common(p, "PV config (default: bundled single inverter at bus 5)")
    p.add_argument("--policy", default="all", help="policy name, comma list, or 'all'")
    p.add_argument("--droop", default="0:20:0.5", help="droop grid LO:HI:STEP")
    p.add_argument("--variant", default="I", help="load perturbation: I, II, none (comma list allowed)")
    p.set_defaults(func=cmd_policy_sweep)

    p = sub.add_parser("opf", help="centralized or ADMM loss-minimizing OPF")
    common(p, "PV config (default: bundled 33-bus fleet)")
    p.add_argument("--mode", default="centralized", help="centralized or admm")
    p.add_argument("--eps", help="chance-constraint tolerance(s); omit for the deterministic problem")
    p.add_argument("--rho", type=float, help="ADMM penalty (default 1/V_root^2)")
    p.add_argument("--max-iters", type=int, default=500, dest="max_iters")
    p.set_defaults(func=cmd_opf)

    p = sub.add_parser("validate-cc", help="Monte Carlo check of chance constraints on an opf run")
    p.add_argument("rundir")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--out", help="report directory (default: RUNDIR/validate)")
    p.set_defaults(func=cmd_validate_cc)

    p = sub.add_parser("figs", help="data behind every experiment figure")
    p.add_argument("--case")
    p.add_argument("--pv", help="fleet config for the OPF runs")
    p.add_argument("--droop", default="0:20:0.5")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_figs)

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest", help="manifest.json or the directory holding it")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
