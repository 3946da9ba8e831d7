"""Command-line front end.

Exit codes: 0 certified (or a non-certifying command completed),
1 inconclusive, 2 input error, 3 candidate rejected by validation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .augment import UnsupportedSetError, build_product, build_reach_regions, build_safety_regions, \
    check_initial_assumption
from .certvalidate import certificate_to_dict, check_policy_bounds, load_certificate, recheck_fixed_certificate, \
    save_certificate, validate_certificate
from .polyalg import PolynomialSyntaxError, UnknownVariableError
from .sdpsolve import BudgetExceededError, SolverConfig, solve_feasibility
from .simkit import GREEDY, RANDOM, export_trajectories, monte_carlo_reach, monte_carlo_safety
from .soscompile import build_safety_program, build_reach_program, compile_to_sdp, extract_certificate, \
    parse_fixed_policy
from .sysmodel import SpecError, UnsampleableSetError, load_spec

log = logging.getLogger("acbc")

EXIT = {"certified-opaque": 0, "certified-lack": 0, "completed": 0, "inconclusive": 1,
        "input-error": 2, "candidate-rejected": 3}
# keys whose values depend on wall-clock time; left out of written reports
_VOLATILE = {"seconds", "timing"}


class InputError(Exception):
    pass


@dataclass
class RunReport:
    task: str
    inputs: dict
    outcome: str = "inconclusive"
    message: str = ""
    certificate: dict | None = None
    solver: list = field(default_factory=list)
    validation: dict | None = None
    extra: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return EXIT[self.outcome]

    def to_dict(self) -> dict:
        d = {"task": self.task, "inputs": self.inputs, "outcome": self.outcome, "message": self.message,
             "solver": self.solver, "timing": self.timing}
        if self.certificate is not None:
            d["certificate"] = self.certificate
        if self.validation is not None:
            d["validation"] = self.validation
        d.update(self.extra)
        return d


def _canonical(obj, volatile: bool):
    if isinstance(obj, dict):
        return {str(k): _canonical(v, volatile) for k, v in obj.items() if volatile or k not in _VOLATILE}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v, volatile) for v in obj]
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if hasattr(obj, "item"):      # numpy scalars
        return _canonical(obj.item(), volatile)
    return obj


def report_json(report: RunReport, include_timing: bool = False) -> str:
    """Canonical JSON: sorted keys, shortest round-trip floats, no wall-clock fields by default."""
    return json.dumps(_canonical(report.to_dict(), include_timing), sort_keys=True, indent=2,
                      allow_nan=False) + "\n"


def write_report(report: RunReport, path, include_timing: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_json(report, include_timing))


# ---------------------------------------------------------------------------


def _digest(args) -> dict:
    h = hashlib.sha256(Path(args.spec).read_bytes()).hexdigest() if args.spec and Path(args.spec).is_file() else None
    keep = ("spec", "delta", "deg_b", "deg_v", "deg_policy", "deg_mult", "deg_sweep", "eps_lo", "eps_hi", "slack",
            "margin", "fixed_policy", "samples", "seed", "horizon", "trials", "cert", "strategy", "grid",
            "skip_assumption", "tol")
    d = {k: getattr(args, k) for k in keep if getattr(args, k, None) is not None}
    d["spec_sha256"] = h
    return d


def _load_system(args):
    try:
        sys_ = load_spec(args.spec)
        if args.delta is not None:
            sys_ = sys_.with_delta(args.delta)
    except SpecError as exc:
        raise InputError(str(exc)) from exc
    return sys_


def _degrees(args, single: int) -> list[int]:
    if not args.deg_sweep:
        return [single]
    try:
        lo, hi = (int(v) for v in args.deg_sweep.split(".."))
    except ValueError as exc:
        raise InputError("--deg-sweep expects lo..hi") from exc
    if lo < 0 or hi < lo:
        raise InputError("--deg-sweep needs 0 <= lo <= hi")
    return list(range(lo, hi + 1))


def _out_dir(args) -> Path | None:
    if not args.out:
        return None
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _assumption(sys_, args, report: RunReport) -> bool:
    rep = check_initial_assumption(sys_, samples=args.assumption_samples, seed=args.seed)
    report.extra["assumption"] = {"holds": rep.holds, "witness": list(rep.witness) if rep.witness else None,
                                  "worst_gap": rep.worst_gap, "checked": rep.checked, "vacuous": rep.vacuous}
    if not rep.holds:
        report.outcome = "input-error"
        report.message = (f"initial-state assumption fails for delta={sys_.delta}: secret initial state "
                          f"{list(rep.witness)} has no non-secret initial state within delta in output")
    return rep.holds


def _synthesize(kind: str, args, report: RunReport) -> int:
    t0 = time.perf_counter()
    sys_ = _load_system(args)
    if kind == "safety" and not args.skip_assumption:
        if not _assumption(sys_, args, report):
            return report.exit_code
    aug = build_product(sys_)
    try:
        regions = build_safety_regions(aug, args.margin) if kind == "safety" else \
            build_reach_regions(aug, args.margin)
    except UnsupportedSetError as exc:
        raise InputError(str(exc)) from exc
    report.extra["region_warnings"] = list(regions.warnings)
    fixed = None
    if args.fixed_policy:
        try:
            fixed = parse_fixed_policy(args.fixed_policy, aug, "u" if kind == "safety" else "uh")
        except (ValueError, PolynomialSyntaxError, UnknownVariableError) as exc:
            raise InputError(f"--fixed-policy: {exc}") from exc
    config = SolverConfig(tol=args.tol)
    single = args.deg_b if kind == "safety" else args.deg_v
    out = _out_dir(args)
    report.outcome = "inconclusive"
    for deg in _degrees(args, single):
        try:
            if kind == "safety":
                prog = build_safety_program(aug, regions, deg_b=deg, deg_policy=args.deg_policy,
                                            deg_mult=args.deg_mult, eps_lo=args.eps_lo, eps_hi=args.eps_hi,
                                            fixed_policy=fixed)
            else:
                prog = build_reach_program(aug, regions, deg_v=deg, deg_policy=args.deg_policy,
                                           deg_mult=args.deg_mult, eps=args.slack, fixed_policy=fixed)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        sdp = compile_to_sdp(prog)
        if args.dump_sdp:
            sdp.dump(args.dump_sdp)
        entry = {"degree": deg, "program": prog.summary(), "psd_total": int(sum(sdp.block_sizes)),
                 "rows": int(sdp.n_rows), "warnings": list(prog.warnings)}
        report.solver.append(entry)
        try:
            sol = solve_feasibility(sdp, config)
        except BudgetExceededError as exc:
            entry["status"] = "budget-exceeded"
            report.message = str(exc)
            break
        entry.update(sol.stats())
        if sol.status != "feasible":
            report.message = f"degree {deg}: SDP {sol.status} ({sol.message})"
            continue
        cert = extract_certificate(prog, sdp, sol)
        validation = validate_certificate(cert, aug, regions, samples=args.samples, seed=args.seed)
        report.validation = validation.to_dict()
        report.validation["policy_bounds"] = check_policy_bounds(cert, aug, samples=args.samples,
                                                                 seed=args.seed).to_dict()
        if validation.verdict != "no-violation-found":
            report.outcome = "candidate-rejected"
            report.message = f"degree {deg}: sampling found violations of the extracted certificate"
            break
        recheck = recheck_fixed_certificate(cert, aug, regions, deg_mult=args.deg_mult, config=config)
        report.extra["recheck"] = recheck.to_dict()
        if recheck.certified:
            report.outcome = "certified-opaque" if kind == "safety" else "certified-lack"
            report.certificate = certificate_to_dict(cert)
            report.message = f"degree {deg}: certificate found, sampled and re-checked"
            if out is not None:
                save_certificate(cert, out / "certificate.json")
            break
        report.message = f"degree {deg}: fixed-certificate re-check {recheck.outcome} ({recheck.message})"
    report.timing["seconds"] = time.perf_counter() - t0
    return report.exit_code


def _validate_cert(args, report: RunReport) -> int:
    if not args.cert:
        raise InputError("validate-cert needs --cert PATH")
    sys_ = _load_system(args)
    aug = build_product(sys_)
    try:
        cert = load_certificate(args.cert, aug)
    except (OSError, ValueError, KeyError, PolynomialSyntaxError, UnknownVariableError) as exc:
        raise InputError(f"cannot load certificate: {exc}") from exc
    try:
        regions = build_safety_regions(aug, args.margin) if cert.kind == "safety" else \
            build_reach_regions(aug, args.margin)
    except UnsupportedSetError as exc:
        raise InputError(str(exc)) from exc
    validation = validate_certificate(cert, aug, regions, samples=args.samples, seed=args.seed)
    report.validation = validation.to_dict()
    report.validation["policy_bounds"] = check_policy_bounds(cert, aug, samples=args.samples,
                                                             seed=args.seed).to_dict()
    if validation.verdict != "no-violation-found":
        report.outcome = "candidate-rejected"
        report.message = "sampling found violations: " + ", ".join(
            c.name for c in validation.conditions if not c.ok)
        return report.exit_code
    recheck = recheck_fixed_certificate(cert, aug, regions, deg_mult=args.deg_mult,
                                        config=SolverConfig(tol=args.tol))
    report.extra["recheck"] = recheck.to_dict()
    if recheck.certified:
        report.outcome = "certified-opaque" if cert.kind == "safety" else "certified-lack"
        report.certificate = certificate_to_dict(cert)
        report.message = "no sampled violation and fixed-certificate SOS re-check certified"
    else:
        report.outcome = "inconclusive"
        report.message = "no sampled violation found; fixed-certificate SOS re-check did not certify"
    return report.exit_code


def _simulate(args, report: RunReport) -> int:
    sys_ = _load_system(args)
    aug = build_product(sys_)
    out = _out_dir(args)
    files = []
    if args.cert:
        try:
            cert = load_certificate(args.cert, aug)
        except (OSError, ValueError, KeyError, PolynomialSyntaxError, UnknownVariableError) as exc:
            raise InputError(f"cannot load certificate: {exc}") from exc
        if cert.kind != "safety":
            raise InputError("simulate with --cert needs a safety certificate")
        regions = build_safety_regions(aug, args.margin)
        s = monte_carlo_safety(aug, regions, cert, args.trials, args.horizon, args.seed, keep=out is not None)
        report.extra["safety"] = s.to_dict()
        if out is not None:
            path = out / "safety_trajectories.csv"
            export_trajectories(s.trajectories, path, aug)
            files.append(path.name)
    else:
        text = args.fixed_policy or ";".join(["0"] * aug.m)
        try:
            policy = parse_fixed_policy(text, aug, "uh")
            regions = build_reach_regions(aug, args.margin)
        except (ValueError, PolynomialSyntaxError, UnknownVariableError) as exc:
            raise InputError(str(exc)) from exc
        strategies = [RANDOM, GREEDY] if args.strategy == "both" else [args.strategy]
        report.extra["reach"] = {}
        for st in strategies:
            r = monte_carlo_reach(aug, regions, policy, st, args.trials, args.horizon, args.seed, args.grid,
                                  keep=out is not None)
            report.extra["reach"][st] = r.to_dict()
            if out is not None:
                path = out / f"reach_{st}_trajectories.csv"
                export_trajectories(r.trajectories, path, aug)
                files.append(path.name)
        report.extra["region_warnings"] = list(regions.warnings)
    report.extra["csv"] = files
    report.outcome = "completed"
    report.message = "simulation finished; outcomes are reported, not certified"
    return report.exit_code


def _check_assumption(args, report: RunReport) -> int:
    sys_ = _load_system(args)
    if _assumption(sys_, args, report):
        report.outcome = "completed"
        report.message = f"no revealing secret initial state found for delta={sys_.delta}"
    return report.exit_code


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acbc", description="Opacity verification with augmented barrier certificates")
    p.add_argument("command", choices=["verify-opacity", "verify-lack", "validate-cert", "simulate",
                                       "check-assumption"])
    p.add_argument("--spec", required=True, help="system description (JSON)")
    p.add_argument("--delta", type=float, help="override the intruder precision")
    p.add_argument("--deg-b", type=int, default=2)
    p.add_argument("--deg-v", type=int, default=2)
    p.add_argument("--deg-policy", type=int, default=1)
    p.add_argument("--deg-mult", type=int, default=None)
    p.add_argument("--deg-sweep", default=None, help="try certificate degrees lo..hi in turn")
    p.add_argument("--eps-lo", type=float, default=1.0)
    p.add_argument("--eps-hi", type=float, default=1.001)
    p.add_argument("--slack", type=float, default=0.01)
    p.add_argument("--margin", type=float, default=0.01)
    p.add_argument("--fixed-policy", default=None, help='policy components "p1;...;pm"')
    p.add_argument("--cert", default=None, help="certificate file (validate-cert, simulate)")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--assumption-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=100)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--strategy", choices=[RANDOM, GREEDY, "both"], default="both")
    p.add_argument("--grid", type=int, default=5, help="greedy adversary grid points per input axis")
    p.add_argument("--tol", type=float, default=1e-7, help="SDP solver tolerance")
    p.add_argument("--skip-assumption", action="store_true")
    p.add_argument("--out", default=None, help="directory for report.json, certificate and CSV files")
    p.add_argument("--dump-sdp", default=None, help="write the compiled SDP in text form")
    p.add_argument("--timing", action="store_true", help="keep wall-clock fields in report.json")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> tuple[int, RunReport]:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    report = RunReport(args.command, _digest(args))
    handlers = {"verify-opacity": lambda: _synthesize("safety", args, report),
                "verify-lack": lambda: _synthesize("reach", args, report),
                "validate-cert": lambda: _validate_cert(args, report),
                "simulate": lambda: _simulate(args, report),
                "check-assumption": lambda: _check_assumption(args, report)}
    try:
        code = handlers[args.command]()
    except (InputError, SpecError, UnsampleableSetError) as exc:
        report.outcome = "input-error"
        report.message = str(exc)
        code = report.exit_code
    out = _out_dir(args)
    if out is not None:
        write_report(report, out / "report.json", args.timing)
    print(f"{args.command}: {report.outcome} (exit {code}) {report.message}")
    return code, report


def main(argv=None) -> int:
    code, _ = run(argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
