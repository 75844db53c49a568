"""Command-line entry point: ``comesh run | verify | avail``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .analysis import AvailabilityParams, InvalidParameter, availability, availability_montecarlo, format_summary
from .experiments import ExperimentResult, excerpt, run_scenario, write_outputs
from .model import ConfigError
from .scenario import load_scenario

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG = 0, 1, 2


def _seeds(text: str | None) -> list[int] | None:
    if not text:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _report_violations(res: ExperimentResult, out=sys.stderr, keep: int = 3) -> None:
    vs = res.violations()
    print(f"{len(vs)} monitor violation(s)", file=out)
    for point, seed, v in vs[:keep]:
        print(f"  [{v.monitor}] point={point} seed={seed} t={v.t:.3f} {json.dumps(v.detail, default=str)}", file=out)


def cmd_run(args: argparse.Namespace) -> int:
    sc = load_scenario(args.scenario)
    res = run_scenario(sc, args.seeds, jobs=args.jobs, keep_records=args.traces)
    paths = write_outputs(res, args.out, traces=args.traces)
    if res.availability_rows:
        for r in res.availability_rows:
            print(f"F={r['F']:>4}  availability={r['availability']:.6g}")
    else:
        print(format_summary(res.report.summary()))
    print(f"wrote {len(paths)} file(s) to {args.out}", file=sys.stderr)
    if not res.ok:
        print("error: invariant monitors flagged this run", file=sys.stderr)
        _report_violations(res)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    sc = load_scenario(args.scenario)
    res = run_scenario(sc, args.seeds, jobs=args.jobs, keep_records=True)
    totals: dict[str, list[int]] = {}
    for row in res.verdict_rows():
        t = totals.setdefault(row["monitor"], [0, 0])
        t[0] += 1
        t[1] += 0 if row["ok"] else 1
    for name, (n, bad) in totals.items():
        print(f"{name:<12} {'PASS' if bad == 0 else 'FAIL'}  ({n - bad}/{n} trials clean)")
    if res.ok:
        return EXIT_OK
    point, seed, v = res.violations()[0]
    trial = next(t for p in res.points if p.name == point for t in p.trials if t.seed == seed)
    print(f"\ncounterexample: monitor={v.monitor} point={point} seed={seed} t={v.t:.3f}")
    print(f"  {json.dumps(v.detail, default=str)}")
    for r in excerpt(trial.records, v):
        print("  " + json.dumps(r, default=str))
    return EXIT_VIOLATION


def _F_range(text: str) -> list[int]:
    parts = [int(x) for x in text.split(":")]
    if len(parts) == 1:
        return parts
    if len(parts) not in (2, 3):
        raise argparse.ArgumentTypeError("F range is lo:hi or lo:hi:step")
    return list(range(parts[0], parts[1] + 1, parts[2] if len(parts) == 3 else 1))


def cmd_avail(args: argparse.Namespace) -> int:
    k = args.k if args.k is not None else 2 * args.f + 1
    cols = ["F", "availability [probability]"]
    if args.mc:
        cols += ["mc_estimate [probability]", "mc_stderr [probability]"]
    print(",".join(cols))
    for F in args.F_range:
        p = AvailabilityParams(args.S, args.G, k, args.f, F)
        row = [str(F), repr(availability(p))]
        if args.mc:
            mc = availability_montecarlo(p, args.mc, args.seed + F)
            row += [repr(mc.estimate), repr(mc.stderr)]
        print(",".join(row))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="comesh", description="Edge-mesh routine control plane simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a scenario and write metric CSVs")
    r.add_argument("scenario", type=Path)
    r.add_argument("--seeds", type=_seeds, default=None, help="comma-separated seeds (default: scenario/config)")
    r.add_argument("--out", type=Path, default=Path("out"))
    r.add_argument("--jobs", type=int, default=1, help="worker processes")
    r.add_argument("--traces", action="store_true", help="also dump JSONL traces")
    r.set_defaults(fn=cmd_run)

    v = sub.add_parser("verify", help="run invariant monitors and report per-property verdicts")
    v.add_argument("scenario", type=Path)
    v.add_argument("--seeds", type=_seeds, default=None)
    v.add_argument("--jobs", type=int, default=1)
    v.set_defaults(fn=cmd_verify)

    a = sub.add_parser("avail", help="closed-form availability curve as CSV on stdout")
    a.add_argument("--S", type=int, required=True)
    a.add_argument("--G", type=int, required=True)
    a.add_argument("--k", type=int, default=None, help="group size (default 2f+1)")
    a.add_argument("--f", type=int, required=True)
    a.add_argument("--F-range", dest="F_range", type=_F_range, required=True, help="F or lo:hi[:step]")
    a.add_argument("--mc", type=int, default=0, help="Monte Carlo trials per point (0 = off)")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_avail)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InvalidParameter, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
