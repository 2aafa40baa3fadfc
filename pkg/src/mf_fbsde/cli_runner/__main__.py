"""``mf-fbsde run | study | list-scenarios | report``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .registry import FAMILIES
from .runner import EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, run
from .scenario import ScenarioError, parse_scenario
from .study import convergence_study, parse_ladder


def _cmd_run(args) -> int:
    scn = parse_scenario(args.scenario)
    report = run(scn, args.out)
    for name, ok in sorted(report.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    if report.error:
        print(f"ERROR {report.error['message']}", file=sys.stderr)
    print(f"report: {Path(report.output_dir) / 'run_report.json'}")
    return report.exit_code


def _cmd_study(args) -> int:
    scn = parse_scenario(args.scenario)
    param, values = parse_ladder(args.ladder)
    out = args.out or scn.get("output", "directory")
    result = convergence_study(scn, param, values, out)
    for v, e in zip(result.values, result.errors):
        print(f"{param}={v!r:<24} error={e:.6g}")
    print(f"slope {result.slope:.4f}  95% CI [{result.ci_low:.4f}, {result.ci_high:.4f}]  ({result.label})")
    if result.passed is None:
        return EXIT_OK
    print(f"{'PASS' if result.passed else 'FAIL'}  slope within {list(result.band)}")
    return EXIT_OK if result.passed else EXIT_CHECK


def _cmd_list(args) -> int:
    width = max(len(n) for n in FAMILIES)
    for name in sorted(FAMILIES):
        fam = FAMILIES[name]
        print(f"{name:<{width}}  tasks: {', '.join(fam.tasks)}")
        print(f"{'':<{width}}  {fam.description}")
    return EXIT_OK


def _cmd_report(args) -> int:
    path = Path(args.directory) / "run_report.json"
    try:
        report = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    missing = [a for a in report["artifacts"] if not (Path(args.directory) / a).exists()]
    print(f"scenario hash {report['scenario_hash']}  version {report['tool_version']}")
    for name, ok in sorted(report["checks"].items()):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    if report.get("error"):
        print(f"ERROR {report['error']['message']}")
    for a in missing:
        print(f"MISSING artifact {a}")
    if missing:
        return EXIT_CHECK
    return int(report["exit_code"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mf-fbsde", description="Mean-field FBSDE solvers and checks.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the tasks of a scenario file")
    p.add_argument("scenario")
    p.add_argument("--out", help="output directory (overrides [output] directory)")
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("study", help="convergence ladder, e.g. --ladder dt=1/8,1/16,1/32,1/64")
    p.add_argument("scenario")
    p.add_argument("--ladder", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_study)
    p = sub.add_parser("list-scenarios", help="list registered coefficient families")
    p.set_defaults(func=_cmd_list)
    p = sub.add_parser("report", help="summarise a finished run directory")
    p.add_argument("directory")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
