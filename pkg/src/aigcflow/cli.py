"""Command line: run, replay, validate, export, acceptance.

Exit codes: 0 ok, 1 invariant violation (or failed criterion / replay
mismatch), 2 configuration or input error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import yaml

from .fabric import ConfigError
from .report import ExportError, SimReport

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2


def _override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), yaml.safe_load(value)


def _scenario(args: argparse.Namespace):
    from .scenario import load_scenario

    overrides = dict(args.set or ())
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.run_length is not None:
        overrides["run_length"] = args.run_length
    return load_scenario(args.scenario, environ=os.environ, overrides=overrides)


def cmd_run(args: argparse.Namespace) -> int:
    from .sim import Simulation

    scenario = _scenario(args)
    report = Simulation(scenario).run()
    agg = report.aggregates
    print(f"{report.name}: seed {report.seed}, {report.run_length} ticks (time_scale {report.time_scale})")
    for key in ("arrivals", "accepted", "rejected", "completed", "dropped", "in_flight", "duplicates",
                "corruption_skips", "rebalances", "elections"):
        print(f"  {key:<17} {agg[key]}")
    if args.out:
        for path in report.export(args.out, args.format):
            print(f"  wrote {path}")
    for v in report.violations:
        print(f"VIOLATION {v}")
    return EXIT_OK if report.ok else EXIT_VIOLATION


def cmd_replay(args: argparse.Namespace) -> int:
    from .liveness import load_case, replay

    ref = args.case
    case = load_case(ref)
    verdict = replay(case)
    print(verdict.render())
    if args.log:
        from .fabric import write_event_log

        write_event_log(verdict.log, args.log)
    return EXIT_OK if verdict.passed else EXIT_VIOLATION


def cmd_validate(args: argparse.Namespace) -> int:
    scenario = _scenario(args)
    stages = ", ".join(f"{n}={t.duration}" for n, t in scenario.topology.stages.items())
    print(f"{args.scenario}: ok ({len(scenario.instances)} instances, stages {stages} ticks, "
          f"time_scale {scenario.time_scale})")
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    try:
        report = SimReport.load(args.report)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from exc
    for path in report.export(args.out, args.format):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_acceptance(args: argparse.Namespace) -> int:
    from .acceptance import run_all

    only = sorted({int(x) for x in args.only.split(",")}) if args.only else None
    if only and not all(1 <= n <= 10 for n in only):
        raise ConfigError("criteria are numbered 1 to 10")
    outcomes = run_all(seed=args.seed, only=only)
    if args.export_dir:
        out = Path(args.export_dir)
        out.mkdir(parents=True, exist_ok=True)
        for o in outcomes:
            (out / f"criterion_{o.number:02d}.jsonl").write_bytes(o.export)
    failed = [o for o in outcomes if not o.passed]
    for o in failed:
        for p in o.problems[:10]:
            print(f"  criterion {o.number}: {p}")
    print(f"{len(outcomes) - len(failed)}/{len(outcomes)} criteria passed")
    return EXIT_OK if not failed else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    from .acceptance import DEFAULT_SEED

    parser = argparse.ArgumentParser(prog="aigcflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("scenario", help="scenario file (yaml or json)")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--run-length", help="override run_length (time units, e.g. 500 or 1001/2)")
        p.add_argument("--set", action="append", type=_override, metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("run", help="simulate a scenario and report")
    scenario_args(p)
    p.add_argument("--out", help="write the report here")
    p.add_argument("--format", choices=("jsonl", "json-lines", "csv"), default="jsonl")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("replay", help="replay a liveness case (1-8 or a case file)")
    p.add_argument("case")
    p.add_argument("--log", help="write the fabric event log (json lines)")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("validate", help="check a scenario against the schema")
    scenario_args(p)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("export", help="convert a saved report to json-lines or csv")
    p.add_argument("report")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("jsonl", "json-lines", "csv"), default="csv")
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("acceptance", help="run the acceptance criteria")
    p.add_argument("--only", help="comma-separated criterion numbers")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--export-dir", help="write each criterion's export here")
    p.set_defaults(fn=cmd_acceptance)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, ExportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
