#!/usr/bin/env python3
"""
basrange command line
run: execute a scenario and write trace.jsonl, report.json and summary.txt
plan: enumerate attack paths; stats: exposure ratios for a device inventory
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .attacks import run_scenario
from .config import Settings, load_settings
from .errors import BasRangeError
from .planner import (EntryClass, build_graph, enumerate_paths, exposure_stats, load_inventory,
                      load_vulndb, paths_json)
from .scenario import AttackReport, Outcome, load_scenario_file, report_json, write_report
from .topology import load_topology

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2

OUTCOME_MARKS = {Outcome.ACHIEVED: "✅", Outcome.PARTIAL: "⚠️", Outcome.FAILED: "❌"}


def setup_logging(debug: bool = False) -> None:
    level_name = "DEBUG" if debug else os.environ.get("BASRANGE_LOG", "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s', force=True)


def summary_text(report: AttackReport) -> str:
    lines = [
        f"Scenario: {report.scenario}",
        f"Seed: {report.seed}  Duration: {report.duration_s}s  Trace events: {report.trace_events}",
        f"Availability: {report.availability:.4f}" if report.availability is not None else "Availability: n/a",
        "",
        "Steps:",
    ]
    if not report.steps:
        lines.append("  (none)")
    for step in report.steps:
        window = f"{step.t_start}s-" + (f"{step.t_stop}s" if step.t_stop is not None else "end")
        reason = f" ({step.reason})" if step.reason else ""
        lines.append(f"  {OUTCOME_MARKS[step.outcome]} [{step.index}] {step.kind.value} {window}: "
                     f"{step.outcome.value}{reason}")
    lines += ["", f"Alerts: {len(report.alerts)}"]
    counts = {}
    for alert in report.alerts:
        counts[alert.detector.value] = counts.get(alert.detector.value, 0) + 1
    for detector, count in sorted(counts.items()):
        lines.append(f"  {detector}: {count}")
    return "\n".join(lines) + "\n"


def _settings(config_path: Optional[str]) -> Optional[Settings]:
    return load_settings(Path(config_path)) if config_path else None


def cmd_run(args: argparse.Namespace) -> int:
    scenario, base_dir = load_scenario_file(args.scenario)
    settings = _settings(args.config)
    world, trace, report = run_scenario(scenario, base_dir, seed=args.seed, duration_s=args.duration,
                                        settings=settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace.write_jsonl(out / "trace.jsonl", world.settings.sim.trace_payload_limit)
    write_report(report, out / "report.json")
    summary = summary_text(report)
    with open(out / "summary.txt", 'w', encoding='utf-8', newline='\n') as f:
        f.write(summary)
    logger.info(f"Wrote trace, report and summary to {out}")
    print(report_json(report) if args.format == "json" else summary, end="")
    return EXIT_OK


def cmd_plan(args: argparse.Namespace) -> int:
    topology = load_topology(args.topology)
    vulndb = load_vulndb(args.vulndb)
    graph = build_graph(topology, vulndb)
    paths = enumerate_paths(graph, args.entry, args.target, max_len=args.max_len)
    if args.format == "json":
        print(paths_json(paths), end="")
        return EXIT_OK
    if not paths:
        print(f"No attack paths to {args.target}")
    for path in paths:
        steps = " -> ".join(f"{h.device} [{', '.join(t.value for t in h.tactics)}]" for h in path.hops)
        print(f"{path.entry_class.value}: {steps}")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    stats = exposure_stats(load_inventory(args.inventory))
    if args.format == "json":
        print(json.dumps(stats.model_dump(mode="json"), indent=2, sort_keys=True))
        return EXIT_OK
    for row in stats.rows:
        mark = "⚠️ " if row.discrepancy else ""
        reported = f" (reported {row.reported_pct}%)" if row.reported_pct is not None else ""
        print(f"{mark}{row.device_class}: {row.vulnerable}/{row.total} = {row.pct}%{reported}")
    if stats.aggregate is not None:
        a = stats.aggregate
        print(f"{a.device_class}: {a.vulnerable}/{a.total} = {a.pct}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="basrange",
                                     description='Smart-building network range - attack scenarios, '
                                                 'attack paths and exposure statistics')
    parser.add_argument('--debug', action='store_true', help='Enable debug logging (overrides BASRANGE_LOG)')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='Run a scenario file or bundled scenario name')
    run.add_argument('scenario', help='Scenario path or bundled name (e.g. lab-default)')
    run.add_argument('--seed', type=int, help='Replace the scenario seed')
    run.add_argument('--duration', type=float, help='Replace the scenario duration in seconds')
    run.add_argument('--out', default='.', help='Output directory (default: current directory)')
    run.add_argument('--format', choices=['json', 'text'], default='text', help='What to print on stdout')
    run.add_argument('--config', help='Settings JSON file')
    run.set_defaults(handler=cmd_run)

    plan = sub.add_parser('plan', help='Enumerate attack paths to a target device')
    plan.add_argument('--topology', default='lab', help='Topology path or bundled name')
    plan.add_argument('--vulndb', default='vulndb', help='Vulnerability database path or bundled name')
    plan.add_argument('--entry', choices=[e.value for e in EntryClass], help='Entry class (default: all)')
    plan.add_argument('--target', required=True, help='Target device id')
    plan.add_argument('--max-len', type=int, default=6, help='Maximum number of hops')
    plan.add_argument('--format', choices=['json', 'text'], default='json')
    plan.set_defaults(handler=cmd_plan)

    stats = sub.add_parser('stats', help='Exposure ratios for a device inventory')
    stats.add_argument('inventory', nargs='?', default='inventory', help='Inventory path or bundled name')
    stats.add_argument('--format', choices=['json', 'text'], default='text')
    stats.set_defaults(handler=cmd_stats)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.debug)
    try:
        return args.handler(args)
    except BasRangeError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        print(f"❌ internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
