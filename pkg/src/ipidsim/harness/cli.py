"""Command line entry point: ``ipidsim run --config scenario.toml``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from ..attacker import PHASES
from .batch import aggregate
from .config import ConfigError, load_config
from .scenario import run_scenario

OUTPUT_DIR_ENV = "IPIDSIM_OUTPUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENGINE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipidsim", description="Simulate the shared-IPID-counter TCP hijack.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario (or a batch of seeds)")
    run.add_argument("--config", required=True, help="scenario TOML file")
    run.add_argument("--seed", type=int, help="override the seed in the config")
    run.add_argument("--runs", type=int, default=1, help="number of seeds to run, starting at --seed")
    run.add_argument("--trace", help="write the event trace here (one file per run when --runs > 1)")
    run.add_argument("--summary", help=f"summary JSON path (default: ${OUTPUT_DIR_ENV}/summary.json or ./summary.json)")
    run.add_argument("--phase", choices=PHASES, help="run a single phase with earlier inputs taken from ground truth")
    return parser


def _trace_path(base: str, index: int, runs: int) -> Path:
    path = Path(base)
    if runs == 1:
        return path
    return path.with_name(f"{path.stem}.{index}{path.suffix}")


def _table(summary: dict, wall_s: float) -> str:
    lines = [f"{summary['kind']} seed={summary['seed']} rtt={summary['rtt_ms']}ms outcome={summary['outcome']}"]
    if summary["failure_reason"]:
        lines[0] += f" ({summary['failure_phase']}: {summary['failure_reason']})"
    lines.append(f"{'phase':<10} {'virtual_s':>10} {'packets':>8}  {'outcome':<8} value")
    for p in summary["phases"]:
        value = "" if p["inferred_value"] is None else p["inferred_value"]
        lines.append(f"{p['name']:<10} {p['virtual_ms'] / 1000:>10.1f} {p['packets_sent']:>8}  {p['outcome']:<8} {value}")
    lines.append(f"{'total':<10} {summary['total_virtual_ms'] / 1000:>10.1f}   (wall clock {wall_s:.2f} s)")
    return "\n".join(lines)


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        print(f"error: config file {args.config} not found", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.runs < 1:
        print("error: --runs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    seed0 = cfg.seed if args.seed is None else args.seed
    out_dir = Path(os.environ.get(OUTPUT_DIR_ENV, "."))
    summary_path = Path(args.summary) if args.summary else out_dir / "summary.json"

    summaries = []
    for i in range(args.runs):
        started = time.perf_counter()
        try:
            result = run_scenario(cfg, seed=seed0 + i, trace=bool(args.trace), phase=args.phase)
        except (ValueError, RuntimeError) as err:
            print(f"error: run with seed {seed0 + i} failed: {err}", file=sys.stderr)
            return EXIT_ENGINE
        wall = time.perf_counter() - started
        if args.trace:
            result.trace.write(_trace_path(args.trace, i, args.runs))
        summaries.append(result.summary)
        print(_table(result.summary, wall))
        if args.runs > 1:
            print()

    doc = summaries[0] if args.runs == 1 else {"batch": aggregate(summaries), "runs": summaries}
    summary_path.parent.mkdir(parents=True, exist_ok=True)
    summary_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if args.runs > 1:
        batch = doc["batch"]
        print(f"{batch['successes']}/{batch['runs']} succeeded; summary in {summary_path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
