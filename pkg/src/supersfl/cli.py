"""Command-line entry point: run experiments, execute presets, list presets."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .presets import (
    format_summary_table,
    preset_catalog,
    run_preset,
    summarize_run,
)
from .sim import run_experiment, write_audit_jsonl, write_metrics_csv, write_metrics_jsonl


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="supersfl",
        description="Deterministic split-federated-learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    run.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value, e.g. --set num_clients=20 or --set aggregation.lambda=0.02",
    )
    run.add_argument("--outdir", default="runs", help="directory for metrics files")
    run.add_argument("--name", default="run", help="basename for the metrics files")

    preset = sub.add_parser("preset", help="execute a named preset study")
    preset.add_argument("name", help="preset name (see list-presets)")
    preset.add_argument("--outdir", default="runs", help="directory for metrics files")

    sub.add_parser("list-presets", help="list available presets")
    return parser


def _cmd_run(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    result = run_experiment(cfg)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / f"{args.name}.csv"
    write_metrics_csv(result.metrics, csv_path)
    write_metrics_jsonl(result.metrics, outdir / f"{args.name}.jsonl")
    if cfg.write_audit:
        write_audit_jsonl(result.audit, outdir / f"{args.name}_audit.jsonl")
    print(format_summary_table([summarize_run(args.name, result.metrics, cfg.target_accuracy)]))
    print(f"metrics written to {csv_path} (+ .jsonl)")
    return 0


def _cmd_preset(args) -> int:
    catalog = preset_catalog()
    if args.name not in catalog:
        raise ConfigError(
            f"unknown preset {args.name!r}; available: {', '.join(sorted(catalog))}"
        )
    preset = catalog[args.name]
    outdir = Path(args.outdir) / preset.name
    _, report = run_preset(preset, outdir)
    print(report)
    print(f"outputs written to {outdir}")
    return 0


def _cmd_list() -> int:
    for name, preset in sorted(preset_catalog().items()):
        print(f"{name:<20} {preset.description}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "preset":
            return _cmd_preset(args)
        return _cmd_list()
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
