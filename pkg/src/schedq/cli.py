"""Command-line entry point: ``schedq <experiment> --seed N [options]``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from .experiments import (EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE, EXPERIMENTS, ExperimentSpec,
                          UsageError, run_experiment)


def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="schedq", description=__doc__)
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for name, exp in EXPERIMENTS.items():
        p = sub.add_parser(name, help=exp.help)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--machine", action="append", default=None,
                       help=f"repeatable; default {', '.join(exp.machines)}")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--config", type=Path, default=None,
                       help="YAML mapping of parameter overrides (flags win)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE")
        p.add_argument("--parallel", action="store_true",
                       help="run independent grid points in worker processes")
        p.add_argument("--strict", action="store_true",
                       help="exit non-zero if any criterion check fails")
    return parser


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    overrides: dict = {}
    if args.config is not None:
        loaded = yaml.safe_load(args.config.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config} must hold a mapping")
        overrides.update(loaded)
    overrides.update(_parse_set(args.overrides))
    return ExperimentSpec(
        name=args.experiment,
        seed=args.seed,
        machines=tuple(args.machine or ()),
        overrides=tuple(sorted(overrides.items())),
        out=args.out,
        parallel=args.parallel,
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = spec_from_args(args)
        result = run_experiment(spec)
    except UsageError as exc:
        print(f"schedq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for crit, check in sorted(result.checks.items(), key=lambda kv: int(kv[0])):
        print(f"criterion {crit}: {'PASS' if check['pass'] else 'FAIL'}")
    if spec.out is not None:
        print(f"wrote {len(result.files) + 1} files to {spec.out}")
    if result.status != EXIT_OK:
        return result.status
    if args.strict and not result.passed:
        return EXIT_CHECK_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
