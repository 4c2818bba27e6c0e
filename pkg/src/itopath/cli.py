"""Command line front end: run experiments, sweep parameters, list the registry."""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from .harness import (
    REGISTRY,
    make_config,
    report_text,
    run_experiment,
    sweep,
    sweep_text,
)

# config-file keys, in the order they are echoed; flag names mirror these
CONFIG_KEYS = {
    "manifold": str,
    "horizon": float,
    "dt": float,
    "n_paths": int,
    "n_resamples": int,
    "seed": int,
    "tolerance": float,
    "out_dir": str,
}


def parse_config_file(path: str) -> dict:
    """Flat key = value lines; # starts a comment; keys match config fields."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, text = line.partition("=")
            key = key.strip()
            text = text.strip().strip('"')
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = CONFIG_KEYS[key](text)
    return values


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="flat key = value config file")
    parser.add_argument("--manifold")
    parser.add_argument("--horizon", type=float)
    parser.add_argument("--dt", type=float)
    parser.add_argument("--n-paths", type=int, dest="n_paths")
    parser.add_argument("--n-resamples", type=int, dest="n_resamples")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--tolerance", type=float)
    parser.add_argument("--out", "--out-dir", dest="out_dir", metavar="DIR")


def _collect_config(args) -> dict:
    values = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="itopath",
        description="Monte Carlo checks for gradient Brownian systems on "
                    "embedded manifolds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    run_p.add_argument("experiment_id")
    _add_config_flags(run_p)

    sweep_p = sub.add_parser("sweep", help="rerun an experiment across dt or n_paths")
    sweep_p.add_argument("experiment_id")
    sweep_p.add_argument("--param", required=True, choices=["dt", "n_paths"])
    sweep_p.add_argument("--values", required=True,
                         help="comma separated values, e.g. 4e-3,2e-3,1e-3")
    _add_config_flags(sweep_p)

    sub.add_parser("list", help="list registered experiments")

    args = parser.parse_args(argv)

    if args.command == "list":
        width = max(len(k) for k in REGISTRY)
        for key in sorted(REGISTRY):
            spec = REGISTRY[key]
            print(f"{key:<{width}}  {spec.description}")
            print(f"{'':<{width}}  exercises: {', '.join(spec.exercises)}")
        return 0

    try:
        config = make_config(args.experiment_id, **_collect_config(args))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "run":
        report = run_experiment(config)
        print(report_text(report), end="")
        return 0 if report.passed else 1

    values = [v for v in args.values.split(",") if v]
    if not values:
        print("error: empty value list", file=sys.stderr)
        return 2
    cast = int if args.param == "n_paths" else float
    try:
        parsed = [cast(float(v)) if args.param == "n_paths" else cast(v) for v in values]
        report = sweep(config, args.param, parsed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(sweep_text(report), end="")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
