"""Command line entry point.

    drbsde solve-bsde --config run.ini --seed 3 --out results/
    drbsde converge --config run.ini --axis M
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..core import DrbsdeError
from .config import AXES, PRESETS, ConfigError, ExperimentConfig, load_config, preset
from .scenarios import (Checks, convergence_study, emit_report, run_experiment,
                        write_convergence_table)

COMMANDS = {
    "solve-bsde": "bsde",
    "solve-pde": "pde",
    "cross-validate": "cross-validate",
    "penalize": "penalized",
    "game": "game",
    "double-barrier": "double-barrier",
    "converge": None,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drbsde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", type=Path, help="INI-style experiment file")
        p.add_argument("--scenario", help=f"named preset ({', '.join(sorted(PRESETS))})")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--quiet", action="store_true")
        if cmd == "converge":
            p.add_argument("--axis", choices=AXES)
            p.add_argument("--values", help="comma-separated axis values")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.scenario is None:
        base = COMMANDS[args.command] or "bsde"
        cfg = ExperimentConfig(scenario=base)
    else:
        cfg = None
    if args.scenario is not None:
        if args.scenario not in PRESETS:
            raise ConfigError(f"--scenario: unknown preset {args.scenario!r}; known: {sorted(PRESETS)}")
        cfg = preset(args.scenario) if cfg is None else replace(
            cfg, scenario=PRESETS[args.scenario][0], label=args.scenario)
    target = COMMANDS[args.command]
    if target is not None and cfg.scenario != target and args.scenario is None:
        cfg = replace(cfg, scenario=target)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if getattr(args, "axis", None):
        cfg = replace(cfg, axis=args.axis)
    if getattr(args, "values", None):
        try:
            cfg = replace(cfg, axis_values=tuple(float(v) for v in args.values.split(",")))
        except ValueError:
            raise ConfigError(f"--values: cannot parse {args.values!r}") from None
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "converge":
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            rows = convergence_study(cfg, cfg.axis)
            write_convergence_table(rows, out / f"convergence_{cfg.axis}.csv")
            emit_report(cfg, {"convergence": rows}, Checks(), out)
            status = 0
        else:
            status = run_experiment(cfg)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DrbsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not args.quiet:
        print(f"{'ok' if status == 0 else 'FAILED'}: results in {cfg.out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
