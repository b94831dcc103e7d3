"""Command-line entry point.

Subcommands: gen-data, train, vi, compare, verify. Configuration comes
from --config PATH or --preset NAME (shipped preset files), optionally
modified by repeatable --override section.key=value flags. --seed is
repeatable and replaces the config's seed list. The dataset cache
directory is taken from EMFLOW_CACHE_DIR when set.
"""

from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

from .datasets import cache_dir
from .errors import ConfigError, EmflowError, MissingArtifact
from .experiments import ExperimentConfig, compare_runs, parse_config, \
    run_experiment
from .verify import run_verification

_KIND_BY_COMMAND = {"gen-data": "gen-data", "train": "mle", "vi": "vi"}


def _preset_path(name: str) -> Path:
    base = resources.files("emflow").joinpath("presets")
    candidate = base.joinpath(f"{name}.cfg")
    if not candidate.is_file():
        available = sorted(p.name[:-4] for p in base.iterdir()
                           if p.name.endswith(".cfg"))
        raise ConfigError(f"unknown preset {name!r}; available: {available}")
    return Path(str(candidate))


def _load_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("pass either --config or --preset, not both")
    if args.config:
        path = args.config
    elif args.preset:
        path = _preset_path(args.preset)
    else:
        raise ConfigError("a config is required (--config PATH or --preset NAME)")
    cfg = parse_config(path, overrides=args.override or ())
    if args.seed:
        cfg.seeds = tuple(args.seed)
    return cfg


def _add_common(sub):
    sub.add_argument("--config", help="experiment config file")
    sub.add_argument("--preset", help="named preset shipped with the package")
    sub.add_argument("--seed", type=int, action="append",
                     help="run seed (repeatable; replaces config seeds)")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                     help="config override (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emflow",
        description="Flow models with program-derived structured layers: "
                    "synthetic experiment runner")
    subs = parser.add_subparsers(dest="command", required=True)
    for cmd, help_text in (
            ("gen-data", "generate and cache a synthetic dataset"),
            ("train", "maximum-likelihood density estimation"),
            ("vi", "variational posterior fitting"),
    ):
        sub = subs.add_parser(cmd, help=help_text)
        _add_common(sub)
    comp = subs.add_parser("compare", help="aggregate run results into a table")
    _add_common(comp)
    subs.add_parser("verify", help="run the invariant self-check suite")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        failures, _total = run_verification()
        return 1 if failures else 0
    try:
        cfg = _load_config(args)
    except (ConfigError, MissingArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "compare":
            out = args.out or "comparison.csv"
            path = compare_runs(cfg, out)
            print(f"wrote {path}")
            return 0
        cfg.kind = _KIND_BY_COMMAND[args.command]
        out_dir = args.out or cfg.out
        if out_dir is None and cfg.kind == "gen-data":
            out_dir = str(cache_dir())
        summary = run_experiment(cfg, out_dir=out_dir)
        if cfg.kind == "gen-data":
            for path in summary["written"]:
                print(f"wrote {path}")
        else:
            print(f"{summary['metric']}: mean {summary['mean']:.6g} "
                  f"± {summary['sem']:.6g} over {summary['n_seeds']} seed(s)")
        return 0
    except (ConfigError, MissingArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EmflowError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
