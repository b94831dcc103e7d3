#!/usr/bin/env python3
"""Variational-inference sweep: smoothing/bridge classification posteriors
plus the hierarchical problems, across posterior families."""

import argparse
import sys
from pathlib import Path

from emflow.cli import main as emflow_main

PROBLEMS = {
    "brs-c": [f"table3-brs-c-{a}" for a in ("gemft", "iaf", "mf", "mvn")],
    "brb-c": [f"table3-brb-c-{a}" for a in ("gemft", "iaf", "mf", "mvn")],
    "lzs-c": [f"table3-lzs-c-{a}" for a in ("gemft", "iaf", "mf", "mvn")],
    "es": [f"vi-es-{a}" for a in ("gemft", "iaf", "mf", "mvn")],
    "tree-lin8": [f"vi-tree-lin8-{a}" for a in ("gemft", "iaf", "mf")],
}

DESK_OVERRIDES = [
    "--override", "train.iterations=10000",
    "--override", "architecture.hidden=64 64",
    "--override", "train.learning_rate=1e-3",
]


def run(out_root: Path, seeds, paper: bool, problems) -> int:
    out_root.mkdir(parents=True, exist_ok=True)
    for key, presets in PROBLEMS.items():
        if problems and key not in problems:
            continue
        for preset in presets:
            out = out_root / preset
            args = ["vi", "--preset", preset, "--out", str(out)]
            for seed in seeds:
                args += ["--seed", str(seed)]
            if not paper:
                overrides = list(DESK_OVERRIDES)
                if preset.endswith("-mf") or preset.endswith("-mvn"):
                    overrides[-1] = "train.learning_rate=1e-2"
                args += overrides
            print(f"== {preset}")
            code = emflow_main(args)
            if code != 0:
                return code
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/vi")
    parser.add_argument("--seed", type=int, action="append")
    parser.add_argument("--paper", action="store_true")
    parser.add_argument("--problems", nargs="*",
                        help=f"subset of {sorted(PROBLEMS)}")
    args = parser.parse_args()
    sys.exit(run(Path(args.out), args.seed or [0], args.paper,
                 args.problems))
