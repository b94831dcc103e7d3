#!/usr/bin/env python3
"""Run the 2d toy density-estimation sweep and emit a comparison table.

Desk mode (default) shrinks conditioners and schedules so the sweep
finishes in well under an hour; --paper runs the shipped full-scale
presets (long).
"""

import argparse
import sys
from pathlib import Path

from emflow.cli import main as emflow_main

ARCHS = ["emft", "emfm", "maf", "mafl"]
DATASETS = ["8g", "ckb"]

DESK_OVERRIDES = [
    "--override", "train.iterations=20000",
    "--override", "architecture.hidden=64 64",
    "--override", "dataset.n_train=100000",
    "--override", "dataset.n_test=100000",
    "--override", "train.learning_rate=1e-3",
    "--override", "train.schedule_total=20000",
]


def run(out_root: Path, seeds, paper: bool) -> int:
    out_root.mkdir(parents=True, exist_ok=True)
    runs = {}
    for ds in DATASETS:
        for arch in ARCHS:
            preset = f"table1-{ds}-{arch}"
            out = out_root / preset
            args = ["train", "--preset", preset, "--out", str(out)]
            for seed in seeds:
                args += ["--seed", str(seed)]
            if not paper:
                args += DESK_OVERRIDES
            print(f"== {preset}")
            code = emflow_main(args)
            if code != 0:
                return code
            runs[f"{ds.upper()}/{arch.upper()}"] = out
    cmp_cfg = out_root / "compare.cfg"
    lines = ["[compare]", f"rows = {' '.join(d.upper() for d in DATASETS)}",
             f"columns = {' '.join(a.upper() for a in ARCHS)}", "", "[runs]"]
    lines += [f"{key} = {path}" for key, path in runs.items()]
    cmp_cfg.write_text("\n".join(lines) + "\n")
    return emflow_main(["compare", "--config", str(cmp_cfg),
                        "--out", str(out_root / "table.csv")])


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/2d-toys")
    parser.add_argument("--seed", type=int, action="append")
    parser.add_argument("--paper", action="store_true",
                        help="full published-scale schedules")
    args = parser.parse_args()
    sys.exit(run(Path(args.out), args.seed or [0], args.paper))
