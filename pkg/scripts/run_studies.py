#!/usr/bin/env python3
"""Run the ablation, horizon sweep and baseline comparison at the sizes used
by the acceptance checks; each study writes rows, a JSON report and plot data."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from covplan.cli import main

ROOT = Path(__file__).resolve().parents[1]

STUDIES = {
    "ablate": ("desk_fine.json", ["--trials", "5"]),
    "sweep": ("desk.json", ["--trials", "10", "--horizons", "1,2,3,4"]),
    "compare": ("desk.json", ["--trials", "20"]),
}


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("studies", nargs="*", default=list(STUDIES), choices=list(STUDIES))
    p.add_argument("--out", type=Path, default=ROOT / "out" / "studies")
    p.add_argument("--timing", action="store_true", help="add solve times to the sweep")
    args = p.parse_args(argv)
    for name in args.studies:
        scen, extra = STUDIES[name]
        argv = [name, "--scenario", str(ROOT / "scenarios" / scen), "--out", str(args.out / name), *extra]
        if args.timing:
            argv.append("--timing")
        code = main(argv)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
