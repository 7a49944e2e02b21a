#!/usr/bin/env python3
"""Learn the desk table, fly the planner and the baseline, write logs to out/desk."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from covplan.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scenario", type=Path, default=ROOT / "scenarios" / "desk.json")
    p.add_argument("--out", type=Path, default=ROOT / "out" / "desk")
    p.add_argument("--timing", action="store_true")
    args = p.parse_args(argv)
    common = ["--scenario", str(args.scenario), "--out", str(args.out),
              "--table", str(args.out / "table.vistab")] + (["--timing"] if args.timing else [])
    for cmd in ("precompute", "plan", "baseline"):
        code = main([cmd, *common])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
