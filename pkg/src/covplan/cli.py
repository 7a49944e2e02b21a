"""``covplan`` command line: precompute | plan | baseline | ablate | sweep | compare."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from covplan import experiments
from covplan.baseline import BaselineError, run_baseline
from covplan.planner import PlannerConfig, PlanningError, run_mission
from covplan.raytrace import TableError, learn_table, load_table, save_table
from covplan.world import ScenarioError, load_scenario

log = logging.getLogger("covplan")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covplan", description="3D coverage planning experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("precompute", "plan", "baseline", "ablate", "sweep", "compare"):
        s = sub.add_parser(name)
        s.add_argument("--scenario", required=True, type=Path)
        s.add_argument("--table", type=Path, help="visibility table file")
        s.add_argument("--out", type=Path, default=Path("out"))
        s.add_argument("--seed", type=int, help="overrides the scenario seed")
        s.add_argument("--trials", type=int, default=1)
        s.add_argument("--horizons", default="1,2,3,4", help="comma-separated horizons for sweep")
        s.add_argument("--timing", action="store_true", help="include wall-clock timings in outputs")
    return p


def _table(args, scenario):
    if args.table is not None and args.table.exists():
        return load_table(args.table, scenario)
    log.info("learning visibility table")
    return learn_table(scenario, workers=experiments.worker_count())


def cmd_precompute(args, scenario) -> int:
    table = learn_table(scenario, workers=experiments.worker_count())
    path = args.table if args.table is not None else args.out / "table.vistab"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_table(table, path)
    fill = table.bits.sum(axis=1)
    print(f"wrote {path}: {table.n_cells} cells x {table.facet_count} facets")
    print(f"cells with visible facets: {int((fill > 0).sum())}/{table.n_cells}")
    if table.n_cells:
        print(f"facets per cell: min {int(fill.min())} mean {fill.mean():.2f} max {int(fill.max())}")
    return EXIT_OK


def cmd_plan(args, scenario) -> int:
    table = _table(args, scenario)
    try:
        mission = run_mission(scenario, table, PlannerConfig())
    except PlanningError as exc:
        partial = getattr(exc, "log", None)
        if partial is not None:
            partial.write(args.out, timing=args.timing)
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    mission.write(args.out, timing=args.timing)
    s = mission.summary()
    print(f"coverage {s['coverage_fraction']:.3f} in {s['steps']} steps, "
          f"{s['trajectory_length_m']:.1f} m, duplication {s['duplication_count']}")
    return EXIT_OK


def cmd_baseline(args, scenario) -> int:
    table = _table(args, scenario)
    mission, path = run_baseline(scenario, table, seed=scenario.seed)
    mission.write(args.out, timing=args.timing, prefix="baseline")
    np.savetxt(args.out / "baseline_path.xyz", path.at(np.linspace(0, path.length, 200)))
    s = mission.summary()
    print(f"coverage {s['coverage_fraction']:.3f} in {s['steps']} steps, "
          f"{s['trajectory_length_m']:.1f} m over {len(path.order)} viewpoints")
    return EXIT_OK


def cmd_ablate(args, scenario) -> int:
    rep = experiments.ablate_visibility(scenario, args.trials, scenario.seed)
    rep.write(args.out)
    for a in rep.aggregates:
        print(f"scale {a['fov_scale']} {a['arm']}: true coverage {a['true_coverage_mean']:.3f}")
    return EXIT_OK


def cmd_sweep(args, scenario) -> int:
    horizons = [int(h) for h in args.horizons.split(",") if h.strip()]
    rep = experiments.sweep_horizon(scenario, _table(args, scenario), horizons, args.trials,
                                    scenario.seed, timing=args.timing)
    rep.write(args.out)
    for a in rep.aggregates:
        print(f"T={a['horizon']}: mean steps {a['steps_mean']:.2f} (n={a['n']})")
    return EXIT_OK


def cmd_compare(args, scenario) -> int:
    rep = experiments.compare(scenario, _table(args, scenario), args.trials, scenario.seed)
    rep.write(args.out)
    for a in rep.aggregates:
        print(f"length ratio planner/baseline {a['ratio_mean']:.3f} "
              f"(95% CI {a['ratio_ci_low']:.3f}..{a['ratio_ci_high']:.3f}, n={a['n']}); "
              f"both complete {a['ratio_both_complete_mean']:.3f} (n={a['n_both_complete']})")
    return EXIT_OK


COMMANDS = {"precompute": cmd_precompute, "plan": cmd_plan, "baseline": cmd_baseline,
            "ablate": cmd_ablate, "sweep": cmd_sweep, "compare": cmd_compare}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.trials < 1:
            raise ValueError("trials must be >= 1")
        scenario = load_scenario(args.scenario)
        if args.seed is not None:
            scenario = scenario.with_(seed=int(args.seed))
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, scenario)
    except (ScenarioError, TableError, BaselineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
