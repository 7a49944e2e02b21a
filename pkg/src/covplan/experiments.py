"""Monte-Carlo studies: visibility ablation, horizon sweep and the
planner/baseline comparison.  Every trial draws its targets and start state
from ``(seed, trial)`` so paired arms see identical inputs."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from covplan.agent import AgentState, enumerate_configs, fov_pose
from covplan.baseline import BaselineError, run_baseline
from covplan.planner import MissionLog, PlannerConfig, PlanningError, run_mission
from covplan.raytrace import VisibilityTable, learn_table, visible_facets
from covplan.world import Scenario


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("COVPLAN_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, jobs, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))  # results come back in job order


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(trial)])


def sample_start(scenario: Scenario, rng: np.random.Generator, margin: float = 1.0) -> AgentState:
    env = scenario.env
    for _ in range(10000):
        p = env.min_corner + rng.random(3) * (env.max_corner - env.min_corner)
        if scenario.obstacles.clearance(p) >= margin:
            return AgentState(p)
    raise RuntimeError("no free start position found")


def trial_scenario(scenario: Scenario, seed: int, trial: int, n_targets=None) -> Scenario:
    """Scenario with a random start and, if ``n_targets`` is an int or an
    inclusive ``(lo, hi)`` range, a random target subset."""
    rng = trial_rng(seed, trial)
    targets = scenario.targets
    if n_targets is not None:
        lo, hi = (n_targets, n_targets) if isinstance(n_targets, int) else n_targets
        n = min(int(rng.integers(lo, hi + 1)), scenario.mesh.n_facets)
        targets = tuple(sorted(int(k) for k in rng.choice(scenario.mesh.n_facets, n, replace=False)))
    return scenario.with_(targets=targets, start=sample_start(scenario, rng))


TRUTH_RAYS = 1024  # 32 x 32 grid: dense enough that a facet inside the FOV is not missed between rays


def true_coverage(log: MissionLog, scenario: Scenario, rays: int = TRUTH_RAYS) -> list[int]:
    """Targets hit by a freshly traced ray at some realized pose under the
    camera configuration applied there."""
    configs = enumerate_configs(scenario.camera)
    seen: set[int] = set()
    for s in log.steps:
        pose = fov_pose(configs[s.config], s.state.pos, scenario.camera)
        seen |= visible_facets(pose, scenario.mesh, rays)
    return sorted(seen & set(log.targets))


def bootstrap_ci(values, seed: int, n: int = 2000, level: float = 0.95) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return math.nan, math.nan
    rng = np.random.default_rng([int(seed), 1009])
    means = v[rng.integers(len(v), size=(n, len(v)))].mean(axis=1)
    a = (1 - level) / 2
    return float(np.quantile(means, a)), float(np.quantile(means, 1 - a))


def aggregate(rows: list[dict], by: list[str], values: list[str]) -> list[dict]:
    """Mean and population std of ``values`` per group of ``by`` (rows with
    ``status != 'ok'`` are skipped)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r.get("status", "ok") == "ok":
            groups.setdefault(tuple(r[k] for k in by), []).append(r)
    out = []
    for key in sorted(groups):
        g = groups[key]
        agg = dict(zip(by, key))
        agg["n"] = len(g)
        for v in values:
            x = np.array([r[v] for r in g], dtype=float)
            agg[f"{v}_mean"] = float(x.mean())
            agg[f"{v}_std"] = float(x.std())
        out.append(agg)
    return out


@dataclass
class Report:
    name: str
    rows: list[dict]
    aggregates: list[dict]
    extra: dict = field(default_factory=dict)
    logs: dict[str, str] = field(default_factory=dict, repr=False)  # mission log CSV by run key

    def rows_csv(self) -> str:
        if not self.rows:
            return ""
        cols = list(self.rows[0])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"name": self.name, "aggregates": self.aggregates, "rows": self.rows, **self.extra}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{self.name}_rows.csv").write_text(self.rows_csv())
        (out / f"{self.name}_report.json").write_text(self.to_json())
        if self.aggregates:
            cols = list(self.aggregates[0])
            lines = ["# " + " ".join(cols)]
            lines += [" ".join(repr(a[c]) if isinstance(a[c], float) else str(a[c]) for c in cols)
                      for a in self.aggregates]
            (out / f"{self.name}_plot.dat").write_text("\n".join(lines) + "\n")
        if self.logs:
            (out / "logs").mkdir(exist_ok=True)
            for key, text in self.logs.items():
                (out / "logs" / f"{key}.csv").write_text(text)


def _mission(scenario, table, config) -> tuple[MissionLog | None, str]:
    try:
        return run_mission(scenario, table, config), "ok"
    except PlanningError as exc:
        return getattr(exc, "log", None), f"infeasible:{exc.cause}"


def _mission_row(log: MissionLog | None, status: str, timing: bool) -> dict:
    if log is None:
        row = {"coverage": math.nan, "steps": math.nan, "length_m": math.nan,
               "duplication": math.nan, "collisions": math.nan, "audit_violations": math.nan}
    else:
        s = log.summary()
        row = {"coverage": s["coverage_fraction"], "steps": s["steps"],
               "length_m": s["trajectory_length_m"], "duplication": s["duplication_count"],
               "collisions": s["collisions"], "audit_violations": s["audit_violations"]}
    if timing:
        ms = [st.solve_ms for st in log.steps] if log is not None and log.steps else [math.nan]
        row["solve_ms_mean"] = float(np.mean(ms))
    row["status"] = status
    return row


# visibility ablation -------------------------------------------------------

def scaled_camera(camera, scale: float):
    return replace(camera, base_len=camera.base_len * scale, base_wid=camera.base_wid * scale,
                   range=camera.range * scale)


def fov_volume(camera) -> float:
    return camera.base_len * camera.base_wid * camera.range / 3.0


def _ablation_job(args):
    scen, table, arm, scale, trial, config = args
    log, status = _mission(scen, table, config)
    row = {"fov_scale": scale, "fov_volume": fov_volume(scen.camera), "trial": trial, "arm": arm}
    row.update(_mission_row(log, status, False))
    row["true_coverage"] = (len(true_coverage(log, scen)) / len(scen.target_facets)
                            if log is not None and scen.target_facets else math.nan)
    return row, (log.to_csv(timing=False) if log is not None else "")


def ablate_visibility(scenario: Scenario, trials: int, seed: int, scales=(1.0, 1.5, 2.5),
                      n_targets=(5, 10), config: PlannerConfig = PlannerConfig(),
                      tables: dict | None = None, workers: int | None = None) -> Report:
    """Paired missions with the learned table ("on") and with every bit set
    ("off") at several FOV sizes; truth is re-traced at the realized poses."""
    jobs = []
    for scale in scales:
        cam = scaled_camera(scenario.camera, scale)
        base = scenario.with_(camera=cam)
        on = (tables or {}).get(scale) or learn_table(base)
        off = VisibilityTable.all_visible(base)
        for trial in range(trials):
            scen = trial_scenario(base, seed, trial, n_targets)
            for arm, table in (("on", on), ("off", off)):
                jobs.append((scen, table, arm, float(scale), trial, config))
    out = _map(_ablation_job, jobs, workers)
    rows = [r for r, _ in out]
    logs = {f"scale{r['fov_scale']:g}_{r['arm']}_trial{r['trial']}": text for r, text in out}
    return Report("ablate", rows, aggregate(rows, ["fov_scale", "arm"], ["true_coverage", "coverage", "steps"]),
                  logs=logs)


# horizon sweep -------------------------------------------------------------

def _sweep_job(args):
    scen, table, T, trial, config, timing = args
    log, status = _mission(scen, table, replace(config, horizon=T))
    row = {"horizon": T, "trial": trial}
    row.update(_mission_row(log, status, timing))
    row["completed"] = int(log is not None and log.coverage_fraction == 1.0)
    return row


def sweep_horizon(scenario: Scenario, table: VisibilityTable, horizons, trials: int, seed: int,
                  n_targets=15, config: PlannerConfig = PlannerConfig(), timing: bool = False,
                  workers: int | None = None) -> Report:
    if not horizons:
        raise ValueError("horizon list is empty")
    jobs = [(trial_scenario(scenario, seed, trial, n_targets), table, int(T), trial, config, timing)
            for T in horizons for trial in range(trials)]
    rows = _map(_sweep_job, jobs, workers)
    vals = ["steps", "coverage"] + (["solve_ms_mean"] if timing else [])
    return Report("sweep", rows, aggregate(rows, ["horizon"], vals))


# planner vs baseline -------------------------------------------------------

def _compare_job(args):
    scen, table, trial, seed, config = args
    plog, pstatus = _mission(scen, table, config)
    try:
        blog, path = run_baseline(scen, table, seed=seed + trial)
        bstatus = "ok"
    except BaselineError as exc:
        blog, path, bstatus = None, None, f"error:{exc}"
    row = {"trial": trial, "n_targets": len(scen.target_facets)}
    for tag, log in (("planner", plog), ("baseline", blog)):
        row[f"{tag}_length_m"] = log.trajectory_length if log is not None else math.nan
        row[f"{tag}_coverage"] = log.coverage_fraction if log is not None else math.nan
        row[f"{tag}_steps"] = len(log.steps) if log is not None else math.nan
        row[f"{tag}_collisions"] = log.collisions if log is not None else math.nan
    row["planner_audit_violations"] = plog.audit_violations if plog is not None else math.nan
    row["baseline_viewpoints"] = len(path.order) if path is not None else 0
    ok = pstatus == "ok" and bstatus == "ok" and row["baseline_length_m"] > 0
    row["ratio"] = row["planner_length_m"] / row["baseline_length_m"] if ok else math.nan
    row["status"] = "ok" if ok else (pstatus if pstatus != "ok" else bstatus)
    return row


def compare(scenario: Scenario, table: VisibilityTable, trials: int, seed: int, n_targets=5,
            config: PlannerConfig = PlannerConfig(), workers: int | None = None) -> Report:
    jobs = [(trial_scenario(scenario, seed, t, n_targets), table, t, int(seed), config)
            for t in range(trials)]
    rows = _map(_compare_job, jobs, workers)
    ok_rows = [r for r in rows if r["status"] == "ok"]
    lo, hi = bootstrap_ci([r["ratio"] for r in ok_rows], seed)
    aggs = aggregate([dict(r, group="all") for r in rows], ["group"],
                     ["ratio", "planner_length_m", "baseline_length_m", "planner_coverage",
                      "baseline_coverage"])
    full = [r["ratio"] for r in ok_rows if r["planner_coverage"] == 1.0 and r["baseline_coverage"] == 1.0]
    for a in aggs:
        a["ratio_ci_low"], a["ratio_ci_high"] = lo, hi
        a["ratio_both_complete_mean"] = float(np.mean(full)) if full else math.nan
        a["n_both_complete"] = len(full)
    return Report("compare", rows, aggs)
