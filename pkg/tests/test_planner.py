import math

import numpy as np
import pytest

from covplan.agent import AgentState, CameraParams, KinematicParams, enumerate_configs, fov_pose
from covplan.geometry import hull_from_points
from covplan.mip import OPTIMAL, solve
from covplan.planner import (CoverageMemory, ObjectiveConfig, PlannerConfig, PlanningError, audit_solution,
                             build_p2, nearest_uncovered, plan_step, realized_coverage, run_mission,
                             seed_plan)
from covplan.raytrace import VisibilityTable, learn_table, visible_facets
from covplan.world import Environment, Mesh, ObjectiveWeights, ObstacleSet, Scenario
from oracles import enumerate_miqp

DOWN = CameraParams(thetas=(0.0,), phis=(0.0,), zoom_levels=(1.0,))


def floor(centers, half=1.5, z=0.0) -> Mesh:
    tris = [[[x - half, y - half, z], [x + half, y - half, z], [x, y + half, z]] for x, y in centers]
    return Mesh(np.array(tris, float).reshape(-1, 3), np.arange(3 * len(tris)).reshape(-1, 3))


def scenario(mesh, start=(0, 0, 6), camera=DOWN, obstacles=(), horizon=2, limit=20, **kw):
    env = Environment(np.array([-10.0, -10, 0]), np.array([10.0, 10, 20]), (2, 2, 2))
    return Scenario(env, mesh, ObstacleSet(tuple(obstacles)), KinematicParams(), camera,
                    ObjectiveWeights(**kw), horizon=horizon, mission_limit=limit, seed=1,
                    samples_per_cell=40, start=AgentState(np.array(start, float)))


def box(lo, hi):
    return hull_from_points([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def test_gamma_values():
    g = ObjectiveConfig(horizon=5).gammas()
    assert g[0] == pytest.approx(148.413159, rel=1e-6)
    assert g[4] == pytest.approx(math.e)
    assert ObjectiveConfig(horizon=5).gamma(4) == pytest.approx(math.e)
    with pytest.raises(ValueError):
        ObjectiveConfig(horizon=0)


def test_nearest_uncovered():
    m = floor([(5, 0), (3, 0)])
    pos = m.centroids[1] - [3, 0, 0]
    assert nearest_uncovered(pos, m, CoverageMemory.empty(2)) == 1
    tie = floor([(3, 0), (0, 3)])
    mid = tie.centroids.mean(axis=0)
    assert nearest_uncovered(mid, tie, CoverageMemory.empty(2)) == 0
    mem = CoverageMemory.empty(2)
    mem.mark([1], 1)
    assert nearest_uncovered(pos, m, mem) == 0
    assert nearest_uncovered(pos, m, CoverageMemory.empty(2), targets=[0]) == 0
    mem.mark([0], 2)
    with pytest.raises(PlanningError, match="mission complete"):
        nearest_uncovered(pos, m, mem)


def test_target_point_is_offset_along_normal():
    sc = scenario(floor([(0, 0)]))
    _, pmap = build_p2(sc.start, CoverageMemory.empty(1), sc, VisibilityTable.all_visible(sc))
    assert pmap.kappa_star == 0
    assert np.allclose(pmap.target_point, sc.mesh.centroids[0] + 10.0 * sc.mesh.normals[0])


def test_memory_mark_is_monotone():
    mem = CoverageMemory.empty(4)
    assert mem.mark([2, 1], 3) == [1, 2]
    assert mem.mark([2, 3], 5) == [3]
    assert mem.cover_time.tolist() == [-1, 3, 3, 5]


def test_facet_below_is_covered_in_one_step():
    sc = scenario(floor([(0, 0)]), start=(0, 0, 5))
    table = learn_table(sc)
    mem = CoverageMemory.empty(1)
    ps = plan_step(sc.start, mem, sc, table)
    assert ps.covered == [0] and mem.covered[0]
    pose = fov_pose(enumerate_configs(DOWN)[ps.config], ps.state.pos, DOWN)
    assert 0 in visible_facets(pose, sc.mesh, DOWN.n_rays)
    assert ps.audit == []


def test_single_facet_model_matches_enumeration():
    sc = scenario(floor([(0, 0)]), start=(0, 0, 5), horizon=1)
    model, pmap = build_p2(sc.start, CoverageMemory.empty(1), sc, VisibilityTable.all_visible(sc))
    assert model.n_binaries <= 14
    want, _ = enumerate_miqp(model)
    sol = solve(model)
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(want, abs=1e-6)
    (_, _, _, _, _, bhat), = pmap.triples
    assert sol.x[bhat] == pytest.approx(1.0)


def test_all_covered_leaves_only_distance_term():
    sc = scenario(floor([(0, 0), (4, 4)]), start=(0, 0, 5), horizon=1)
    mem = CoverageMemory.empty(2)
    mem.mark([0, 1], 0)
    model, pmap = build_p2(sc.start, mem, sc, VisibilityTable.all_visible(sc))
    assert pmap.triples == []
    sol = solve(model)
    d = solve(model).x[pmap.dpos]
    assert sol.objective == pytest.approx(0.1 * np.sum((d - pmap.target_point) ** 2), abs=1e-6)


def test_seed_plan_is_feasible():
    sc = scenario(floor([(0, 0), (6, 6), (-6, 4)]), start=(0, 0, 6), horizon=3)
    table = VisibilityTable.all_visible(sc)
    mem = CoverageMemory.empty(3)
    model, pmap = build_p2(sc.start, mem, sc, table)
    x = seed_plan(sc.start, mem, sc, table, model, pmap)
    assert x is not None
    assert max(model.violations(x).values()) <= 1e-6
    assert audit_solution(solve(model, incumbent=x).x, pmap, sc) == []


def test_start_inside_obstacle_is_infeasible():
    obs = box((-3, -3, 3), (3, 3, 9))
    sc = scenario(floor([(0, 0)]), start=(0, 0, 6), obstacles=[obs])
    with pytest.raises(PlanningError) as err:
        plan_step(sc.start, CoverageMemory.empty(1), sc, VisibilityTable.all_visible(sc))
    assert err.value.cause == "obstacle"


def test_mission_avoids_obstacle_and_covers():
    obs = box((-2, -2, 0), (2, 2, 3))
    sc = scenario(floor([(6, 6), (-6, -6)]), start=(0, 0, 8), obstacles=[obs], horizon=3, limit=40)
    log = run_mission(sc, learn_table(sc))
    assert log.coverage_fraction == 1.0
    assert log.collisions == 0
    for p in log.positions[1:]:
        assert sc.obstacles.clearance(p) >= 1e-3 / 2
    assert sum(len(s.audit) for s in log.steps) == 0
    seen = np.zeros(2, bool)
    for s in log.steps:
        assert not seen[s.covered].any()  # each facet credited once
        seen[s.covered] = True


def test_zero_facets_complete_immediately():
    empty = Mesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    sc = scenario(empty)
    log = run_mission(sc, VisibilityTable.all_visible(sc))
    assert log.steps == [] and log.coverage_fraction == 1.0


def test_unreachable_facet_reports_uncoverable():
    # 12 m below the lowest cell, beyond the 8 m range
    sc = scenario(floor([(0, 0)], z=-12.0), start=(0, 0, 2), limit=4)
    table = learn_table(sc)
    assert not table.bits[:, 0].any()
    log = run_mission(sc, table)
    assert len(log.steps) == 4 and log.coverage_fraction == 0.0
    assert log.uncoverable == [0]


def test_realized_coverage_needs_table_bit():
    sc = scenario(floor([(0, 0)]), start=(0, 0, 5))
    table = VisibilityTable.all_visible(sc)
    pos = np.array([0.0, 0, 5])
    assert realized_coverage(pos, 0, sc, table, [0]) == [0]
    table.bits[:] = False
    assert realized_coverage(pos, 0, sc, table, [0]) == []


def test_skip_goal_changes_distance_target():
    sc = scenario(floor([(2, 0), (-6, 0)]), start=(0, 0, 6))
    table = VisibilityTable.all_visible(sc)
    _, a = build_p2(sc.start, CoverageMemory.empty(2), sc, table)
    _, b = build_p2(sc.start, CoverageMemory.empty(2), sc, table, skip_goal=frozenset({0}))
    _, c = build_p2(sc.start, CoverageMemory.empty(2), sc, table, skip_goal=frozenset({0, 1}))
    assert (a.kappa_star, b.kappa_star, c.kappa_star) == (0, 1, 0)


def test_mission_is_deterministic():
    sc = scenario(floor([(6, 6), (-6, 4), (2, -7)]), start=(0, 0, 8), horizon=2, limit=30)
    table = learn_table(sc)
    a, b = run_mission(sc, table), run_mission(sc, table)
    assert a.to_csv(timing=False) == b.to_csv(timing=False)


def test_mission_log_files(tmp_path):
    sc = scenario(floor([(0, 0)]), start=(0, 0, 5))
    log = run_mission(sc, learn_table(sc))
    log.write(tmp_path, timing=False)
    head = (tmp_path / "mission.csv").read_text().splitlines()[0]
    assert head == "t,px,py,pz,vx,vy,vz,fx,fy,fz,config_index,covered_facets,objective,solve_ms"
    import json
    s = json.loads((tmp_path / "mission_summary.json").read_text())
    assert s["coverage_fraction"] == 1.0 and s["duplication_count"] == 0
