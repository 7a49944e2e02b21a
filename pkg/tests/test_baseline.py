import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covplan.agent import AgentState, CameraParams, KinematicParams, enumerate_configs, fov_pose
from covplan.baseline import (BaselineError, greedy_set_cover, order_and_spline, prediction_matrices,
                              run_baseline, sample_viewpoints, segment_clear, track, tracking_qp)
from covplan.geometry import hull_from_points
from covplan.raytrace import learn_table, visible_facets
from covplan.world import Environment, Mesh, ObjectiveWeights, ObstacleSet, Scenario
from oracles import exact_set_cover, rollout_closed_form


def open_scenario(mesh=None, obstacles=(), start=(0, 0, 10)):
    mesh = mesh if mesh is not None else Mesh(np.array([[-2.0, -2, 0], [2, -2, 0], [0, 2, 0]]),
                                              np.array([[0, 1, 2]]))
    env = Environment(np.array([-50.0, -50, 0]), np.array([50.0, 50, 40]), (4, 4, 2))
    cam = CameraParams(thetas=(0.0,), phis=(0.0,), zoom_levels=(1.0, 2.0))
    return Scenario(env, mesh, ObstacleSet(tuple(obstacles)), KinematicParams(), cam, ObjectiveWeights(),
                    horizon=2, mission_limit=100, seed=2, samples_per_cell=20,
                    start=AgentState(np.array(start, float)))


def test_disjoint_sets_both_chosen():
    assert sorted(greedy_set_cover([{1, 2}, {3}], [1, 2, 3])) == [0, 1]


def test_nested_sets_pick_superset():
    assert greedy_set_cover([{1}, {1, 2, 3}], [1, 2, 3]) == [1]


def test_uncoverable_residue_listed():
    with pytest.raises(BaselineError, match=r"uncoverable targets: \[4\]"):
        greedy_set_cover([{1}, {2}], [1, 2, 4])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_greedy_within_log_bound(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 10))
    n = int(rng.integers(2, 13))
    sets = [set(np.flatnonzero(rng.random(k) < 0.35).tolist()) for _ in range(n)]
    targets = set().union(*sets)
    if not targets:
        return
    chosen = greedy_set_cover(sets, targets)
    assert targets <= set().union(*(sets[i] for i in chosen))
    assert len(chosen) <= (1 + np.log(len(targets))) * exact_set_cover(sets, targets)


def test_single_viewpoint_near_facet_sees_it():
    sc = open_scenario()
    (vp,) = sample_viewpoints(sc, 1, seed=0)
    pose = fov_pose(enumerate_configs(sc.camera)[vp.config], vp.position, sc.camera)
    assert 0 in visible_facets(pose, sc.mesh, sc.camera.n_rays)
    assert 0 in vp.visible


def test_sampled_positions_are_valid():
    obs = hull_from_points([[x, y, z] for x in (-3, 3) for y in (-3, 3) for z in (5, 8)])
    sc = open_scenario(obstacles=[obs])
    vps = sample_viewpoints(sc, 30, seed=4)
    assert len(vps) == 30
    for v in vps:
        assert sc.env.contains(v.position) and sc.obstacles.clearance(v.position) > 0
    again = sample_viewpoints(sc, 30, seed=4)
    assert all(np.array_equal(a.position, b.position) for a, b in zip(vps, again))


def test_segment_clear():
    obs = hull_from_points([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)])
    assert not segment_clear([-5, 0, 0], [5, 0, 0], [obs])
    assert segment_clear([-5, 3, 0], [5, 3, 0], [obs])
    assert not segment_clear([-5, 1.5, 0], [5, 1.5, 0], [obs], margin=1.0)


def test_single_viewpoint_path_is_straight():
    sc = open_scenario()
    path = order_and_spline([np.array([20.0, 0, 10])], [0, 0, 10], sc)
    s = np.linspace(0, path.length, 50)
    pts = path.at(s)
    assert path.length == pytest.approx(20.0, rel=1e-6)
    assert np.allclose(pts[:, 1:], [0, 10], atol=1e-6)


def test_collinear_spline_stays_on_line():
    sc = open_scenario()
    vps = [np.array([x, 2 * x, 10 + x]) for x in (3.0, 11.0, 17.0, 30.0)]
    path = order_and_spline(vps, [0, 0, 10], sc)
    p = path.at(np.linspace(0, path.length, 400))
    d = np.array([1.0, 2.0, 1.0]) / np.sqrt(6)
    off = (p - [0, 0, 10]) - np.outer((p - [0, 0, 10]) @ d, d)
    assert np.abs(off).max() <= 1e-6


def test_densified_gaps_within_speed_bound():
    sc = open_scenario()
    path = order_and_spline([np.array([45.0, 40, 30]), np.array([-40.0, 0, 5])], [0, 0, 10], sc)
    gaps = np.linalg.norm(np.diff(path.waypoints, axis=0), axis=1)
    kin = sc.kin
    assert gaps.max() <= kin.dt * np.linalg.norm([kin.vel_bound] * 3) + 1e-9


def test_path_detours_around_obstacle():
    obs = hull_from_points([[x, y, z] for x in (8, 12) for y in (-4, 4) for z in (0, 20)])
    sc = open_scenario(obstacles=[obs])
    path = order_and_spline([np.array([20.0, 0, 10])], [0, 0, 10], sc)
    p = path.at(np.linspace(0, path.length, 2000))
    assert min(sc.obstacles.clearance(q) for q in p) > 0


def test_prediction_matrices_match_closed_form():
    sc = open_scenario()
    a, b = sc.kin.matrices()
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=6)
    u = rng.uniform(-10, 10, size=(5, 3))
    phi, gam = prediction_matrices(sc, 5)
    got = (phi @ x0 + gam @ u.ravel()).reshape(5, 6)
    want = rollout_closed_form(x0, list(u), a, b)[1:]
    assert np.allclose(got, want, atol=1e-9)


def test_stationary_reference_gives_zero_force():
    sc = open_scenario()
    x0 = AgentState(np.array([1.0, 2, 10]))
    u, cost, _ = tracking_qp(x0, np.tile(x0.pos, (5, 1)), sc)
    assert np.abs(u).max() <= 1e-6 and cost <= 1e-10


def test_straight_path_terminal_error():
    # a path along x only: the closed-loop run ends within 0.1 m of the end point
    sc = open_scenario(start=(-30, 0, 10))
    path = order_and_spline([np.array([30.0, 0, 10])], [-30, 0, 10], sc)
    log = track(path, sc.start, sc, learn_table(sc), limit=100, end_tol=0.1)
    assert len(log.steps) < 100
    assert np.linalg.norm(log.steps[-1].state.pos - [30, 0, 10]) <= 0.1
    assert np.abs(log.positions[:, 1:] - [0, 10]).max() <= 1e-6
    for s in log.steps:
        assert np.abs(s.force).max() <= sc.kin.force_bound + 1e-9
        assert np.abs(s.state.vel).max() <= sc.kin.vel_bound + 1e-6


def test_run_baseline_covers_single_facet():
    sc = open_scenario()
    table = learn_table(sc, samples=300)
    log, path = run_baseline(sc, table, count=20, seed=1)
    assert log.coverage_fraction == 1.0 and log.collisions == 0
    assert set(log.summary()) >= {"coverage_fraction", "steps", "trajectory_length_m", "duplication_count"}
    assert log.to_csv(timing=False).splitlines()[0].startswith("t,px,py,pz")
