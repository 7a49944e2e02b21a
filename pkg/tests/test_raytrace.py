import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covplan.agent import CameraParams, LightRay, enumerate_configs, fov_pose
from covplan.raytrace import (TableError, VisibilityTable, learn_table, load_table, save_table, trace,
                              trace_many, visible_facets)
from covplan.world import Environment, Mesh, ObstacleSet, Scenario, gaussian_mesh
from covplan.agent import KinematicParams
from covplan.world import ObjectiveWeights
from oracles import naive_trace


def tri_mesh(tris) -> Mesh:
    tris = np.asarray(tris, dtype=float)
    return Mesh(tris.reshape(-1, 3), np.arange(len(tris) * 3).reshape(-1, 3))


def flat_scenario(mesh, lo=(-5, -5, 0), hi=(5, 5, 20), dims=(1, 1, 2), samples=30, **cam):
    camera = CameraParams(**{"thetas": (0.0,), "phis": (0.0,), "zoom_levels": (1.0,), **cam})
    return Scenario(Environment(np.array(lo, float), np.array(hi, float), dims), mesh, ObstacleSet(),
                    KinematicParams(), camera, ObjectiveWeights(), samples_per_cell=samples, seed=3)


def test_single_triangle_hit_and_miss():
    m = tri_mesh([[[-1, -1, 0], [1, -1, 0], [0, 1, 0]]])
    assert trace(LightRay(np.array([0, 0, -1.0]), np.array([0, 0, 1.0])), m) == 0
    assert trace(LightRay(np.array([5, 5, -1.0]), np.array([5, 5, 1.0])), m) is None


def test_stacked_triangles_nearest_to_apex_wins():
    t = [[-1, -1, 0], [1, -1, 0], [0, 1, 0]]
    m = tri_mesh([t, [[x, y, 0.5] for x, y, _ in t]])
    ray = LightRay(np.array([0, 0, -1.0]), np.array([0, 0, 1.0]))
    assert naive_trace(ray.origin, ray.endpoint, m) == 1
    assert trace(ray, m) == 1


def random_mesh(rng, k):
    c = rng.uniform(-5, 5, size=(k, 1, 3))
    return tri_mesh(c + rng.normal(scale=2.0, size=(k, 3, 3)))


@settings(max_examples=60)
@given(st.integers(0, 2 ** 32 - 1))
def test_trace_matches_naive(seed):
    rng = np.random.default_rng(seed)
    m = random_mesh(rng, int(rng.integers(1, 12)))
    o = rng.uniform(-8, 8, size=(20, 3))
    e = rng.uniform(-8, 8, size=3)
    got = trace_many(o, e, m)
    want = [naive_trace(oi, e, m) for oi in o]
    assert [None if g < 0 else int(g) for g in got] == want


@settings(max_examples=40)
@given(st.integers(0, 2 ** 32 - 1))
def test_winning_depth_never_decreases_when_facets_added(seed):
    rng = np.random.default_rng(seed)
    m = random_mesh(rng, 8)
    o, e = rng.uniform(-8, 8, size=3), rng.uniform(-8, 8, size=3)
    best = -1.0
    for k in range(1, 9):
        sub = Mesh(m.vertices, m.faces[:k])
        hit = trace(LightRay(o, e), sub)
        if hit is not None:
            n, b = sub.normals[hit], sub.offsets[hit]
            d = (b - n @ o) / (n @ (e - o))
            assert d >= best - 1e-12
            best = d


def test_visible_from_above():
    floor = tri_mesh([[[-20, -20, 0], [20, -20, 0], [0, 20, 0]]])
    cam = CameraParams(thetas=(0.0,), phis=(0.0,), zoom_levels=(1.0,))
    pose = fov_pose(enumerate_configs(cam)[0], np.array([0, 0, 5.0]), cam)
    assert visible_facets(pose, floor, 50) == {0}
    high = fov_pose(enumerate_configs(cam)[0], np.array([0, 0, 50.0]), cam)
    assert visible_facets(high, floor, 50) == set()


def test_occluded_far_side_not_visible():
    near = [[-3, -3, 0], [3, -3, 0], [0, 3, 0]]
    far = [[x, y, -2] for x, y, _ in near]
    m = tri_mesh([far, near])
    cam = CameraParams(thetas=(0.0,), phis=(0.0,), zoom_levels=(1.0,))
    pose = fov_pose(enumerate_configs(cam)[0], np.array([0, 0, 4.0]), cam)
    rays = 50
    assert visible_facets(pose, m, rays) == {1}
    from covplan.agent import light_rays
    lr = light_rays(pose, rays)
    assert {naive_trace(o, lr.endpoint, m) for o in lr.origins} - {None} == {1}


def test_learned_bits_cover_a_direct_view():
    floor = tri_mesh([[[-5, -5, 0], [5, -5, 0], [5, 5, 0]], [[-5, -5, 0], [5, 5, 0], [-5, 5, 0]]])
    sc = flat_scenario(floor)
    table = learn_table(sc)
    cam = sc.camera
    seen = visible_facets(fov_pose(enumerate_configs(cam)[0], np.array([0, 0, 5.0]), cam), floor, cam.n_rays)
    assert seen and all(table.bits[0, k] for k in seen)
    # the upper cell starts 10 m up, beyond the 8 m range
    assert not table.bits[1].any()


def test_more_samples_give_a_superset(desk):
    small = learn_table(desk, samples=5)
    big = learn_table(desk, samples=12)
    assert np.all(big.bits >= small.bits)


def test_bits_respect_range(desk_table, desk):
    env = desk.env
    reach = desk.camera.max_range + np.linalg.norm(env.cell_size)
    for c in range(env.n_cells):
        lo, hi = env.cell_bounds(c)
        far = np.linalg.norm(desk.mesh.centroids - 0.5 * (lo + hi), axis=1) > reach
        assert not desk_table.bits[c, far].any()


def test_table_files(tmp_path, desk, desk_table):
    p = tmp_path / "t.vistab"
    save_table(desk_table, p)
    assert load_table(p, desk) == desk_table
    save_table(learn_table(desk), tmp_path / "u.vistab")
    assert p.read_bytes() == (tmp_path / "u.vistab").read_bytes()
    lines = p.read_text().splitlines()
    (tmp_path / "cut.vistab").write_text("\n".join(lines[:len(lines) // 2]) + "\n")
    with pytest.raises(TableError):
        load_table(tmp_path / "cut.vistab")
    other = desk.with_(mesh=gaussian_mesh(40.0, grid_res=4))
    with pytest.raises(TableError, match="table/scenario mismatch"):
        load_table(p, other)


def test_large_table_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    t = VisibilityTable((10, 10, 10), 338, 10, 1, rng.random((1000, 338)) < 0.05)
    save_table(t, tmp_path / "big.vistab")
    assert load_table(tmp_path / "big.vistab") == t
