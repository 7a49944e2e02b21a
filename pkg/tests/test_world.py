import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covplan.world import (Environment, Mesh, ScenarioError, gaussian_height, gaussian_mesh,
                           load_mesh, load_scenario, locate_cell, make_grid, save_mesh)

ENV = Environment(np.zeros(3), np.full(3, 100.0), (10, 10, 10))


def test_grid_sizes():
    cells = make_grid(ENV)
    assert len(cells) == 1000
    assert np.allclose(cells[0].hi - cells[0].lo, 10)
    one = Environment(np.zeros(3), np.ones(3), (1, 1, 1))
    (c,) = make_grid(one)
    assert np.allclose(c.lo, 0) and np.allclose(c.hi, 1)


def test_cells_partition_volume():
    env = Environment(np.array([-3.0, 0, 1]), np.array([4.0, 2, 9]), (3, 4, 5))
    vol = sum(np.prod(c.hi - c.lo) for c in make_grid(env))
    assert vol == pytest.approx(7 * 2 * 8, rel=1e-6)


def test_locate_cell_cases():
    assert locate_cell([5, 5, 5], ENV) == 0
    assert locate_cell([95, 95, 95], ENV) == 999
    assert ENV.unflatten(locate_cell([10, 5, 5], ENV)) == (0, 0, 0)
    with pytest.raises(ScenarioError, match="out of bounds"):
        locate_cell([101, 5, 5], ENV)


def test_cell_centers_locate_to_themselves():
    env = Environment(np.array([20.0, 20, 0]), np.array([70.0, 70, 50]), (5, 5, 5))
    for c in make_grid(env):
        assert locate_cell(c.center, env) == c.index


def test_gaussian_peak_and_count():
    m = gaussian_mesh(40.0, (45, 45), (80, 80), (0, 90, 0, 90), 11)
    assert m.vertices[:, 2].max() == pytest.approx(40.0)
    assert gaussian_mesh(40.0, grid_res=14).n_facets == 338
    flat = gaussian_mesh(0.0, grid_res=5)
    assert np.allclose(flat.vertices[:, 2], 0) and np.allclose(flat.normals[:, 2], 1)


def test_gaussian_centroid_error_shrinks():
    errs = []
    for r in (9, 17, 33):
        m = gaussian_mesh(40.0, grid_res=r)
        c = m.centroids
        errs.append(np.abs(c[:, 2] - gaussian_height(c[:, :2], 40.0, (45, 45), (80, 80))).max())
    assert errs[0] > errs[1] > errs[2]


def test_mesh_file_cases(tmp_path):
    p = tmp_path / "one.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    assert load_mesh(p).n_facets == 1
    p.write_text("# nothing\n")
    with pytest.raises(ScenarioError, match="empty mesh"):
        load_mesh(p)
    p.write_text("v 0 0 0\nvt 1 0\n")
    with pytest.raises(ScenarioError, match=":2:"):
        load_mesh(p)
    p.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(ScenarioError, match="degenerate facet 0"):
        load_mesh(p)


def test_cube_normals_point_outward(tmp_path):
    v = [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    p = tmp_path / "cube.obj"
    # write half the triangles with flipped winding to exercise orientation
    lines = [f"v {x} {y} {z}" for x, y, z in v]
    lines += [f"f {a + 1} {c + 1} {b + 1}" if i % 2 else f"f {a + 1} {b + 1} {c + 1}" for i, (a, b, c) in enumerate(f)]
    p.write_text("\n".join(lines) + "\n")
    m = load_mesh(p)
    assert m.n_facets == 12
    assert np.all(np.einsum("ij,ij->i", m.normals, m.centroids - 0.5) > 0)


@settings(max_examples=30)
@given(st.floats(-np.pi, np.pi), st.tuples(*[st.floats(-20, 20)] * 3))
def test_area_invariant_under_rigid_motion(angle, shift):
    m = gaussian_mesh(40.0, grid_res=6)
    c, s = np.cos(angle), np.sin(angle)
    r = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    moved = Mesh(m.vertices @ r.T + np.array(shift), m.faces)
    assert moved.areas().sum() == pytest.approx(m.areas().sum(), rel=1e-9)


def test_mesh_round_trip(tmp_path):
    m = gaussian_mesh(40.0, grid_res=4)
    save_mesh(m, tmp_path / "g.obj")
    back = load_mesh(tmp_path / "g.obj")
    assert np.array_equal(back.vertices, m.vertices)
    # file facets are re-oriented away from the vertex centroid, so an open
    # height field keeps its planes but not necessarily its normal signs
    assert np.allclose(np.abs(np.einsum("ij,ij->i", back.normals, m.normals)), 1.0)


def test_closed_mesh_round_trip(tmp_path):
    cube = Mesh(np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float),
                np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                          [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]))
    save_mesh(cube, tmp_path / "c.obj")
    back = load_mesh(tmp_path / "c.obj")
    out = np.einsum("ij,ij->i", back.normals, back.centroids - 0.5)
    assert np.all(out > 0)
    save_mesh(back, tmp_path / "d.obj")
    assert np.array_equal(load_mesh(tmp_path / "d.obj").faces, back.faces)


def test_scenario_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(p)
    p.write_text(json.dumps({"env": {"min": [0, 0, 0], "max": [1, 1, 1], "grid_dims": [1, 1, 1]}}))
    with pytest.raises(ScenarioError, match="mesh"):
        load_scenario(p)


def test_desk_scenario(desk):
    assert desk.mesh.n_facets == 72
    assert desk.env.n_cells == 125
    assert desk.horizon == 3
    assert desk.obstacles.clearance(desk.start.pos) > 0
