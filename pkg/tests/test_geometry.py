import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covplan.agent import CameraParams, enumerate_configs, fov_offsets, fov_pose
from covplan.geometry import (GeometryError, Plane, Triangle, box_hull, hull_from_points,
                              point_in_hull, point_in_triangle, ray_plane_intersect)

coord = st.floats(-50, 50, allow_nan=False)
vec = st.tuples(coord, coord, coord).map(np.array)
Z0 = Plane(np.array([0.0, 0.0, 1.0]), 0.0)
TRI = Triangle(np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0]))


def test_ray_plane_crossing_midpoint():
    assert ray_plane_intersect([0, 0, -1], [0, 0, 1], Z0) == pytest.approx(0.5)


def test_ray_plane_parallel_is_none():
    assert ray_plane_intersect([0, 0, 1], [1, 0, 1], Z0) is None


def test_ray_plane_endpoint_on_plane():
    assert ray_plane_intersect([0, 0, -2], [0, 0, 0], Z0) == pytest.approx(1.0)


@given(vec, vec)
def test_ray_plane_point_lies_on_plane(o, e):
    d = ray_plane_intersect(o, e, Z0)
    if d is not None:
        p = o + d * (e - o)
        assert abs(p[2]) <= 1e-6 * max(1.0, np.abs(o).max(), np.abs(e).max())


def test_point_in_triangle_cases():
    assert point_in_triangle(np.array([1 / 3, 1 / 3, 0]), TRI)
    assert not point_in_triangle(np.array([2.0, 2.0, 0]), TRI)
    assert point_in_triangle(np.array([1.0, 0, 0]), TRI)
    assert not point_in_triangle(np.array([0.2, 0.2, 0.5]), TRI)


@given(st.floats(0, 1), st.floats(0, 1))
def test_convex_combinations_are_inside(a, b):
    if a + b > 1:
        a, b = 1 - a, 1 - b
    p = TRI.v0 + a * (TRI.v1 - TRI.v0) + b * (TRI.v2 - TRI.v0)
    assert point_in_triangle(p, TRI)


def test_box_membership():
    box = box_hull([-0.5] * 3, [0.5] * 3)
    assert point_in_hull(np.zeros(3), box)
    assert not point_in_hull(np.array([10.0, 0, 0]), box)


def test_hull_face_counts():
    cube = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float)
    assert hull_from_points(cube).face_count == 6
    tet = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    assert hull_from_points(tet).face_count == 4
    cam = CameraParams()
    assert hull_from_points(fov_offsets(enumerate_configs(cam)[0], cam)).face_count == 5


def test_degenerate_hull_rejected():
    flat = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    with pytest.raises(GeometryError, match="degenerate hull"):
        hull_from_points(flat)


def test_fov_apex_is_inside_its_hull():
    cam = CameraParams()
    for cfg in enumerate_configs(cam):
        pose = fov_pose(cfg, [3.0, -2.0, 7.0], cam)
        assert point_in_hull(np.array([3.0, -2.0, 7.0]), pose.hull)


@settings(max_examples=50)
@given(st.lists(vec, min_size=6, max_size=20))
def test_hull_contains_its_generators(points):
    pts = np.array(points)
    try:
        hull = hull_from_points(pts)
    except GeometryError:
        return
    assert np.all(np.linalg.norm(hull.normals, axis=1) == pytest.approx(1.0))
    for p in pts:
        assert point_in_hull(p, hull, 1e-6)
