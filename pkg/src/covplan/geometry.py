"""Tolerance-controlled 3D primitives.

Points and directions are plain ``numpy`` arrays of shape ``(3,)``.  Planes
and convex hulls store outward normals, so containment is always the closed
half-space test ``normal . x <= offset``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

EPS_PAR = 1e-9
EPS_BARY = 1e-9
EPS_PLANE = 1e-6
EPS_AREA = 1e-9
EPS_HS = 1e-9


class GeometryError(ValueError):
    pass


def vec3(x, y=None, z=None) -> np.ndarray:
    if y is None:
        v = np.asarray(x, dtype=float).reshape(3)
    else:
        v = np.array([x, y, z], dtype=float)
    if not np.all(np.isfinite(v)):
        raise GeometryError("non-finite vector component")
    return v


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float

    @classmethod
    def from_point(cls, normal, point) -> "Plane":
        n = vec3(normal)
        if np.linalg.norm(n) <= 0.0:
            raise GeometryError("zero plane normal")
        return cls(n, float(n @ vec3(point)))

    def signed(self, p) -> float:
        return float(self.normal @ p - self.offset)


@dataclass(frozen=True)
class Triangle:
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    def __post_init__(self):
        if self.area() <= EPS_AREA:
            raise GeometryError("degenerate triangle")

    @property
    def vertices(self) -> np.ndarray:
        return np.stack([self.v0, self.v1, self.v2])

    def raw_normal(self) -> np.ndarray:
        return np.cross(self.v1 - self.v0, self.v2 - self.v0)

    def area(self) -> float:
        return 0.5 * float(np.linalg.norm(self.raw_normal()))

    def centroid(self) -> np.ndarray:
        return (self.v0 + self.v1 + self.v2) / 3.0

    def plane(self) -> Plane:
        n = self.raw_normal()
        return Plane.from_point(n / np.linalg.norm(n), self.v0)


@dataclass(frozen=True)
class ConvexHullH:
    """Closed convex polytope ``{x : normals @ x <= offsets}``."""

    normals: np.ndarray  # (k, 3), unit length, outward
    offsets: np.ndarray  # (k,)

    @property
    def face_count(self) -> int:
        return len(self.offsets)

    @property
    def faces(self) -> list[Plane]:
        return [Plane(n, float(b)) for n, b in zip(self.normals, self.offsets)]

    def translated(self, shift) -> "ConvexHullH":
        return ConvexHullH(self.normals, self.offsets + self.normals @ shift)

    def contains(self, p, eps: float = EPS_HS) -> bool:
        return point_in_hull(p, self, eps)


def ray_plane_intersect(origin, endpoint, plane: Plane, eps_par: float = EPS_PAR):
    """Parameter ``d`` where the segment ``origin + d (endpoint - origin)`` meets
    ``plane``, or ``None`` when the segment direction is parallel to it."""
    origin = np.asarray(origin, dtype=float)
    endpoint = np.asarray(endpoint, dtype=float)
    denom = float(plane.normal @ (endpoint - origin))
    if abs(denom) < eps_par:
        return None
    return (plane.offset - float(plane.normal @ origin)) / denom


def barycentric(p, tri: Triangle) -> np.ndarray:
    e0 = tri.v1 - tri.v0
    e1 = tri.v2 - tri.v0
    w = p - tri.v0
    d00 = e0 @ e0
    d01 = e0 @ e1
    d11 = e1 @ e1
    d20 = w @ e0
    d21 = w @ e1
    den = d00 * d11 - d01 * d01
    b1 = (d11 * d20 - d01 * d21) / den
    b2 = (d00 * d21 - d01 * d20) / den
    return np.array([1.0 - b1 - b2, b1, b2])


def point_in_triangle(p, tri: Triangle, eps_plane: float = EPS_PLANE,
                      eps_bary: float = EPS_BARY) -> bool:
    """Closed containment test; points farther than ``eps_plane`` from the
    triangle's plane are never contained."""
    p = np.asarray(p, dtype=float)
    if abs(tri.plane().signed(p)) > eps_plane:
        return False
    return bool(np.all(barycentric(p, tri) >= -eps_bary))


def point_in_hull(p, hull: ConvexHullH, eps: float = EPS_HS) -> bool:
    return bool(np.all(hull.normals @ np.asarray(p, dtype=float) <= hull.offsets + eps))


def hull_from_points(points, merge_tol: float = 1e-9) -> ConvexHullH:
    """Half-space representation of the convex hull of ``points``.

    Qhull triangulates polytope faces, so coplanar facets are merged.  Faces
    are sorted lexicographically by normal for a deterministic layout.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise GeometryError("degenerate hull")
    centered = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(centered).max())) < 3:
        raise GeometryError("degenerate hull")
    try:
        qh = ConvexHull(pts)
    except QhullError as exc:
        raise GeometryError("degenerate hull") from exc
    scale = max(1.0, float(np.abs(pts).max()))
    normals: list[np.ndarray] = []
    offsets: list[float] = []
    for eq in qh.equations:
        n = eq[:3] / np.linalg.norm(eq[:3])
        b = -eq[3] / np.linalg.norm(eq[:3])
        for k, (m, c) in enumerate(zip(normals, offsets)):
            if np.abs(m - n).max() < merge_tol * 1e3 and abs(c - b) < merge_tol * 1e3 * scale:
                break
        else:
            normals.append(n)
            offsets.append(b)
    order = np.lexsort(np.array(normals).T[::-1])
    return ConvexHullH(np.array(normals)[order], np.array(offsets)[order])


def box_hull(lo, hi) -> ConvexHullH:
    """Axis-aligned box as six outward half-spaces (-x, -y, -z, +x, +y, +z)."""
    lo = vec3(lo)
    hi = vec3(hi)
    normals = np.vstack([-np.eye(3), np.eye(3)])
    return ConvexHullH(normals, np.concatenate([-lo, hi]))


def hull_volume(points) -> float:
    return float(ConvexHull(np.asarray(points, dtype=float)).volume)
