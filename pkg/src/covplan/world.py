"""Scenario model: environment grid, object mesh, obstacles and JSON loading."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from covplan.agent import AgentState, CameraParams, KinematicParams
from covplan.geometry import (EPS_AREA, ConvexHullH, GeometryError, box_hull,
                              hull_from_points)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Environment:
    min_corner: np.ndarray
    max_corner: np.ndarray
    grid_dims: tuple[int, int, int]

    def __post_init__(self):
        if np.any(np.asarray(self.max_corner) <= np.asarray(self.min_corner)):
            raise ScenarioError("environment max must exceed min")
        if any(int(d) < 1 for d in self.grid_dims):
            raise ScenarioError("grid dims must be >= 1")

    @property
    def cell_size(self) -> np.ndarray:
        return (self.max_corner - self.min_corner) / np.asarray(self.grid_dims, dtype=float)

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.grid_dims
        return nx * ny * nz

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.max_corner - self.min_corner))

    def contains(self, p, eps: float = 1e-9) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.min_corner - eps) and np.all(p <= self.max_corner + eps))

    def flat_index(self, ix: int, iy: int, iz: int) -> int:
        _, ny, nz = self.grid_dims
        return (ix * ny + iy) * nz + iz

    def unflatten(self, index: int) -> tuple[int, int, int]:
        _, ny, nz = self.grid_dims
        ix, rest = divmod(index, ny * nz)
        iy, iz = divmod(rest, nz)
        return ix, iy, iz

    def cell_bounds(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        ijk = np.array(self.unflatten(index), dtype=float)
        lo = self.min_corner + ijk * self.cell_size
        return lo, lo + self.cell_size


@dataclass(frozen=True)
class Cell:
    index: int
    lo: np.ndarray
    hi: np.ndarray

    @property
    def box(self) -> ConvexHullH:
        return box_hull(self.lo, self.hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


def make_grid(env: Environment) -> list[Cell]:
    return [Cell(i, *env.cell_bounds(i)) for i in range(env.n_cells)]


def locate_cell(p, env: Environment, eps: float = 1e-9) -> int:
    """Index of the closed cell containing ``p``; shared faces go to the
    lower index."""
    p = np.asarray(p, dtype=float)
    if not env.contains(p, eps):
        raise ScenarioError("out of bounds")
    r = (p - env.min_corner) / env.cell_size
    ijk = np.ceil(r).astype(int) - 1
    ijk = np.clip(ijk, 0, np.asarray(env.grid_dims) - 1)
    return env.flat_index(*(int(v) for v in ijk))


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (K, 3) vertex indices, counter-clockwise seen from outside

    @property
    def n_facets(self) -> int:
        return len(self.faces)

    @property
    def tris(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def centroids(self) -> np.ndarray:
        return self.tris.mean(axis=1)

    @property
    def normals(self) -> np.ndarray:
        t = self.tris
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def offsets(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.normals, self.tris[:, 0])

    def areas(self) -> np.ndarray:
        t = self.tris
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def subset(self, facets) -> "Mesh":
        return Mesh(self.vertices, self.faces[np.asarray(facets, dtype=int)])

    def hull(self) -> ConvexHullH:
        return hull_from_points(self.vertices[np.unique(self.faces)])


def _checked_mesh(vertices, faces, orient="centroid") -> Mesh:
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    faces = np.asarray(faces, dtype=int).reshape(-1, 3)
    if len(faces) == 0:
        raise ScenarioError("empty mesh")
    t = vertices[faces]
    raw = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    area = 0.5 * np.linalg.norm(raw, axis=1)
    bad = np.flatnonzero(area <= EPS_AREA)
    if len(bad):
        raise ScenarioError(f"degenerate facet {int(bad[0])}")
    if orient == "up":
        flip = raw[:, 2] < 0
    else:
        center = vertices[np.unique(faces)].mean(axis=0)
        flip = np.einsum("ij,ij->i", raw, t.mean(axis=1) - center) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return Mesh(vertices, faces)


def load_mesh(path) -> Mesh:
    """Read the OBJ subset ``v x y z`` / ``f i j k`` (1-based indices)."""
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        try:
            if tag == "v" and len(rest) == 3:
                verts.append([float(x) for x in rest])
            elif tag == "f" and len(rest) == 3:
                faces.append([int(x) - 1 for x in rest])
            else:
                raise ValueError(tag)
        except ValueError:
            raise ScenarioError(f"{path}:{lineno}: cannot parse {raw!r}") from None
    for k, f in enumerate(faces):
        if min(f) < 0 or max(f) >= len(verts):
            raise ScenarioError(f"facet {k} references missing vertex")
    return _checked_mesh(verts, faces)


def save_mesh(mesh: Mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def gaussian_height(xy, amplitude, center, sigma2) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    q = (xy[..., 0] - center[0]) ** 2 / (2 * sigma2[0]) + (xy[..., 1] - center[1]) ** 2 / (2 * sigma2[1])
    return amplitude * np.exp(-q)


def gaussian_mesh(amplitude: float, center=(45.0, 45.0), sigma2=(80.0, 80.0),
                  extent=(0.0, 90.0, 0.0, 90.0), grid_res: int = 14) -> Mesh:
    """Triangulated Gaussian height field; ``2 (grid_res - 1)^2`` facets with
    upward normals."""
    if amplitude < 0 or grid_res < 2:
        raise ScenarioError("invalid gaussian surface parameters")
    x0, x1, y0, y1 = extent
    xs = np.linspace(x0, x1, grid_res)
    ys = np.linspace(y0, y1, grid_res)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    gz = gaussian_height(np.stack([gx, gy], axis=-1), amplitude, center, sigma2)
    verts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    idx = np.arange(grid_res * grid_res).reshape(grid_res, grid_res)
    faces = []
    for i in range(grid_res - 1):
        for j in range(grid_res - 1):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            faces.append([a, b, c])
            faces.append([a, c, d])
    return _checked_mesh(verts, faces, orient="up")


@dataclass(frozen=True)
class ObstacleSet:
    obstacles: tuple[ConvexHullH, ...] = ()

    def __len__(self):
        return len(self.obstacles)

    def __iter__(self):
        return iter(self.obstacles)

    def clearance(self, p) -> float:
        """Smallest over obstacles of the largest face violation ``a.p - b``
        (positive means outside every obstacle)."""
        if not self.obstacles:
            return math.inf
        return min(float(np.max(h.normals @ p - h.offsets)) for h in self.obstacles)


@dataclass(frozen=True)
class ObjectiveWeights:
    omega: float = 0.1
    omega_hat: float = 0.0
    delta: float = 10.0
    secondary: str | None = None

    def __post_init__(self):
        if self.omega < 0 or self.omega_hat < 0:
            raise ScenarioError("objective weights must be non-negative")
        if self.secondary not in (None, "fov_smoothness", "motion_smoothness"):
            raise ScenarioError(f"unknown secondary objective {self.secondary!r}")


@dataclass(frozen=True)
class Scenario:
    env: Environment
    mesh: Mesh
    obstacles: ObstacleSet
    kin: KinematicParams
    camera: CameraParams
    objective: ObjectiveWeights
    horizon: int = 5
    mission_limit: int = 100
    seed: int = 0
    samples_per_cell: int = 100
    start: AgentState = field(default_factory=lambda: AgentState(np.zeros(3)))
    targets: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ScenarioError("horizon must be >= 1")
        if self.mission_limit < 0:
            raise ScenarioError("mission limit must be >= 0")

    @property
    def target_facets(self) -> tuple[int, ...]:
        if self.targets is None:
            return tuple(range(self.mesh.n_facets))
        return self.targets

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)


def _vec(v) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape(3)


def scenario_from_dict(doc: dict, base_dir=".") -> Scenario:
    base_dir = Path(base_dir)
    e = doc["env"]
    env = Environment(_vec(e["min"]), _vec(e["max"]), tuple(int(d) for d in e["grid_dims"]))
    a = doc.get("agent", {})
    kin = KinematicParams(**{k: float(a[k]) for k in ("dt", "drag", "mass", "vel_bound", "force_bound") if k in a})
    c = doc.get("camera", {})
    camera = CameraParams.from_degrees(
        c.get("l", 9.5), c.get("w", 9.5), c.get("h", 8.0), c.get("zoom_levels", [1, 2]),
        c.get("thetas_deg", [30, 90, 150]), c.get("phis_deg", [30, 105, 180, 255, 330]),
        c.get("n_rays", 50))
    o = doc.get("objective", {})
    if o.get("gamma", "exp") != "exp":
        raise ScenarioError("only gamma='exp' is supported")
    objective = ObjectiveWeights(float(o.get("omega", 0.1)), float(o.get("omega_hat", 0.0)),
                                 float(o.get("delta", 10.0)), o.get("secondary"))
    if doc.get("mesh_path"):
        mesh = load_mesh(base_dir / doc["mesh_path"])
    elif "gaussian" in doc:
        g = doc["gaussian"]
        mesh = gaussian_mesh(float(g["amplitude"]), tuple(g["center"]), tuple(g["sigma2"]),
                             tuple(g["extent"]), int(g["grid_res"]))
    else:
        raise ScenarioError("scenario needs mesh_path or gaussian")
    hulls = [hull_from_points(np.asarray(v, dtype=float)) for v in doc.get("obstacles", [])]
    if doc.get("object_obstacle", True):
        hulls.append(mesh.hull())
    s = doc.get("start", {})
    start = AgentState(_vec(s.get("pos", env.min_corner)), _vec(s.get("vel", [0, 0, 0])))
    targets = doc.get("targets")
    return Scenario(env, mesh, ObstacleSet(tuple(hulls)), kin, camera, objective,
                    int(doc.get("horizon_T", 5)), int(doc.get("mission_limit", 100)),
                    int(doc.get("seed", 0)), int(doc.get("samples_per_cell", 100)), start,
                    None if targets is None else tuple(int(t) for t in targets))


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    try:
        return scenario_from_dict(doc, path.parent)
    except (KeyError, TypeError, GeometryError) as exc:
        raise ScenarioError(f"{path}: invalid scenario ({exc})") from exc
