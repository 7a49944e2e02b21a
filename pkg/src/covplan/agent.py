"""UAV point-mass kinematics and the gimballed pyramid camera."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from covplan.geometry import ConvexHullH, hull_from_points


class ControlSaturation(ValueError):
    pass


@dataclass(frozen=True)
class KinematicParams:
    dt: float = 1.0
    drag: float = 0.2
    mass: float = 1.1
    vel_bound: float = 15.0
    force_bound: float = 10.0

    def __post_init__(self):
        if self.dt <= 0 or self.mass <= 0 or not 0 <= self.drag < 1:
            raise ValueError("invalid kinematic parameters")
        if self.vel_bound <= 0 or self.force_bound <= 0:
            raise ValueError("bounds must be positive")

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """State-space ``(A, B)`` for the 6-vector ``[pos, vel]``."""
        i3 = np.eye(3)
        a = np.block([[i3, self.dt * i3], [np.zeros((3, 3)), (1 - self.drag) * i3]])
        b = np.vstack([np.zeros((3, 3)), (self.dt / self.mass) * i3])
        return a, b


@dataclass(frozen=True)
class AgentState:
    pos: np.ndarray
    vel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    @classmethod
    def from_vector(cls, x) -> "AgentState":
        x = np.asarray(x, dtype=float)
        return cls(x[:3].copy(), x[3:6].copy())


def step(state: AgentState, force, params: KinematicParams, tol: float = 1e-9) -> AgentState:
    force = np.asarray(force, dtype=float)
    if np.any(np.abs(force) > params.force_bound + tol):
        raise ControlSaturation("control saturation")
    pos = state.pos + params.dt * state.vel
    vel = (1.0 - params.drag) * state.vel + (params.dt / params.mass) * force
    return AgentState(pos, vel)


def rollout(x0: AgentState, forces, params: KinematicParams) -> list[AgentState]:
    states = [x0]
    for f in forces:
        states.append(step(states[-1], f, params))
    return states


@dataclass(frozen=True)
class CameraParams:
    base_len: float = 9.5
    base_wid: float = 9.5
    range: float = 8.0
    zoom_levels: tuple[float, ...] = (1.0, 2.0)
    thetas: tuple[float, ...] = tuple(math.radians(a) for a in (30, 90, 150))
    phis: tuple[float, ...] = tuple(math.radians(a) for a in (30, 105, 180, 255, 330))
    n_rays: int = 50

    def __post_init__(self):
        if min(self.base_len, self.base_wid, self.range) <= 0:
            raise ValueError("FOV dimensions must be positive")
        if any(z < 1 for z in self.zoom_levels) or not self.zoom_levels:
            raise ValueError("zoom levels must be >= 1")
        if not self.thetas or not self.phis:
            raise ValueError("empty angle set")
        if self.n_rays < 1:
            raise ValueError("n_rays must be >= 1")

    @classmethod
    def from_degrees(cls, l, w, h, zoom_levels, thetas_deg, phis_deg, n_rays=50):
        return cls(float(l), float(w), float(h), tuple(float(z) for z in zoom_levels),
                   tuple(math.radians(a) for a in thetas_deg),
                   tuple(math.radians(a) for a in phis_deg), int(n_rays))

    @property
    def max_range(self) -> float:
        return self.range * max(self.zoom_levels)


@dataclass(frozen=True)
class CameraConfig:
    index: int
    zoom: float
    theta: float
    phi: float


def enumerate_configs(params: CameraParams) -> list[CameraConfig]:
    """All zoom/tilt/pan combinations, zoom-major then theta then phi."""
    combos = itertools.product(params.zoom_levels, params.thetas, params.phis)
    return [CameraConfig(i, z, t, p) for i, (z, t, p) in enumerate(combos)]


def fov_base(zoom: float, params: CameraParams) -> np.ndarray:
    """Downward-facing FOV vertices at the origin as a ``(5, 3)`` array;
    rows 0-3 are base corners, row 4 the apex."""
    if not any(math.isclose(zoom, z) for z in params.zoom_levels):
        raise ValueError(f"zoom {zoom} not in admissible set")
    l = params.base_len / zoom
    w = params.base_wid / zoom
    h = params.range * zoom
    return np.array([
        [-l / 2, w / 2, -h],
        [l / 2, w / 2, -h],
        [l / 2, -w / 2, -h],
        [-l / 2, -w / 2, -h],
        [0.0, 0.0, 0.0],
    ])


def rot_theta(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_phi(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class FovPose:
    vertices: np.ndarray  # (5, 3); row 4 is the apex
    hull: ConvexHullH

    @property
    def apex(self) -> np.ndarray:
        return self.vertices[4]


def fov_offsets(config: CameraConfig, params: CameraParams) -> np.ndarray:
    """Rotated FOV vertices relative to the optical center."""
    r = rot_phi(config.phi) @ rot_theta(config.theta)
    return fov_base(config.zoom, params) @ r.T


def fov_pose(config: CameraConfig, agent_pos, params: CameraParams) -> FovPose:
    verts = fov_offsets(config, params) + np.asarray(agent_pos, dtype=float)
    return FovPose(verts, hull_from_points(verts))


def base_points(pose: FovPose, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    c0, c1, _, c3 = pose.vertices[:4]
    eu = c1 - c0
    ev = c3 - c0
    if rng is None:
        k = math.ceil(math.sqrt(n))
        g = (np.arange(k) + 0.5) / k
        uu, vv = np.meshgrid(g, g, indexing="ij")
        uv = np.column_stack([uu.ravel(), vv.ravel()])[:n]
    else:
        uv = rng.random((n, 2))
    return c0 + uv[:, :1] * eu + uv[:, 1:] * ev


@dataclass(frozen=True)
class LightRays:
    """``n`` rays sharing the optical center as their endpoint."""

    origins: np.ndarray  # (n, 3) points on the FOV base
    endpoint: np.ndarray  # (3,)

    def __len__(self):
        return len(self.origins)

    def __iter__(self):
        return (LightRay(o, self.endpoint) for o in self.origins)


@dataclass(frozen=True)
class LightRay:
    origin: np.ndarray
    endpoint: np.ndarray

    def at(self, d: float) -> np.ndarray:
        return self.origin + d * (self.endpoint - self.origin)


def light_rays(pose: FovPose, n: int, seed=None) -> LightRays:
    """Rays from the FOV base to the apex: a stratified grid by default,
    uniform on the base when ``seed`` (int or Generator) is given."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = None if seed is None else np.random.default_rng(seed)
    return LightRays(base_points(pose, n, rng), pose.apex.copy())
