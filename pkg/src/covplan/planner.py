"""Rolling-horizon coverage controller.

Each step builds a mixed-integer QP over the next ``T`` predicted states,
solves it with the reference branch and bound, applies the first force and
camera configuration, and updates the coverage memory from the realized pose.
"""
from __future__ import annotations

import csv
import functools
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from covplan.agent import (AgentState, CameraParams, enumerate_configs, fov_offsets, fov_pose,
                           step)
from covplan.geometry import hull_from_points
from covplan.mip import MipModel, SolverConfig, solve
from covplan.mip.solver import INFEASIBLE
from covplan.raytrace import VisibilityTable, visible_facets
from covplan.world import Environment, Scenario, locate_cell

MEMBERSHIP_TOL = 1e-6

# branching priorities: camera choice first, then where the agent is
PRIO_CONFIG, PRIO_CELL, PRIO_OBSTACLE, PRIO_FOV, PRIO_COVER = 4, 3, 2, 1, 0


class PlanningError(RuntimeError):
    def __init__(self, message: str, cause: str | None = None):
        super().__init__(message)
        self.cause = cause


@dataclass(frozen=True)
class BigMPolicy:
    M: float | None = None
    eps_strict: float = 1e-3

    def value(self, scenario: Scenario) -> float:
        """Explicit ``M`` or the geometric default: environment diameter times
        the largest face-normal norm plus the largest offset magnitude plus 1."""
        if self.M is not None:
            return float(self.M)
        geo = camera_geometry(scenario.camera)
        betas = [np.abs(geo.offsets).max(), np.abs(scenario.env.min_corner).max(),
                 np.abs(scenario.env.max_corner).max()]
        norms = [np.linalg.norm(geo.normals, axis=-1).max()]
        for h in scenario.obstacles:
            betas.append(np.abs(h.offsets).max())
            norms.append(np.linalg.norm(h.normals, axis=1).max())
        return scenario.env.diameter * max(norms) + max(betas) + 1.0


@dataclass(frozen=True)
class ObjectiveConfig:
    omega: float = 0.1
    delta: float = 10.0
    omega_hat: float = 0.0
    secondary: str | None = None
    horizon: int = 5

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.omega < 0 or self.omega_hat < 0:
            raise ValueError("weights must be non-negative")

    @classmethod
    def of(cls, scenario: Scenario, horizon: int | None = None) -> "ObjectiveConfig":
        w = scenario.objective
        return cls(w.omega, w.delta, w.omega_hat, w.secondary,
                   scenario.horizon if horizon is None else horizon)

    def gamma(self, tau: int) -> float:
        return math.exp(self.horizon - tau)

    def gammas(self) -> np.ndarray:
        return np.exp(self.horizon - np.arange(self.horizon, dtype=float))


@dataclass
class CoverageMemory:
    covered: np.ndarray  # bool per facet
    cover_time: np.ndarray  # int per facet, -1 if never

    @classmethod
    def empty(cls, n_facets: int) -> "CoverageMemory":
        return cls(np.zeros(n_facets, dtype=bool), np.full(n_facets, -1, dtype=int))

    def mark(self, facets, t: int) -> list[int]:
        new = sorted(int(k) for k in facets if not self.covered[k])
        self.covered[new] = True
        self.cover_time[new] = t
        return new

    def uncovered(self, targets) -> list[int]:
        return [int(k) for k in targets if not self.covered[k]]

    def copy(self) -> "CoverageMemory":
        return CoverageMemory(self.covered.copy(), self.cover_time.copy())


@dataclass(frozen=True)
class CameraGeometry:
    normals: np.ndarray  # (M, 5, 3) outward FOV face normals at the origin
    offsets: np.ndarray  # (M, 5)


@functools.lru_cache(maxsize=32)
def camera_geometry(camera: CameraParams) -> CameraGeometry:
    normals, offsets = [], []
    for cfg in enumerate_configs(camera):
        h = hull_from_points(fov_offsets(cfg, camera))
        if h.face_count != 5:
            raise PlanningError("FOV hull must have 5 faces")
        normals.append(h.normals)
        offsets.append(h.offsets)
    return CameraGeometry(np.array(normals), np.array(offsets))


def in_fov(points, config: int, pos, camera: CameraParams, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
    """Which rows of ``points`` lie in the FOV of ``config`` at ``pos``."""
    geo = camera_geometry(camera)
    rel = np.atleast_2d(points) - np.asarray(pos, dtype=float)
    return np.all(rel @ geo.normals[config].T <= geo.offsets[config] + tol, axis=1)


def nearest_uncovered(pos, mesh, memory: CoverageMemory, targets=None) -> int:
    targets = range(mesh.n_facets) if targets is None else targets
    cand = memory.uncovered(targets)
    if not cand:
        raise PlanningError("mission complete")
    d = np.linalg.norm(mesh.centroids[cand] - np.asarray(pos, dtype=float), axis=1)
    return cand[int(np.argmin(d))]  # argmin keeps the first, i.e. lowest index, on ties


@dataclass(frozen=True)
class Reach:
    pos_lo: np.ndarray  # (n, 3) for predicted positions p_1..p_n
    pos_hi: np.ndarray
    vel_lo: np.ndarray
    vel_hi: np.ndarray


def reachable(state: AgentState, scenario: Scenario, steps: int, clip_env: bool = True,
              bound_vel: bool = True) -> Reach:
    """Per-axis interval bounds on predicted states under the force and
    velocity boxes, clipped to the environment."""
    kin = scenario.kin
    env = scenario.env
    plo, phi = state.pos.copy(), state.pos.copy()
    vlo, vhi = state.vel.copy(), state.vel.copy()
    du = kin.dt / kin.mass * kin.force_bound
    out = []
    for _ in range(steps):
        plo, phi = plo + kin.dt * vlo, phi + kin.dt * vhi
        if clip_env:
            plo = np.maximum(plo, env.min_corner)
            phi = np.minimum(phi, env.max_corner)
            # a state on the boundary can round a hair outside; keep the interval non-empty
            gap = plo - phi
            phi = np.where((gap > 0) & (gap <= 1e-9), plo, phi)
        vlo = (1 - kin.drag) * vlo - du
        vhi = (1 - kin.drag) * vhi + du
        if bound_vel:
            vlo = np.maximum(vlo, -kin.vel_bound)
            vhi = np.minimum(vhi, kin.vel_bound)
        out.append((plo, phi, vlo, vhi))
    a = np.array(out)
    return Reach(a[:, 0], a[:, 1], a[:, 2], a[:, 3])


def cells_in_box(env: Environment, lo, hi) -> list[int]:
    size = env.cell_size
    dims = np.asarray(env.grid_dims)
    r_lo = (np.asarray(lo) - env.min_corner) / size
    r_hi = (np.asarray(hi) - env.min_corner) / size
    i_lo = np.clip(np.ceil(r_lo).astype(int) - 1, 0, dims - 1)
    i_hi = np.clip(np.floor(r_hi).astype(int), 0, dims - 1)
    return [env.flat_index(i, j, k)
            for i in range(i_lo[0], i_hi[0] + 1)
            for j in range(i_lo[1], i_hi[1] + 1)
            for k in range(i_lo[2], i_hi[2] + 1)]


def _box_max(normals, lo, hi):
    """max over the box of ``normals @ p`` for each row of ``normals``."""
    return np.maximum(normals * lo, normals * hi).sum(axis=-1)


def _box_min(normals, lo, hi):
    return np.minimum(normals * lo, normals * hi).sum(axis=-1)


@dataclass
class P2Map:
    """Variable ids and metadata of one built controller model."""

    horizon: int
    pos: np.ndarray  # (T, 3) ids of p_{tau+1}
    vel: np.ndarray  # (T, 3)
    force: np.ndarray  # (T, 3)
    dpos: np.ndarray  # (3,) position the distance term acts on
    target_point: np.ndarray
    kappa_star: int | None
    config: list[dict[int, int]]  # per tau: config -> s id
    cell: list[dict[int, int]]  # per tau: cell -> id
    triples: list[tuple[int, int, int, int, int, int]] = field(default_factory=list)  # (k, m, tau, bV, bbar, bhat)
    obstacle: dict[tuple[int, int], list[tuple[int, int | None]]] = field(default_factory=dict)
    eps_strict: float = 1e-3
    pos_lo: np.ndarray | None = None  # reachable position box per step
    pos_hi: np.ndarray | None = None


def build_p2(state: AgentState, memory: CoverageMemory, scenario: Scenario,
             table: VisibilityTable, horizon: int | None = None, bigm: BigMPolicy = BigMPolicy(),
             prev_config: int | None = None, prev_force=None, use_obstacles: bool = True,
             use_bounds: bool = True, skip_goal=()) -> tuple[MipModel, P2Map]:
    """Controller model at ``state``.  ``prev_config``/``prev_force`` feed the
    optional smoothness terms; ``use_obstacles``/``use_bounds`` exist for
    infeasibility diagnosis.  Facets in ``skip_goal`` stay targets but are
    not picked as the distance-term goal while others remain open."""
    obj = ObjectiveConfig.of(scenario, horizon)
    T = obj.horizon
    env, kin, mesh, cam = scenario.env, scenario.kin, scenario.mesh, scenario.camera
    geo = camera_geometry(cam)
    n_cfg = len(geo.offsets)
    big_m = bigm.value(scenario)
    eps = bigm.eps_strict
    table.check_matches(scenario)

    p1 = state.pos + kin.dt * state.vel
    if not env.contains(p1):
        raise PlanningError("agent outside discretized region", "bounds")
    reach = reachable(state, scenario, max(T, 2), bound_vel=use_bounds)
    if np.any(reach.pos_lo > reach.pos_hi + 1e-9):
        raise PlanningError("agent outside discretized region", "bounds")

    def check_m(val: float) -> float:
        if val > big_m:
            raise PlanningError(f"big-M {big_m:g} below required {val:g}", "bounds")
        return val

    m = MipModel("p2")
    fb = kin.force_bound if use_bounds else math.inf
    force = np.array([[m.add_continuous(-fb, fb, f"u{t}_{a}") for a in "xyz"] for t in range(T)])
    pos = np.array([[m.add_continuous(reach.pos_lo[t, a], reach.pos_hi[t, a], f"p{t + 1}_{a}")
                     for a in range(3)] for t in range(T)])
    vel = np.array([[m.add_continuous(reach.vel_lo[t, a], reach.vel_hi[t, a], f"v{t + 1}_{a}")
                     for a in range(3)] for t in range(T)])
    # x_{tau+1} = A x_tau + B u_tau
    for t in range(T):
        for a in range(3):
            if t == 0:
                m.add_linear_constraint({pos[0, a]: 1.0}, "=", state.pos[a] + kin.dt * state.vel[a])
                m.add_linear_constraint({vel[0, a]: 1.0, force[0, a]: -kin.dt / kin.mass}, "=",
                                        (1 - kin.drag) * state.vel[a])
            else:
                m.add_linear_constraint({pos[t, a]: 1.0, pos[t - 1, a]: -1.0, vel[t - 1, a]: -kin.dt}, "=", 0.0)
                m.add_linear_constraint({vel[t, a]: 1.0, vel[t - 1, a]: -(1 - kin.drag),
                                         force[t, a]: -kin.dt / kin.mass}, "=", 0.0)
    if T >= 2:
        dpos = pos[1]
    else:
        # first position the applied force moves
        dpos = np.array([m.add_continuous(reach.pos_lo[1, a], reach.pos_hi[1, a], f"pd_{a}") for a in range(3)])
        for a in range(3):
            m.add_linear_constraint({dpos[a]: 1.0, pos[0, a]: -1.0, vel[0, a]: -kin.dt}, "=", 0.0)

    targets = scenario.target_facets
    open_facets = memory.uncovered(targets)
    cent = mesh.centroids
    normals = mesh.normals if mesh.n_facets else np.zeros((0, 3))
    if open_facets:
        pool = [k for k in open_facets if k not in skip_goal] or open_facets
        kstar = nearest_uncovered(state.pos, mesh, memory, pool)
    elif mesh.n_facets:
        kstar = int(np.argmin(np.linalg.norm(cent - state.pos, axis=1)))
    else:
        kstar = None
    goal = state.pos.copy() if kstar is None else obj.delta * normals[kstar] + cent[kstar]

    bits = table.bits
    opened = np.array(open_facets, dtype=int)
    # candidate (facet, config) pairs per step and the cells that see them
    cells_t: list[list[int]] = []
    cand_t: list[np.ndarray] = []
    for t in range(T):
        lo, hi = reach.pos_lo[t], reach.pos_hi[t]
        cells = [locate_cell(p1, env)] if t == 0 else cells_in_box(env, lo, hi)
        cells_t.append(cells)
        cand = np.zeros((len(opened), n_cfg), dtype=bool)
        if len(opened):
            lhs = np.einsum("mij,kj->kmi", geo.normals, cent[opened]) - geo.offsets[None]
            for c in cells:
                clo, chi = env.cell_bounds(c)
                blo, bhi = np.maximum(lo, clo), np.minimum(hi, chi)
                if np.any(blo > bhi + 1e-9):
                    continue
                ok = np.all(lhs - _box_max(geo.normals, blo, bhi)[None] <= MEMBERSHIP_TOL, axis=2)
                cand |= ok & bits[c, opened][:, None]
        cand_t.append(cand)

    pmap = P2Map(T, pos, vel, force, dpos, goal, kstar, [], [], eps_strict=eps,
                 pos_lo=reach.pos_lo[:T], pos_hi=reach.pos_hi[:T])
    idle = None
    for t in range(T):
        used = set(np.flatnonzero(cand_t[t].any(axis=0)).tolist())
        if obj.secondary == "fov_smoothness" and obj.omega_hat > 0:
            used = set(range(n_cfg))
        else:
            spare = [c for c in range(n_cfg) if c not in used]
            if spare:
                idle = spare[0]
                used.add(idle)
        ids = {c: m.add_binary(f"s{t}_{c}", PRIO_CONFIG) for c in sorted(used)}
        m.add_linear_constraint({i: 1.0 for i in ids.values()}, "=", 1.0, f"one_config_{t}")
        pmap.config.append(ids)

    for t in range(T):
        lo, hi = reach.pos_lo[t], reach.pos_hi[t]
        ids = {}
        for c in cells_t[t]:
            b = m.add_binary(f"cell{t}_{c}", PRIO_CELL)
            ids[c] = b
            clo, chi = env.cell_bounds(c)
            for a in range(3):
                mm = clo[a] - lo[a]  # lo_c - p <= M (1 - b)
                if mm > 1e-12:
                    m.add_linear_constraint({pos[t, a]: -1.0, b: check_m(mm)}, "<=", mm - clo[a])
                mm = hi[a] - chi[a]  # p - hi_c <= M (1 - b)
                if mm > 1e-12:
                    m.add_linear_constraint({pos[t, a]: 1.0, b: check_m(mm)}, "<=", mm + chi[a])
        m.add_linear_constraint({i: 1.0 for i in ids.values()}, "=", 1.0, f"one_cell_{t}")
        pmap.cell.append(ids)

    gam = obj.gammas()
    per_facet: dict[int, list[int]] = {}
    bhat_cost: dict[int, float] = {}
    for t in range(T):
        lo, hi = reach.pos_lo[t], reach.pos_hi[t]
        for row, cfg in zip(*np.nonzero(cand_t[t])):
            k = int(opened[row])
            cfg = int(cfg)
            bv = m.add_binary(f"bV{t}_{k}_{cfg}", PRIO_FOV)
            bbar = m.add_binary(f"bbar{t}_{k}_{cfg}", PRIO_COVER)
            bhat = m.add_binary(f"bhat{t}_{k}_{cfg}", PRIO_COVER)
            # alpha.(c - p) - beta <= M (1 - bV) for each FOV face
            al, be = geo.normals[cfg], geo.offsets[cfg]
            base = al @ cent[k] - be
            need = base - _box_min(al, lo, hi)
            for i in range(5):
                if need[i] <= 1e-12:
                    continue
                mm = check_m(need[i])
                terms = {pos[t, a]: -al[i, a] for a in range(3) if al[i, a] != 0.0}
                terms[bv] = mm
                m.add_linear_constraint(terms, "<=", mm - base[i])
            s = pmap.config[t][cfg]
            vis = {pmap.cell[t][c]: 1.0 for c in cells_t[t] if bits[c, k]}
            m.add_linear_constraint({bbar: 1.0, s: -1.0}, "<=", 0.0)
            m.add_linear_constraint({bbar: 1.0, bv: -1.0}, "<=", 0.0)
            m.add_linear_constraint({bbar: 1.0, **{i: -v for i, v in vis.items()}}, "<=", 0.0)
            m.add_linear_constraint({bbar: 1.0, s: -1.0, bv: -1.0, **{i: -v for i, v in vis.items()}},
                                    ">=", -2.0)
            m.add_linear_constraint({bhat: 1.0, bbar: -1.0}, "<=", 0.0)
            per_facet.setdefault(k, []).append(bhat)
            bhat_cost[bhat] = -gam[t]
            pmap.triples.append((k, cfg, t, bv, bbar, bhat))
    for k, ids in sorted(per_facet.items()):
        if len(ids) > 1:
            m.add_linear_constraint({i: 1.0 for i in ids}, "<=", 1.0, f"once_{k}")

    if use_obstacles:
        for xi, hull in enumerate(scenario.obstacles):
            for t in range(T):
                lo, hi = reach.pos_lo[t], reach.pos_hi[t]
                need = hull.offsets + eps
                amin = _box_min(hull.normals, lo, hi)
                amax = _box_max(hull.normals, lo, hi)
                if np.any(amin >= need):
                    continue  # separated everywhere in the reachable box
                faces = np.flatnonzero(amax >= need)
                entry: list[tuple[int, int | None]] = []
                if len(faces) == 0:
                    m.add_linear_constraint({}, ">=", 1.0, f"obstacle{xi}_{t}_blocked")
                elif len(faces) == 1:
                    i = int(faces[0])
                    m.add_linear_constraint({pos[t, a]: hull.normals[i, a] for a in range(3)}, ">=", need[i])
                    entry.append((i, None))
                else:
                    released = []
                    for i in faces:
                        i = int(i)
                        b = m.add_binary(f"obs{xi}_{t}_{i}", PRIO_OBSTACLE)
                        terms = {pos[t, a]: hull.normals[i, a] for a in range(3)}
                        terms[b] = check_m(need[i] - amin[i])
                        m.add_linear_constraint(terms, ">=", need[i])
                        released.append(b)
                        entry.append((i, b))
                    m.add_linear_constraint({b: 1.0 for b in released}, "<=", len(released) - 1.0)
                pmap.obstacle[(xi, t)] = entry

    q: dict[tuple[int, int], float] = {}
    c_cont: dict[int, float] = {}
    const = 0.0
    for a in range(3):
        q[(dpos[a], dpos[a])] = obj.omega
        c_cont[dpos[a]] = -2.0 * obj.omega * goal[a]
        const += obj.omega * goal[a] ** 2
    c_bin = dict(bhat_cost)
    if obj.omega_hat > 0 and obj.secondary == "motion_smoothness":
        w = obj.omega_hat
        pairs = [(force[t + 1], force[t]) for t in range(T - 1)]
        for a in range(3):
            if prev_force is not None:
                f0 = float(prev_force[a])
                i = force[0, a]
                q[(i, i)] = q.get((i, i), 0.0) + w
                c_cont[i] = c_cont.get(i, 0.0) - 2.0 * w * f0
                const += w * f0 ** 2
            for u1, u0 in pairs:
                i, j = u1[a], u0[a]
                q[(i, i)] = q.get((i, i), 0.0) + w
                q[(j, j)] = q.get((j, j), 0.0) + w
                q[(min(i, j), max(i, j))] = q.get((min(i, j), max(i, j)), 0.0) - 2.0 * w
    if obj.omega_hat > 0 and obj.secondary == "fov_smoothness":
        w = obj.omega_hat
        for cfg in range(n_cfg):
            chain = [pmap.config[t][cfg] for t in range(T)]
            prev = None if prev_config is None else float(prev_config == cfg)
            for t in range(T):
                if t == 0 and prev is None:
                    continue
                zp = m.add_continuous(0.0, 1.0, f"dsp{t}_{cfg}")
                zm = m.add_continuous(0.0, 1.0, f"dsm{t}_{cfg}")
                if t == 0:
                    m.add_linear_constraint({chain[0]: 1.0, zp: -1.0, zm: 1.0}, "=", prev)
                else:
                    m.add_linear_constraint({chain[t]: 1.0, chain[t - 1]: -1.0, zp: -1.0, zm: 1.0}, "=", 0.0)
                c_cont[zp] = w
                c_cont[zm] = w
    m.set_objective(q, c_cont, c_bin, const)
    return m, pmap


def audit_solution(x, pmap: P2Map, scenario: Scenario, tol: float = MEMBERSHIP_TOL) -> list[str]:
    """Post-check a controller solution; returns human-readable violations."""
    out = []
    x = np.asarray(x, dtype=float)
    cent = scenario.mesh.centroids
    for t in range(pmap.horizon):
        s = sum(x[i] for i in pmap.config[t].values())
        if abs(s - 1.0) > tol:
            out.append(f"step {t}: config sum {s:.9g}")
        c = sum(x[i] for i in pmap.cell[t].values())
        if abs(c - 1.0) > tol:
            out.append(f"step {t}: cell sum {c:.9g}")
    per_facet: dict[int, float] = {}
    for k, cfg, t, bv, _, bhat in pmap.triples:
        per_facet[k] = per_facet.get(k, 0.0) + x[bhat]
        if x[bv] > 0.5 and not in_fov(cent[k], cfg, x[pmap.pos[t]], scenario.camera, tol)[0]:
            out.append(f"step {t}: facet {k} outside FOV {cfg} with bV=1")
    for k, v in per_facet.items():
        if v > 1.0 + tol:
            out.append(f"facet {k}: covered {v:.9g} times in one horizon")
    for t in range(pmap.horizon):
        clr = scenario.obstacles.clearance(x[pmap.pos[t]])
        if clr < pmap.eps_strict / 2:
            out.append(f"step {t}: obstacle clearance {clr:.3g}")
    return out


def _coverage(points, facets, scenario: Scenario, table: VisibilityTable) -> np.ndarray:
    """``(N, M, K)`` conjunction of FOV membership and the table bit of each
    point's cell, for every config and each of ``facets``."""
    geo = camera_geometry(scenario.camera)
    cells = np.array([locate_cell(p, scenario.env) for p in points])
    rel = scenario.mesh.centroids[facets][None, :, :] - points[:, None, :]
    dots = np.einsum("nkj,mij->nmki", rel, geo.normals)
    inside = np.all(dots <= geo.offsets[None, :, None, :] - 1e-9, axis=3)
    return inside & table.bits[cells][:, facets][:, None, :]


@dataclass
class _Beam:
    pos: list  # p_1 .. p_{d+1}
    vel: list  # v_0 .. v_d
    forces: list  # u_0 .. u_{d-1}
    configs: list
    claimed: np.ndarray  # bool per open facet
    score: float


def seed_plan(state: AgentState, memory: CoverageMemory, scenario: Scenario, table: VisibilityTable,
              model: MipModel, pmap: P2Map, prev_config: int | None = None, prev_force=None,
              width: int = 8, levels: int = 5) -> np.ndarray | None:
    """Feasible assignment for a built controller model from a beam search
    over a grid of forces, with the camera chosen greedily per step."""
    obj = ObjectiveConfig.of(scenario, pmap.horizon)
    T = pmap.horizon
    kin = scenario.kin
    eps = pmap.eps_strict
    opened = np.array(memory.uncovered(scenario.target_facets), dtype=int)
    triple = {(k, cfg, t): (bv, bbar, bhat) for k, cfg, t, bv, bbar, bhat in pmap.triples}
    col = {int(k): i for i, k in enumerate(opened)}
    allowed = np.zeros((T, camera_geometry(scenario.camera).offsets.shape[0]), dtype=bool)
    for t in range(T):
        allowed[t, list(pmap.config[t])] = True
    usable = np.zeros((T,) + allowed.shape[1:] + (len(opened),), dtype=bool)
    for k, cfg, t in triple:
        usable[t, cfg, col[k]] = True
    gam = obj.gammas()
    fov_w = obj.omega_hat if obj.secondary == "fov_smoothness" else 0.0
    mot_w = obj.omega_hat if obj.secondary == "motion_smoothness" else 0.0
    lv = np.linspace(-kin.force_bound, kin.force_bound, levels)
    grid = np.array(np.meshgrid(lv, lv, lv, indexing="ij")).reshape(3, -1).T

    def pick(cover, t, claimed, last):
        gain = ((cover & usable[t] & ~claimed[None]).sum(axis=1) * gam[t]).astype(float)
        gain[~allowed[t]] = -np.inf
        if fov_w and last is not None:
            gain -= fov_w * 2.0 * (np.arange(len(gain)) != last)
        m = int(np.argmax(gain))
        return m, gain[m], cover[m] & usable[t, m] & ~claimed

    p1 = state.pos + kin.dt * state.vel
    cover0 = _coverage(p1[None], opened, scenario, table)[0] if len(opened) else np.zeros((allowed.shape[1], 0), bool)
    m0, g0, new0 = pick(cover0, 0, np.zeros(len(opened), bool), prev_config)
    beams = [_Beam([p1], [state.vel], [], [m0], new0, g0)]
    for d in range(1, T):
        cands = []
        for b in beams:
            v = (1 - kin.drag) * b.vel[-1] + kin.dt / kin.mass * grid
            p = b.pos[-1] + kin.dt * v
            ok = np.all(np.abs(v) <= kin.vel_bound, axis=1)
            ok &= np.all(p >= pmap.pos_lo[d] - 1e-9, axis=1) & np.all(p <= pmap.pos_hi[d] + 1e-9, axis=1)
            ok &= np.array([scenario.obstacles.clearance(q) >= eps for q in p])
            idx = np.flatnonzero(ok)
            if len(idx) == 0:
                continue
            cover = _coverage(p[idx], opened, scenario, table) if len(opened) else np.zeros((len(idx), allowed.shape[1], 0), bool)
            for row, i in enumerate(idx):
                m, g, new = pick(cover[row], d, b.claimed, b.configs[-1])
                score = b.score + g
                if d == 1:
                    score -= obj.omega * float(np.sum((p[i] - pmap.target_point) ** 2))
                if mot_w and b.forces:
                    score -= mot_w * float(np.sum((grid[i] - b.forces[-1]) ** 2))
                cands.append((-score, len(cands), b, i, m, new, p[i], v[i]))
        if not cands:
            return None
        cands.sort(key=lambda c: (c[0], c[1]))
        beams = [_Beam(b.pos + [pi], b.vel + [vi], b.forces + [grid[i]], b.configs + [m],
                       b.claimed | new, -negs)
                 for negs, _, b, i, m, new, pi, vi in cands[:width]]
    best = beams[0]
    forces = best.forces + [np.zeros(3)]
    return _assemble(state, scenario, table, model, pmap, forces, best.configs, opened, triple, prev_config)


def _assemble(state, scenario, table, model, pmap, forces, configs, opened, triple, prev_config):
    kin = scenario.kin
    T = pmap.horizon
    x = np.zeros(model.n_vars)
    pos, vel = state.pos.copy(), state.vel.copy()
    traj = []
    for t in range(T):
        pos = pos + kin.dt * vel
        vel = (1 - kin.drag) * vel + kin.dt / kin.mass * forces[t]
        x[pmap.force[t]] = forces[t]
        x[pmap.pos[t]] = pos
        x[pmap.vel[t]] = vel
        traj.append(pos)
    if T == 1:
        x[pmap.dpos] = traj[0] + kin.dt * vel
    done = set()
    for t in range(T):
        cfg = configs[t]
        if cfg not in pmap.config[t]:
            return None
        x[pmap.config[t][cfg]] = 1.0
        cell = locate_cell(traj[t], scenario.env)
        if cell not in pmap.cell[t]:
            return None
        x[pmap.cell[t][cell]] = 1.0
    for k, cfg, t, bv, bbar, bhat in sorted(pmap.triples, key=lambda r: (r[2], r[0], r[1])):
        if not in_fov(scenario.mesh.centroids[k], cfg, traj[t], scenario.camera, 0.0)[0]:
            continue
        x[bv] = 1.0
        cell = locate_cell(traj[t], scenario.env)
        if configs[t] == cfg and table.bits[cell, k]:
            x[bbar] = 1.0
            if k not in done:
                x[bhat] = 1.0
                done.add(k)
    for (xi, t), entry in pmap.obstacle.items():
        free = [(i, b) for i, b in entry if b is not None]
        if not free:
            continue
        hull = scenario.obstacles.obstacles[xi]
        slack = [hull.normals[i] @ traj[t] - hull.offsets[i] for i, _ in free]
        keep = int(np.argmax(slack))
        for j, (_, b) in enumerate(free):
            x[b] = 0.0 if j == keep else 1.0
    for name_idx, name in enumerate(model.var_names):
        if name.startswith("dsp") or name.startswith("dsm"):
            t, cfg = (int(v) for v in name[3:].split("_"))
            cur = float(configs[t] == cfg)
            prev = float(prev_config == cfg) if t == 0 else float(configs[t - 1] == cfg)
            diff = cur - prev
            x[name_idx] = max(diff, 0.0) if name.startswith("dsp") else max(-diff, 0.0)
    return x


@dataclass
class PlanStep:
    t: int
    force: np.ndarray
    config: int
    state: AgentState  # realized state after the step
    predicted: np.ndarray  # (T, 3) planned positions
    covered: list[int]  # newly covered facets
    claimed: list[int]  # facets the plan credits at its first step
    objective: float
    solve_ms: float
    status: str
    nodes: int
    audit: list[str] = field(default_factory=list)
    duplicates: int = 0
    revisits: int = 0
    retrace_missing: list[int] = field(default_factory=list)
    goal_facet: int | None = None


@dataclass(frozen=True)
class PlannerConfig:
    solver: SolverConfig = SolverConfig(rel_gap=1e-4, abs_gap=1e-6, node_limit=20)
    bigm: BigMPolicy = BigMPolicy()
    strict: bool = False
    horizon: int | None = None
    seed: bool = True
    stall_steps: int = 6  # steps without new coverage before the goal facet is set aside (0 disables)


def _diagnose(state, memory, scenario, table, cfg: PlannerConfig, **kw) -> str:
    probe = SolverConfig(rel_gap=1.0, abs_gap=1e9, node_limit=200)
    for cause, opts in (("obstacle", {"use_obstacles": False}),
                        ("bounds", {"use_obstacles": False, "use_bounds": False})):
        try:
            model, _ = build_p2(state, memory, scenario, table, cfg.horizon, cfg.bigm, **kw, **opts)
        except PlanningError:
            continue
        if solve(model, probe).status != INFEASIBLE:
            return cause
    return "dynamics"


def realized_coverage(pos, config: int, scenario: Scenario, table: VisibilityTable,
                      facets) -> list[int]:
    """Facets among ``facets`` that pass the cell/FOV/table conjunction at ``pos``."""
    facets = np.asarray(list(facets), dtype=int)
    if len(facets) == 0 or not scenario.env.contains(pos):
        return []
    cell = locate_cell(pos, scenario.env)
    inside = in_fov(scenario.mesh.centroids[facets], config, pos, scenario.camera)
    return [int(k) for k in facets[inside & table.bits[cell, facets]]]


def plan_step(state: AgentState, memory: CoverageMemory, scenario: Scenario,
              table: VisibilityTable, t: int = 0, config: PlannerConfig = PlannerConfig(),
              prev_config: int | None = None, prev_force=None, skip_goal=()) -> PlanStep:
    """Solve one horizon, apply its first input and update ``memory``."""
    t0 = time.perf_counter()
    model, pmap = build_p2(state, memory, scenario, table, config.horizon, config.bigm,
                           prev_config, prev_force, skip_goal=skip_goal)
    seed = seed_plan(state, memory, scenario, table, model, pmap, prev_config, prev_force) \
        if config.seed else None
    sol = solve(model, config.solver, incumbent=seed)
    ms = (time.perf_counter() - t0) * 1e3
    if not sol.has_solution:
        if sol.status == INFEASIBLE:
            cause = _diagnose(state, memory, scenario, table, config, prev_config=prev_config,
                              prev_force=prev_force, skip_goal=skip_goal)
            raise PlanningError(f"controller infeasible ({cause})", cause)
        raise PlanningError(f"no feasible plan found ({sol.status})", "search")
    x = sol.x
    audit = audit_solution(x, pmap, scenario)
    force = np.clip(x[pmap.force[0]], -scenario.kin.force_bound, scenario.kin.force_bound)
    cfg = max(pmap.config[0], key=lambda c: (x[pmap.config[0][c]], -c))
    nxt = step(state, force, scenario.kin)
    claimed = sorted({k for k, _, tau, _, _, bhat in pmap.triples if tau == 0 and x[bhat] > 0.5})
    before = memory.covered.copy()
    seen = realized_coverage(nxt.pos, cfg, scenario, table, scenario.target_facets)
    new = memory.mark(seen, t + 1)
    missing = []
    if config.strict:
        traced = visible_facets(fov_pose(enumerate_configs(scenario.camera)[cfg], nxt.pos, scenario.camera),
                                scenario.mesh, scenario.camera.n_rays)
        missing = sorted(set(new) - traced)
    return PlanStep(t, force, cfg, nxt, x[pmap.pos], new, claimed, sol.objective, ms, sol.status,
                    sol.nodes, audit, duplicates=int(before[claimed].sum()) if claimed else 0,
                    revisits=int(sum(before[k] for k in seen)), retrace_missing=missing,
                    goal_facet=pmap.kappa_star)


@dataclass
class MissionLog:
    start: AgentState
    targets: tuple[int, ...]
    steps: list[PlanStep] = field(default_factory=list)
    memory: CoverageMemory | None = None
    uncoverable: list[int] = field(default_factory=list)
    collisions: int = 0

    @property
    def covered_targets(self) -> int:
        if self.memory is None:
            return 0
        return int(sum(self.memory.covered[k] for k in self.targets))

    @property
    def coverage_fraction(self) -> float:
        return 1.0 if not self.targets else self.covered_targets / len(self.targets)

    @property
    def positions(self) -> np.ndarray:
        return np.array([self.start.pos] + [s.state.pos for s in self.steps])

    @property
    def trajectory_length(self) -> float:
        p = self.positions
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0

    @property
    def duplication_count(self) -> int:
        return sum(s.duplicates for s in self.steps)

    @property
    def audit_violations(self) -> int:
        return sum(len(s.audit) for s in self.steps)

    @property
    def completion_steps(self) -> int:
        return len(self.steps)

    def summary(self) -> dict:
        return {
            "coverage_fraction": self.coverage_fraction,
            "steps": len(self.steps),
            "trajectory_length_m": self.trajectory_length,
            "duplication_count": self.duplication_count,
            "revisit_count": sum(s.revisits for s in self.steps),
            "collisions": self.collisions,
            "audit_violations": self.audit_violations,
            "uncoverable": list(self.uncoverable),
        }

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "px", "py", "pz", "vx", "vy", "vz", "fx", "fy", "fz", "config_index",
                    "covered_facets", "objective", "solve_ms"])
        w.writerow([0, *map(repr, map(float, self.start.pos)), *map(repr, map(float, self.start.vel)),
                    "", "", "", "", "", "", ""])
        for s in self.steps:
            w.writerow([s.t + 1, *map(repr, map(float, s.state.pos)), *map(repr, map(float, s.state.vel)),
                        *map(repr, map(float, s.force)), s.config, ";".join(map(str, s.covered)),
                        repr(float(s.objective)), f"{s.solve_ms:.3f}" if timing else ""])
        return buf.getvalue()

    def write(self, out_dir, timing: bool = True, prefix: str = "mission") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{prefix}.csv").write_text(self.to_csv(timing))
        (out / f"{prefix}_summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        (out / f"{prefix}_trajectory.xyz").write_text(
            "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in self.positions.tolist()))
        if self.memory is not None:
            rows = [f"{k} {int(self.memory.cover_time[k])}" for k in self.targets]
            (out / f"{prefix}_cover_time.dat").write_text("# facet cover_time\n" + "\n".join(rows) + "\n")


def uncoverable_facets(table: VisibilityTable, targets) -> list[int]:
    return [int(k) for k in targets if not table.bits[:, k].any()]


def run_mission(scenario: Scenario, table: VisibilityTable, config: PlannerConfig = PlannerConfig(),
                limit: int | None = None, on_step=None) -> MissionLog:
    targets = scenario.target_facets
    memory = CoverageMemory.empty(scenario.mesh.n_facets)
    log = MissionLog(scenario.start, targets, memory=memory,
                     uncoverable=uncoverable_facets(table, targets))
    state = scenario.start
    prev_cfg, prev_force = None, None
    limit = scenario.mission_limit if limit is None else limit
    skip: set[int] = set()
    idle = 0
    for t in range(limit):
        if not memory.uncovered(targets):
            break
        try:
            ps = plan_step(state, memory, scenario, table, t, config, prev_cfg, prev_force,
                           frozenset(skip))
        except PlanningError as exc:
            exc.log = log  # partial mission for reporting
            raise
        if scenario.obstacles.clearance(ps.state.pos) < config.bigm.eps_strict / 2:
            log.collisions += 1
        log.steps.append(ps)
        if on_step is not None:
            on_step(ps)
        # parked or cycling near a goal that yields nothing: pick another goal next time
        if ps.covered:
            skip.clear()
            idle = 0
        else:
            idle += 1
            if config.stall_steps and idle >= config.stall_steps and ps.goal_facet is not None:
                skip.add(ps.goal_facet)
                idle = 0
        state, prev_cfg, prev_force = ps.state, ps.config, ps.force
    return log
