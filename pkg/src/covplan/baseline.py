"""Two-stage comparator: sample viewpoints, pick a greedy set cover, fly a
spline through it with a rolling-horizon tracking QP."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import cvxopt
import numpy as np
from scipy.interpolate import CubicSpline

from covplan.agent import AgentState, enumerate_configs, fov_pose, step
from covplan.planner import (CoverageMemory, MissionLog, PlanStep, realized_coverage,
                             uncoverable_facets)
from covplan.raytrace import VisibilityTable, visible_facets
from covplan.world import Scenario

EPS_CLEAR = 1e-3


class BaselineError(RuntimeError):
    pass


@dataclass(frozen=True)
class Viewpoint:
    position: np.ndarray
    config: int
    visible: frozenset  # facets credited from this pose (rows of the cover matrix)
    traced: frozenset = frozenset()  # ray-traced visible set


def _credited(pos, cfg, scenario, table, traced):
    if table is None:
        return frozenset(traced)
    return frozenset(traced) & frozenset(realized_coverage(pos, cfg, scenario, table, sorted(traced)))


def sample_viewpoints(scenario: Scenario, count: int, seed: int = 0,
                      table: VisibilityTable | None = None) -> list[Viewpoint]:
    """``count`` collision-free viewpoints at standoff ``[0.5 h, max(zoom) h]``
    from random points on the target facets, each with the config seeing the most targets
    (then the most facets overall, then the lowest index).  Positions from
    which no config sees a target are rejected.

    With a ``table`` the cover rows keep only facets that the executor would
    also credit at that pose; without one they are the traced sets."""
    if count < 1:
        raise ValueError("count must be >= 1")
    mesh = scenario.mesh
    if mesh.n_facets == 0:
        raise BaselineError("mesh has no facets")
    cam = scenario.camera
    configs = enumerate_configs(cam)
    lo_d, hi_d = 0.5 * cam.range, cam.max_range
    rng = np.random.default_rng([seed, 40])
    out: list[Viewpoint] = []
    tris = mesh.tris
    goal_list = list(scenario.target_facets) or list(range(mesh.n_facets))
    goal = frozenset(goal_list)
    for _ in range(100 * count):
        if len(out) == count:
            break
        k = goal_list[int(rng.integers(len(goal_list)))]
        a, b = rng.random(2)
        if a + b > 1:
            a, b = 1 - a, 1 - b
        surf = tris[k, 0] + a * (tris[k, 1] - tris[k, 0]) + b * (tris[k, 2] - tris[k, 0])
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if d @ mesh.normals[k] < 0:
            d = -d
        pos = surf + (lo_d + rng.random() * (hi_d - lo_d)) * d
        if not scenario.env.contains(pos) or scenario.obstacles.clearance(pos) < EPS_CLEAR:
            continue
        best, key = None, None
        for m, cfg in enumerate(configs):
            vis = frozenset(visible_facets(fov_pose(cfg, pos, cam), mesh, cam.n_rays))
            row = _credited(pos, m, scenario, table, vis)
            score = (len(row & goal), len(vis))
            if key is None or score > key:
                best, key = (m, row, vis), score
        if key[0] == 0:
            continue
        out.append(Viewpoint(pos, best[0], best[1], best[2]))
    if len(out) < count:
        raise BaselineError(f"placed only {len(out)} of {count} viewpoints")
    return out


def greedy_set_cover(viewpoints, targets) -> list[int]:
    """Indices of viewpoints chosen greedily until every target is covered."""
    left = set(int(k) for k in targets)
    sets = [set(v.visible) if hasattr(v, "visible") else set(v) for v in viewpoints]
    residue = left - set().union(*sets) if sets else left
    if residue:
        raise BaselineError(f"uncoverable targets: {sorted(residue)}")
    chosen: list[int] = []
    while left:
        gains = [len(s & left) for s in sets]
        j = int(np.argmax(gains))  # first maximum, i.e. lowest index
        chosen.append(j)
        left -= sets[j]
    return chosen


def segment_clear(a, b, obstacles, margin: float = 0.0) -> bool:
    """Whether segment ``ab`` misses every hull inflated by ``margin``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    d = b - a
    for h in obstacles:
        lo, hi = 0.0, 1.0
        num = h.offsets + margin - h.normals @ a
        den = h.normals @ d
        for n_, d_ in zip(num, den):
            if abs(d_) < 1e-12:
                if n_ < 0:
                    lo, hi = 1.0, 0.0
                    break
            elif d_ > 0:
                hi = min(hi, n_ / d_)
            else:
                lo = max(lo, n_ / d_)
            if lo > hi:
                break
        if lo <= hi:
            return False
    return True


_DIRS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                  if (i, j, k) != (0, 0, 0)], dtype=float)
_DIRS /= np.linalg.norm(_DIRS, axis=1)[:, None]


def detour(a, b, scenario: Scenario, margin: float = 1.0, depth: int = 3) -> list[np.ndarray]:
    """Intermediate points making ``a -> ... -> b`` clear of obstacles: the
    shortest single bend found by stepping out from the midpoint along the
    lattice directions across the segment, applied recursively."""
    obst = scenario.obstacles.obstacles
    if depth == 0 or segment_clear(a, b, obst, margin):
        return []
    env = scenario.env
    mid = 0.5 * (a + b)
    axis = (b - a) / max(np.linalg.norm(b - a), 1e-12)
    dirs = [d for d in _DIRS if abs(d @ axis) < 0.9]  # bends along the segment do not help
    best, best_len = None, np.inf
    for d in dirs:
        for r in np.arange(1.0, env.diameter, 1.0):
            c = mid + r * d
            if not env.contains(c):
                break
            if scenario.obstacles.clearance(c) >= margin and segment_clear(a, c, obst, margin) \
                    and segment_clear(c, b, obst, margin):
                ln = np.linalg.norm(c - a) + np.linalg.norm(b - c)
                if ln < best_len:
                    best, best_len = c, ln
                break
    if best is not None:
        return [best]
    # no single bend works: bend at the nearest clear point and recurse on both halves
    for d in dirs:
        for r in np.arange(1.0, env.diameter, 1.0):
            c = mid + r * d
            if not env.contains(c):
                break
            if scenario.obstacles.clearance(c) >= margin:
                ln = np.linalg.norm(c - a) + np.linalg.norm(b - c)
                if ln < best_len:
                    best, best_len = c, ln
                break
    if best is None:
        return []
    return detour(a, best, scenario, margin, depth - 1) + [best] + detour(best, b, scenario, margin, depth - 1)


@dataclass
class CoverPath:
    waypoints: np.ndarray  # densified, starting at the start position
    order: list[int]  # selected viewpoint indices in flight order
    length: float
    _spline: CubicSpline | None = field(default=None, repr=False)
    _u: np.ndarray | None = field(default=None, repr=False)
    _s: np.ndarray | None = field(default=None, repr=False)

    def at(self, s) -> np.ndarray:
        """Point at arc length ``s`` (clipped to the path)."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        if self._spline is None:
            return np.broadcast_to(self.waypoints[0], s.shape + (3,)).copy()
        return self._spline(np.interp(s, self._s, self._u))


def order_and_spline(selected, start, scenario: Scenario, samples: int = 200,
                     margin: float = 1.0) -> CoverPath:
    """Nearest-neighbour order from ``start``, bent around obstacles,
    densified so consecutive waypoints are at most ``dt * |v_max|`` apart,
    then a natural cubic spline reparameterized by arc length."""
    if len(selected) < 1:
        raise ValueError("need at least one viewpoint")
    pts = [np.asarray(v.position if hasattr(v, "position") else v, dtype=float) for v in selected]
    cur = np.asarray(start, dtype=float)
    left = list(range(len(pts)))
    order = []
    while left:
        d = [np.linalg.norm(pts[i] - cur) for i in left]
        i = left.pop(int(np.argmin(d)))
        order.append(i)
        cur = pts[i]
    kin = scenario.kin
    gap = kin.dt * kin.vel_bound * np.sqrt(3.0)
    seq = [np.asarray(start, dtype=float)]
    for i in order:
        seq += detour(seq[-1], pts[i], scenario, margin) + [pts[i]]
    way = [seq[0]]
    for p in seq[1:]:
        d = np.linalg.norm(p - way[-1])
        if d <= 1e-12:
            continue
        n = int(np.ceil(d / gap))
        for j in range(1, n + 1):
            way.append(way[-1] + (p - way[-1]) * (1.0 / (n - j + 1)))
    way = np.array(way)
    if len(way) < 2:
        return CoverPath(way, order, 0.0)
    chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(way, axis=0), axis=1))])
    spline = CubicSpline(chord, way, bc_type="natural")
    u = np.linspace(0.0, chord[-1], samples * (len(way) - 1) + 1)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(spline(u), axis=0), axis=1))])
    return CoverPath(way, order, float(s[-1]), spline, u, s)


def prediction_matrices(scenario: Scenario, horizon: int):
    """``(Phi, Gam)`` with stacked states ``x_1..x_H = Phi x_0 + Gam u``."""
    a, b = scenario.kin.matrices()
    phi = np.zeros((6 * horizon, 6))
    gam = np.zeros((6 * horizon, 3 * horizon))
    ak = np.eye(6)
    for k in range(horizon):
        ak = a @ ak
        phi[6 * k:6 * k + 6] = ak
        for j in range(k + 1):
            gam[6 * k:6 * k + 6, 3 * j:3 * j + 3] = np.linalg.matrix_power(a, k - j) @ b
    return phi, gam


def tracking_qp(state: AgentState, refs, scenario: Scenario, reg: float = 1e-6,
                avoid: bool = True):
    """Forces ``(H, 3)`` minimizing the summed squared distance of predicted
    positions ``p_1..p_H`` to ``refs`` under force, velocity and environment
    bounds, plus ``(cost, predicted positions)``.

    With ``avoid`` every obstacle contributes the half-space of the face the
    agent is currently furthest outside of; if that makes the problem
    infeasible it is dropped for this step."""
    refs = np.asarray(refs, dtype=float)
    H = len(refs)
    kin = scenario.kin
    phi, gam = prediction_matrices(scenario, H)
    free = phi @ state.as_vector()
    ip = np.concatenate([np.arange(6 * k, 6 * k + 3) for k in range(H)])
    iv = ip + 3
    gp, fp = gam[ip], free[ip]
    P = 2.0 * (gp.T @ gp + reg * np.eye(3 * H))
    q = 2.0 * gp.T @ (fp - refs.ravel())
    env = scenario.env
    rows, rhs = [np.eye(3 * H), -np.eye(3 * H)], [np.full(3 * H, kin.force_bound)] * 2
    rows += [gam[iv], -gam[iv]]
    rhs += [kin.vel_bound - free[iv], kin.vel_bound + free[iv]]
    # p_1 does not depend on the forces, so position bounds start at p_2
    sel = ip[3:]
    if len(sel):
        rows += [gam[sel], -gam[sel]]
        rhs += [np.tile(env.max_corner, H - 1) - free[sel], free[sel] - np.tile(env.min_corner, H - 1)]
    if avoid and len(sel):
        p1 = fp[:3]
        for hull in scenario.obstacles:
            f = int(np.argmax(hull.normals @ p1 - hull.offsets))
            a = hull.normals[f]
            blk = np.kron(np.eye(H - 1), a[None, :])
            # -a.p_k <= -(beta + eps)
            rows.append(-blk @ gam[sel])
            rhs.append(blk @ free[sel] - (hull.offsets[f] + EPS_CLEAR))
    G = np.vstack(rows)
    h = np.concatenate(rhs)
    opts = {"show_progress": False, "abstol": 1e-10, "reltol": 1e-10, "feastol": 1e-10}
    try:
        sol = cvxopt.solvers.qp(cvxopt.matrix(P), cvxopt.matrix(q), cvxopt.matrix(G), cvxopt.matrix(h),
                                options=opts)
    except ValueError:
        sol = {"status": "singular"}
    if sol["status"] != "optimal":
        if avoid and len(scenario.obstacles):
            return tracking_qp(state, refs, scenario, reg, avoid=False)
        raise BaselineError(f"tracking QP {sol['status']}")
    u = np.clip(np.array(sol["x"]).ravel(), -kin.force_bound, kin.force_bound)
    pred = (fp + gp @ u).reshape(H, 3)
    return u.reshape(H, 3), float(np.sum((pred - refs) ** 2)), pred


def _camera(pos, memory, scenario, table, targets):
    """Config crediting the most uncovered targets at ``pos`` (lowest index on ties)."""
    left = memory.uncovered(targets)
    best, best_new = 0, []
    for m in range(len(enumerate_configs(scenario.camera))):
        new = realized_coverage(pos, m, scenario, table, left)
        if len(new) > len(best_new):
            best, best_new = m, new
    return best, best_new


def track(path: CoverPath, x0: AgentState, scenario: Scenario, table: VisibilityTable,
          horizon: int = 5, speed: float | None = None, limit: int | None = None,
          end_tol: float = 1.0) -> MissionLog:
    """Follow ``path`` with the rolling tracking QP; the reference advances
    by the realized arc length each step and runs ``speed`` per step ahead."""
    kin = scenario.kin
    speed = 0.5 * kin.vel_bound * kin.dt if speed is None else speed
    limit = scenario.mission_limit if limit is None else limit
    targets = scenario.target_facets
    memory = CoverageMemory.empty(scenario.mesh.n_facets)
    log = MissionLog(x0, targets, memory=memory, uncoverable=uncoverable_facets(table, targets))
    state, s0 = x0, 0.0
    end = path.at(path.length)
    for t in range(limit):
        # consumed: the whole preview sits on the end point and the agent is there
        if s0 + speed * horizon >= path.length - 1e-9 and np.linalg.norm(state.pos - end) <= end_tol:
            break
        t0 = time.perf_counter()
        refs = path.at(s0 + speed * np.arange(1, horizon + 1))
        u, cost, pred = tracking_qp(state, refs, scenario)
        ms = (time.perf_counter() - t0) * 1e3
        nxt = step(state, u[0], kin)
        cfg, _ = _camera(nxt.pos, memory, scenario, table, targets)
        seen = realized_coverage(nxt.pos, cfg, scenario, table, targets)
        before = memory.covered.copy()
        new = memory.mark(seen, t + 1)
        s0 = min(path.length, s0 + float(np.linalg.norm(nxt.pos - state.pos)))
        if scenario.obstacles.clearance(nxt.pos) < EPS_CLEAR / 2:
            log.collisions += 1
        log.steps.append(PlanStep(t, u[0], cfg, nxt, pred, new, [], cost, ms, "track", 0,
                                  revisits=int(sum(before[k] for k in seen))))
        state = nxt
    return log


def run_baseline(scenario: Scenario, table: VisibilityTable, count: int = 200, seed: int | None = None,
                 horizon: int = 5) -> tuple[MissionLog, CoverPath]:
    seed = scenario.seed if seed is None else seed
    vps = sample_viewpoints(scenario, count, seed, table)
    chosen = greedy_set_cover(vps, scenario.target_facets)
    path = order_and_spline([vps[i] for i in chosen], scenario.start.pos, scenario)
    path.order = [chosen[i] for i in path.order]
    return track(path, scenario.start, scenario, table, horizon), path
