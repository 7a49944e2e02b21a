"""Best-first branch and bound over convex QP relaxations."""
from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from covplan.mip.model import MipModel
from covplan.mip.relax import Relaxation

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
GAP_LIMIT = "gap_limit"
TIME_LIMIT = "time_limit"
NODE_LIMIT = "node_limit"


@dataclass(frozen=True)
class SolverConfig:
    feas_tol: float = 1e-6
    int_tol: float = 1e-6
    rel_gap: float = 1e-6
    abs_gap: float = 1e-9
    kkt_tol: float = 1e-8
    time_limit: float | None = None
    node_limit: int | None = None
    dive: bool = True

    def __post_init__(self):
        if min(self.feas_tol, self.int_tol, self.rel_gap, self.abs_gap, self.kkt_tol) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class Solution:
    status: str
    objective: float
    x: np.ndarray
    bound: float
    gap: float
    nodes: int = 0
    relaxations: int = 0
    seconds: float = 0.0
    bound_trace: list[tuple[float, float]] = field(default_factory=list, repr=False)

    @property
    def has_solution(self) -> bool:
        return self.x is not None and self.status != INFEASIBLE

    def value(self, j: int) -> float:
        return float(self.x[j])


class _Search:
    def __init__(self, model: MipModel, cfg: SolverConfig):
        self.model = model
        self.cfg = cfg
        self.relax = Relaxation(model, cfg.kkt_tol)
        self.binaries = np.flatnonzero(model.is_binary)
        self.prio = np.array(model.priority, dtype=float)[self.binaries]
        self.lo0 = np.array(model.lo, dtype=float)
        self.hi0 = np.array(model.hi, dtype=float)
        self.best_obj = math.inf
        self.best_x: np.ndarray | None = None

    def bounds(self, fixes: dict[int, float]):
        lo = self.lo0.copy()
        hi = self.hi0.copy()
        for j, v in fixes.items():
            lo[j] = hi[j] = v
        return lo, hi

    def fractional(self, x: np.ndarray) -> int | None:
        if len(self.binaries) == 0:
            return None
        xb = x[self.binaries]
        frac = np.abs(xb - np.round(xb))
        cand = frac > self.cfg.int_tol
        if not cand.any():
            return None
        top = self.prio[cand].max()
        pick = cand & (self.prio == top)
        # most fractional, ties to the lowest variable id
        score = np.where(pick, frac, -1.0)
        return int(self.binaries[int(np.argmax(score))])

    def unfixed(self, fixes: dict[int, float]) -> int | None:
        """Highest-priority binary still free at a node, lowest id first."""
        free = [k for k, j in enumerate(self.binaries)
                if j not in fixes and self.lo0[j] < self.hi0[j]]
        if not free:
            return None
        top = max(self.prio[k] for k in free)
        return int(self.binaries[next(k for k in free if self.prio[k] == top)])

    def polish(self, x: np.ndarray, fixes: dict[int, float]):
        """Snap binaries to 0/1 and solve the remaining continuous QP exactly."""
        allfix = dict(fixes)
        allfix.update(zip(self.binaries.tolist(), np.round(x[self.binaries]).tolist()))
        lo, hi = self.bounds(allfix)
        got = self.relax.solve_fixed(lo, hi, self.cfg.feas_tol)
        if got is None:
            return None
        obj, xs = got
        xs = xs.copy()
        xs[self.binaries] = lo[self.binaries]
        return self.model.objective_value(xs), xs

    def offer(self, obj: float, x: np.ndarray) -> None:
        if obj < self.best_obj:
            self.best_obj = obj
            self.best_x = x

    def tol(self) -> float:
        return max(self.cfg.abs_gap, self.cfg.rel_gap * abs(self.best_obj))

    def dive(self, x: np.ndarray, fixes: dict[int, float], budget: int) -> None:
        """Round-and-resolve dive from a relaxation point to seed an incumbent."""
        fixes = dict(fixes)
        for _ in range(budget):
            j = self.fractional(x)
            if j is None:
                got = self.polish(x, fixes)
                if got is not None:
                    self.offer(*got)
                return
            fixes[j] = float(round(x[j]))
            res = self.relax.solve(*self.bounds(fixes), rounds=5)
            if res is None:
                fixes[j] = 1.0 - fixes[j]
                res = self.relax.solve(*self.bounds(fixes), rounds=5)
                if res is None:
                    return
            if res.bound >= self.best_obj - self.tol():
                return
            x = res.x


def solve(model: MipModel, config: SolverConfig | None = None,
          incumbent: np.ndarray | None = None) -> Solution:
    """Minimize ``model``.  ``incumbent`` optionally seeds a known feasible
    point, which is verified before use."""
    cfg = config or SolverConfig()
    t0 = time.perf_counter()
    s = _Search(model, cfg)
    if incumbent is not None:
        incumbent = np.asarray(incumbent, dtype=float)
        viol = model.violations(incumbent, cfg.int_tol)
        if max(viol.values()) <= cfg.feas_tol:
            s.offer(model.objective_value(incumbent), incumbent)
            # re-optimize the continuous part under the seed's binaries
            got = s.polish(incumbent, {})
            if got is not None and max(model.violations(got[1], cfg.int_tol).values()) <= cfg.feas_tol:
                s.offer(*got)

    counter = itertools.count()
    heap: list = []
    root = s.relax.solve(s.lo0, s.hi0)
    nodes = 1
    trace: list[tuple[float, float]] = []
    if root is None:
        return Solution(INFEASIBLE, math.inf, None, math.inf, math.inf, nodes,
                        s.relax.solves, time.perf_counter() - t0)
    heapq.heappush(heap, (root.bound, 0, next(counter), {}, root))
    dived = not cfg.dive
    status = OPTIMAL
    while heap:
        bound = heap[0][0]
        if bound >= s.best_obj - s.tol():
            heap.clear()
            break
        # weak duality: the best open bound never exceeds the incumbent
        assert bound <= s.best_obj
        trace.append((bound, s.best_obj))
        if cfg.time_limit is not None and time.perf_counter() - t0 > cfg.time_limit:
            status = TIME_LIMIT
            break
        if cfg.node_limit is not None and nodes >= cfg.node_limit:
            status = NODE_LIMIT
            break
        pbound, negdepth, _, fixes, res = heapq.heappop(heap)
        if res is None:
            res = s.relax.solve(*s.bounds(fixes))
            nodes += 1
            if res is None:
                continue
        if res.bound >= s.best_obj - s.tol():
            continue
        j = s.fractional(res.x)
        if j is None:
            got = s.polish(res.x, fixes)
            if got is not None:
                s.offer(*got)
                if got[0] <= res.bound + s.tol():
                    continue
            # the binaries are integral but the node is not closed; keep branching
            j = s.unfixed(fixes)
            if j is None:
                continue
        if not dived:
            dived = True
            s.dive(res.x, fixes, budget=len(s.binaries) + 1)
            if res.bound >= s.best_obj - s.tol():
                continue
        # children inherit the parent bound and are solved when popped;
        # the side x[j] rounds to is explored first among equal bounds
        near = float(min(1.0, max(0.0, round(res.x[j]))))
        for v, order in ((near, 0), (1.0 - near, 1)):
            child = dict(fixes)
            child[j] = v
            heapq.heappush(heap, (max(pbound, res.bound), negdepth - 1,
                                  next(counter) * 2 + order, child, None))

    open_bound = heap[0][0] if heap else s.best_obj
    bound = min(open_bound, s.best_obj)
    seconds = time.perf_counter() - t0
    if s.best_x is None:
        if status == OPTIMAL:
            return Solution(INFEASIBLE, math.inf, None, math.inf, math.inf, nodes,
                            s.relax.solves, seconds, trace)
        return Solution(status, math.inf, None, bound, math.inf, nodes, s.relax.solves, seconds, trace)
    gap = max(0.0, s.best_obj - bound)
    if status == OPTIMAL and gap > max(cfg.rel_gap * abs(s.best_obj), cfg.abs_gap):
        status = GAP_LIMIT
    return Solution(status, s.best_obj, s.best_x, bound, gap, nodes, s.relax.solves, seconds, trace)
