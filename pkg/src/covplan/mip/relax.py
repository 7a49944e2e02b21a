"""Continuous relaxations for branch and bound.

Node relaxations are linear programs solved by warm-started dual simplex
(HiGHS).  The convex quadratic ``x'Qx`` is split along the eigenvectors of
``Q`` into a sum of squares ``y_j^2`` and each square is replaced by an
epigraph variable bounded below by tangent cuts.  Cuts are valid everywhere,
so every LP value is a lower bound on the node's QP value; they are kept in
one shared pool for the whole search.

Once all binaries are fixed the remaining convex QP is solved exactly with
cvxopt's interior-point method.
"""
from __future__ import annotations

from dataclasses import dataclass

import cvxopt
import highspy
import numpy as np
import scipy.sparse as sp

from covplan.mip.model import MipModel

cvxopt.solvers.options["show_progress"] = False

_HINF = highspy.kHighsInf


class RelaxationError(RuntimeError):
    pass


def _hinf(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a[np.isposinf(a)] = _HINF
    a[np.isneginf(a)] = -_HINF
    return a


@dataclass
class NodeRelaxation:
    bound: float  # valid lower bound on the node optimum
    x: np.ndarray  # model columns of the LP point
    converged: bool  # outer approximation tight to tolerance


def square_factors(q: sp.spmatrix, rel_tol: float = 1e-12):
    """``(cols, W)`` with ``x'Qx = sum_j (W[j] @ x[cols])^2``."""
    q = sp.csc_matrix(q)
    cols = np.unique(np.concatenate([q.nonzero()[0], q.nonzero()[1]])).astype(int)
    if len(cols) == 0:
        return cols, np.zeros((0, 0))
    block = q[cols][:, cols].toarray()
    lam, vec = np.linalg.eigh(0.5 * (block + block.T))
    keep = lam > rel_tol * max(1.0, float(np.abs(lam).max()))
    return cols, (np.sqrt(lam[keep])[:, None] * vec[:, keep].T)


class Relaxation:
    def __init__(self, model: MipModel, tol: float = 1e-8, max_rounds: int = 200):
        self.model = model
        self.n = n = model.n_vars
        self.tol = tol
        self.max_rounds = max_rounds
        self.constant = model.constant
        self.solves = 0
        self.lp_runs = 0
        self.qp_solves = 0
        self.Q = model.q_matrix()
        self.c = model.c_vector()
        self.A = sp.csr_matrix(model.a_matrix())
        self.rl, self.ru = model.row_bounds()
        self.lo0 = np.array(model.lo, dtype=float)
        self.hi0 = np.array(model.hi, dtype=float)
        if n == 0:
            return
        self.sq_cols, self.W = square_factors(self.Q)
        self.r = r = self.W.shape[0]
        # columns: x (n), y (r), eta (r)
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("threads", 1)
        h.setOptionValue("presolve", "off")
        h.setOptionValue("primal_feasibility_tolerance", 1e-9)
        h.setOptionValue("dual_feasibility_tolerance", 1e-9)
        lp = highspy.HighsLp()
        lp.num_col_ = n + 2 * r
        cost = np.concatenate([self.c, np.zeros(r), np.ones(r)])
        lp.col_cost_ = cost
        lp.col_lower_ = _hinf(np.concatenate([self.lo0, np.full(r, -np.inf), np.zeros(r)]))
        lp.col_upper_ = _hinf(np.concatenate([self.hi0, np.full(2 * r, np.inf)]))
        # y_j - W_j x = 0
        link = sp.lil_matrix((r, n + 2 * r))
        for j in range(r):
            for k, col in enumerate(self.sq_cols):
                if self.W[j, k] != 0.0:
                    link[j, col] = -self.W[j, k]
            link[j, n + j] = 1.0
        big = sp.vstack([sp.hstack([self.A, sp.csr_matrix((self.A.shape[0], 2 * r))]), link.tocsr()]).tocsc()
        big.sort_indices()
        lp.num_row_ = big.shape[0]
        lp.row_lower_ = _hinf(np.concatenate([self.rl, np.zeros(r)]))
        lp.row_upper_ = _hinf(np.concatenate([self.ru, np.zeros(r)]))
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.num_col_ = lp.num_col_
        lp.a_matrix_.num_row_ = lp.num_row_
        lp.a_matrix_.start_ = big.indptr
        lp.a_matrix_.index_ = big.indices
        lp.a_matrix_.value_ = big.data
        h.passModel(lp)
        self.h = h
        self._xcols = np.arange(n, dtype=np.int32)
        self._cut_at: list[list[float]] = [[] for _ in range(r)]

    def _add_cut(self, j: int, a: float) -> None:
        # eta_j >= 2 a y_j - a^2
        pts = self._cut_at[j]
        if any(abs(a - b) <= 1e-12 * max(1.0, abs(a)) for b in pts):
            return
        pts.append(a)
        n = self.n
        self.h.addRow(-a * a, _HINF, 2, np.array([n + j, n + self.r + j], dtype=np.int32),
                      np.array([-2.0 * a, 1.0]))

    def _run(self):
        self.lp_runs += 1
        self.h.run()
        st = self.h.getModelStatus()
        if st == highspy.HighsModelStatus.kOptimal:
            return True
        if st == highspy.HighsModelStatus.kInfeasible:
            return False
        # retry from scratch once before giving up
        self.h.clearSolver()
        self.h.run()
        st = self.h.getModelStatus()
        if st == highspy.HighsModelStatus.kOptimal:
            return True
        if st == highspy.HighsModelStatus.kInfeasible:
            return False
        raise RelaxationError(f"LP relaxation failed: {self.h.modelStatusToString(st)}")

    def solve(self, lo: np.ndarray, hi: np.ndarray, rounds: int | None = None) -> NodeRelaxation | None:
        """Outer-approximation LP bound under column bounds ``[lo, hi]``, or
        ``None`` when the node is infeasible."""
        self.solves += 1
        if self.n == 0:
            return NodeRelaxation(self.constant, np.zeros(0), True)
        if np.any(lo > hi):
            return None
        self.h.changeColsBounds(self.n, self._xcols, _hinf(lo), _hinf(hi))
        rounds = self.max_rounds if rounds is None else rounds
        converged = False
        for _ in range(max(1, rounds)):
            if not self._run():
                return None
            sol = np.array(self.h.getSolution().col_value)
            bound = self.h.getInfo().objective_function_value + self.constant
            y = sol[self.n:self.n + self.r]
            eta = sol[self.n + self.r:]
            gap = y * y - eta
            if self.r == 0 or gap.sum() <= self.tol * max(1.0, abs(bound)):
                converged = True
                break
            for j in np.flatnonzero(gap > 0.1 * self.tol * max(1.0, abs(bound)) / max(1, self.r)):
                self._add_cut(int(j), float(y[j]))
        x = np.clip(sol[:self.n], lo, hi)
        return NodeRelaxation(bound, x, converged)

    def objective(self, x) -> float:
        return float(x @ (self.Q @ x) + self.c @ x + self.constant)

    def max_violation(self, x, lo, hi) -> float:
        v = max(0.0, float(np.max(lo - x, initial=0.0)), float(np.max(x - hi, initial=0.0)))
        if self.A.shape[0]:
            ax = self.A @ x
            v = max(v, float(np.max(self.rl - ax)), float(np.max(ax - self.ru)))
        return v

    def solve_fixed(self, lo: np.ndarray, hi: np.ndarray, feas_tol: float = 1e-6):
        """Exact continuous QP once the binaries are fixed: ``(objective, x)``
        or ``None`` if infeasible."""
        self.qp_solves += 1
        if self.n == 0:
            return self.constant, np.zeros(0)
        free = lo < hi
        x0 = np.where(free, 0.0, lo)
        shift = self.A @ x0
        A_free = self.A[:, free].tocsr()
        touches = np.diff(A_free.indptr) > 0
        # rows without free columns are checked directly
        if np.any(self.rl[~touches] - shift[~touches] > feas_tol) or \
                np.any(shift[~touches] - self.ru[~touches] > feas_tol):
            return None
        if not free.any():
            return self.objective(x0), x0
        rl = self.rl[touches] - shift[touches]
        ru = self.ru[touches] - shift[touches]
        Af = A_free[touches]
        nf = int(free.sum())
        Qfull = sp.csc_matrix(self.Q)
        P = 2.0 * Qfull[free][:, free]
        q = self.c[free] + 2.0 * (Qfull[free][:, ~free] @ lo[~free] if (~free).any() else 0.0)
        eq = np.abs(ru - rl) <= 1e-12
        gu = ~eq & np.isfinite(ru)
        gl = ~eq & np.isfinite(rl)
        eye = sp.eye(nf, format="csr")
        lf, hf = lo[free], hi[free]
        g_rows = [Af[gu], -Af[gl], eye[np.isfinite(hf)], -eye[np.isfinite(lf)]]
        g_rhs = [ru[gu], -rl[gl], hf[np.isfinite(hf)], -lf[np.isfinite(lf)]]
        G = sp.vstack(g_rows).tocoo()
        h = np.concatenate(g_rhs)
        Ae = Af[eq].tocoo()
        be = rl[eq]

        def spm(m):
            m = sp.coo_matrix(m)
            return cvxopt.spmatrix(m.data.tolist(), m.row.tolist(), m.col.tolist(), m.shape)

        args = [spm(P + 1e-13 * sp.eye(nf)), cvxopt.matrix(q), spm(G), cvxopt.matrix(h)]
        if Ae.shape[0]:
            # cvxopt needs full row rank
            dense = Ae.toarray()
            keep = _independent_rows(dense)
            if len(keep) < len(dense):
                sol = np.linalg.lstsq(dense[keep], be[keep], rcond=None)[0]
                if np.max(np.abs(dense @ sol - be)) > feas_tol:
                    return None
            args += [spm(dense[keep]), cvxopt.matrix(be[keep])]
        opts = {"show_progress": False, "abstol": 1e-11, "reltol": 1e-11, "feastol": 1e-10,
                "maxiters": 300}
        try:
            sol = cvxopt.solvers.qp(*args, options=opts)
        except (ValueError, ArithmeticError):
            sol = None
        if sol is not None and sol["x"] is not None and sol["status"] in ("optimal", "unknown"):
            x = x0.copy()
            x[free] = np.array(sol["x"]).ravel()
            x = np.clip(x, lo, hi)
            if self.max_violation(x, lo, hi) <= feas_tol:
                return self.objective(x), x
        # fall back to the LP machinery: tighten the outer approximation hard
        res = self.solve(lo, hi, rounds=1000)
        if res is None:
            return None
        if not res.converged or self.max_violation(res.x, lo, hi) > feas_tol:
            raise RelaxationError("fixed QP could not be solved to tolerance")
        return self.objective(res.x), res.x


def _independent_rows(a: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    keep: list[int] = []
    basis = np.zeros((0, a.shape[1]))
    for i, row in enumerate(a):
        resid = row - (basis.T @ (basis @ row) if len(basis) else 0.0)
        nrm = np.linalg.norm(resid)
        if nrm > tol * max(1.0, np.linalg.norm(row)):
            keep.append(i)
            basis = np.vstack([basis, resid / nrm])
    return np.array(keep, dtype=int)
