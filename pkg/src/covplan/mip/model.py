"""Solver-agnostic mixed-integer convex QP container.

Objective convention: ``x' Q x + c' x + constant`` (no 1/2 factor) over one
shared index space of continuous and binary variables.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

INF = np.inf
SENSES = ("<=", "=", ">=")


class ModelError(ValueError):
    pass


@dataclass
class Constraint:
    cols: list[int]
    vals: list[float]
    sense: str
    rhs: float
    name: str

    @property
    def bounds(self) -> tuple[float, float]:
        if self.sense == "<=":
            return -INF, self.rhs
        if self.sense == ">=":
            return self.rhs, INF
        return self.rhs, self.rhs


@dataclass
class MipModel:
    name: str = "model"
    lo: list[float] = field(default_factory=list)
    hi: list[float] = field(default_factory=list)
    is_binary: list[bool] = field(default_factory=list)
    priority: list[int] = field(default_factory=list)
    var_names: list[str] = field(default_factory=list)
    constraints: list[Constraint] = field(default_factory=list)
    q_terms: dict[tuple[int, int], float] = field(default_factory=dict)
    c: dict[int, float] = field(default_factory=dict)
    constant: float = 0.0

    @property
    def n_vars(self) -> int:
        return len(self.lo)

    @property
    def n_binaries(self) -> int:
        return sum(self.is_binary)

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    def add_continuous(self, lo: float = -INF, hi: float = INF, name: str | None = None) -> int:
        lo, hi = float(lo), float(hi)
        if np.isnan(lo) or np.isnan(hi) or lo > hi:
            raise ModelError(f"bad bounds [{lo}, {hi}]")
        return self._add(lo, hi, False, 0, name)

    def add_binary(self, name: str | None = None, priority: int = 0) -> int:
        return self._add(0.0, 1.0, True, priority, name)

    def _add(self, lo, hi, binary, priority, name) -> int:
        idx = len(self.lo)
        self.lo.append(lo)
        self.hi.append(hi)
        self.is_binary.append(binary)
        self.priority.append(int(priority))
        self.var_names.append(name or f"{'b' if binary else 'x'}{idx}")
        return idx

    def add_linear_constraint(self, terms, sense: str, rhs: float, name: str | None = None) -> int:
        if sense not in SENSES:
            raise ModelError(f"unknown sense {sense!r}")
        items = terms.items() if isinstance(terms, Mapping) else terms
        merged: dict[int, float] = {}
        for j, a in items:
            j = int(j)
            if not 0 <= j < self.n_vars:
                raise ModelError(f"constraint references undeclared variable {j}")
            merged[j] = merged.get(j, 0.0) + float(a)
        self.constraints.append(Constraint(list(merged), list(merged.values()), sense,
                                           float(rhs), name or f"c{len(self.constraints)}"))
        return len(self.constraints) - 1

    def set_objective(self, Q=None, c_cont: Mapping[int, float] | None = None,
                      c_bin: Mapping[int, float] | None = None, constant: float = 0.0,
                      check: bool = True) -> None:
        """Replace the objective.  ``Q`` is a ``{(i, j): value}`` mapping, a dense
        or sparse matrix over all variables, or ``None``; it is symmetrized."""
        q: dict[tuple[int, int], float] = {}
        if Q is not None:
            if isinstance(Q, Mapping):
                entries: Iterable = Q.items()
            else:
                m = sp.coo_matrix(Q)
                entries = (((int(i), int(j)), float(v)) for i, j, v in zip(m.row, m.col, m.data))
            for (i, j), v in entries:
                if not (0 <= i < self.n_vars and 0 <= j < self.n_vars):
                    raise ModelError("objective references undeclared variable")
                a, b = min(i, j), max(i, j)
                q[(a, b)] = q.get((a, b), 0.0) + float(v)
        c: dict[int, float] = {}
        for part, want_bin in ((c_cont, False), (c_bin, True)):
            for j, v in (part or {}).items():
                if not 0 <= j < self.n_vars:
                    raise ModelError("objective references undeclared variable")
                if self.is_binary[j] != want_bin:
                    kind = "binary" if want_bin else "continuous"
                    raise ModelError(f"variable {j} is not {kind}")
                c[int(j)] = c.get(int(j), 0.0) + float(v)
        self.q_terms = {k: v for k, v in q.items() if v != 0.0}
        self.c = c
        self.constant = float(constant)
        if check:
            check_psd(self.q_matrix())

    # compiled views -------------------------------------------------------
    def q_matrix(self) -> sp.csc_matrix:
        """Symmetric ``Q`` with ``x' Q x`` equal to the objective's quadratic part."""
        n = self.n_vars
        if not self.q_terms:
            return sp.csc_matrix((n, n))
        rows, cols, vals = [], [], []
        for (i, j), v in self.q_terms.items():
            if i == j:
                rows.append(i), cols.append(j), vals.append(v)
            else:
                rows += [i, j]
                cols += [j, i]
                vals += [v / 2.0, v / 2.0]
        return sp.csc_matrix((vals, (rows, cols)), shape=(n, n))

    def c_vector(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for j, v in self.c.items():
            c[j] += v
        return c

    def a_matrix(self) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for r, con in enumerate(self.constraints):
            rows += [r] * len(con.cols)
            cols += con.cols
            vals += con.vals
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_constraints, self.n_vars))

    def row_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        b = np.array([con.bounds for con in self.constraints], dtype=float).reshape(-1, 2)
        return b[:, 0], b[:, 1]

    def objective_value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ (self.q_matrix() @ x) + self.c_vector() @ x + self.constant)

    def violations(self, x, int_tol: float = 1e-6) -> dict[str, float]:
        """Largest constraint, bound and integrality violations of ``x``."""
        x = np.asarray(x, dtype=float)
        out = {"rows": 0.0, "bounds": 0.0, "integrality": 0.0}
        if self.n_constraints:
            ax = self.a_matrix() @ x
            rl, ru = self.row_bounds()
            out["rows"] = float(max(0.0, np.max(rl - ax), np.max(ax - ru)))
        if self.n_vars:
            lo, hi = np.array(self.lo), np.array(self.hi)
            out["bounds"] = float(max(0.0, np.max(lo - x), np.max(x - hi)))
            b = np.array(self.is_binary)
            if b.any():
                out["integrality"] = float(np.max(np.abs(x[b] - np.round(x[b]))))
        return out


def check_psd(q: sp.spmatrix, tol: float = 1e-9) -> None:
    """Reject ``Q`` unless a Cholesky factorization of its (slightly shifted)
    nonzero block succeeds."""
    q = sp.csc_matrix(q)
    used = np.unique(np.concatenate([q.nonzero()[0], q.nonzero()[1]]))
    if len(used) == 0:
        return
    block = q[used][:, used].toarray()
    scale = max(1.0, float(np.abs(block).max()))
    try:
        np.linalg.cholesky(block + tol * scale * np.eye(len(used)))
    except np.linalg.LinAlgError:
        raise ModelError("nonconvex objective rejected") from None
