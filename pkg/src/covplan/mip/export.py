"""LP-format text export of a :class:`MipModel` for external solvers.

The dialect is the common CPLEX/Gurobi LP format restricted to linear rows, a
quadratic objective block ``[ ... ] / 2``, a ``Bounds`` section and a
``Binaries`` section.  The model objective ``x'Qx + c'x + k`` is written as
``c'x + k + [ 2 x'Qx ] / 2`` so coefficients survive the halving exactly.

Worked example (the knapsack ``min -3 b1 - 2 b2`` s.t. ``b1 + b2 <= 1``)::

    \\ covplan MIQP export
    \\ model: knapsack
    Minimize
     obj: - 3.0 b1 - 2.0 b2
    Subject To
     c0: + 1.0 b1 + 1.0 b2 <= 1.0
    Bounds
     0.0 <= b1 <= 1.0
     0.0 <= b2 <= 1.0
    Binaries
     b1 b2
    End

Any LP-format MIQP solver returns ``b1 = 1, b2 = 0`` with objective ``-3``.
"""
from __future__ import annotations

import re
from pathlib import Path

from covplan.mip.model import INF, MipModel

_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


def _num(v: float) -> str:
    if v == INF:
        return "inf"
    if v == -INF:
        return "-inf"
    return repr(float(v))


def _names(model: MipModel) -> list[str]:
    out, seen = [], set()
    for i, n in enumerate(model.var_names):
        if not _NAME.match(n) or n in seen or n.lower() in ("inf", "infinity", "free"):
            n = f"v{i}"
        seen.add(n)
        out.append(n)
    return out


def _linear(terms, names) -> str:
    parts = []
    for j, a in terms:
        if a == 0.0:
            continue
        sign = "-" if a < 0 else "+"
        parts.append(f"{sign} {_num(abs(a))} {names[j]}")
    return " ".join(parts)


def to_lp(model: MipModel) -> str:
    names = _names(model)
    lines = ["\\ covplan MIQP export", f"\\ model: {model.name}"]
    if model.n_vars == 0 and not model.constraints:
        lines += ["Minimize", f" obj: {_num(model.constant)}", "End"]
        return "\n".join(lines) + "\n"
    obj = _linear(sorted(model.c.items()), names)
    if model.constant:
        obj += f" {'-' if model.constant < 0 else '+'} {_num(abs(model.constant))}"
    quad = []
    for (i, j), v in sorted(model.q_terms.items()):
        sign = "-" if v < 0 else "+"
        term = f"{names[i]} ^ 2" if i == j else f"{names[i]} * {names[j]}"
        quad.append(f"{sign} {_num(abs(2.0 * v))} {term}")
    if quad:
        obj += " + [ " + " ".join(quad) + " ] / 2"
    lines += ["Minimize", f" obj: {obj.strip() or '0'}", "Subject To"]
    for con in model.constraints:
        body = _linear(zip(con.cols, con.vals), names) or f"0 {names[0]}"
        cname = con.name if _NAME.match(con.name) else f"c{len(lines)}"
        lines.append(f" {cname}: {body} {con.sense} {_num(con.rhs)}")
    lines.append("Bounds")
    for j in range(model.n_vars):
        lo, hi = model.lo[j], model.hi[j]
        if lo == -INF and hi == INF:
            lines.append(f" {names[j]} free")
        else:
            lines.append(f" {_num(lo)} <= {names[j]} <= {_num(hi)}")
    bins = [names[j] for j in range(model.n_vars) if model.is_binary[j]]
    lines.append("Binaries")
    for k in range(0, len(bins), 8):
        lines.append(" " + " ".join(bins[k:k + 8]))
    lines.append("End")
    return "\n".join(lines) + "\n"


def write_lp(model: MipModel, path) -> None:
    Path(path).write_text(to_lp(model))


def _parse_num(tok: str) -> float:
    t = tok.lower()
    if t in ("inf", "+inf", "infinity", "+infinity"):
        return INF
    if t in ("-inf", "-infinity"):
        return -INF
    return float(tok)


def _is_num(tok: str) -> bool:
    try:
        _parse_num(tok)
        return True
    except ValueError:
        return False


def _parse_expr(tokens):
    """``(linear {name: coef}, quad {(a, b): coef}, constant)`` of a
    whitespace-tokenized expression; the ``[ ... ] / 2`` block is halved."""
    lin: dict[str, float] = {}
    quad: dict[tuple[str, str], float] = {}
    const = 0.0
    sign, coef, in_quad, i = 1.0, None, False, 0
    while i < len(tokens):
        t = tokens[i]
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        if t in ("+", "-"):
            sign = 1.0 if t == "+" else -1.0
        elif t == "[":
            in_quad = True
        elif t == "]":
            in_quad = False
            if nxt == "/":
                div = _parse_num(tokens[i + 2])
                quad = {k: v / div for k, v in quad.items()}
                i += 2
        elif _is_num(t) and coef is None:
            if nxt is None or nxt in ("+", "-", "[", "]"):
                const += sign * _parse_num(t)
                sign = 1.0
            else:
                coef = _parse_num(t)
        else:
            a = sign * (1.0 if coef is None else coef)
            if in_quad and nxt == "^":
                quad[(t, t)] = quad.get((t, t), 0.0) + a
                i += 2
            elif in_quad and nxt == "*":
                u = tokens[i + 2]
                quad[(t, u)] = quad.get((t, u), 0.0) + a
                i += 2
            else:
                lin[t] = lin.get(t, 0.0) + a
            sign, coef = 1.0, None
        i += 1
    return lin, quad, const


def from_lp(text: str) -> MipModel:
    """Read back the dialect written by :func:`to_lp`.  Variable ids follow
    the order of the ``Bounds`` section."""
    sections: dict[str | None, list[str]] = {}
    cur = None
    name = "model"
    for raw in text.splitlines():
        line = raw.strip()
        if line.startswith("\\"):
            if line.startswith("\\ model:"):
                name = line.split(":", 1)[1].strip()
            continue
        if not line:
            continue
        key = line.lower()
        if key in ("minimize", "subject to", "bounds", "binaries", "end"):
            cur = key
            sections.setdefault(cur, [])
            continue
        sections.setdefault(cur, []).append(line)
    bins = {t for line in sections.get("binaries", []) for t in line.split()}
    m = MipModel(name=name)
    ids: dict[str, int] = {}
    for line in sections.get("bounds", []):
        toks = line.split()
        if toks[-1] == "free":
            n, lo, hi = toks[0], -INF, INF
        else:
            n, lo, hi = toks[2], _parse_num(toks[0]), _parse_num(toks[4])
        ids[n] = m.add_binary(name=n) if n in bins else m.add_continuous(lo, hi, name=n)
    for line in sections.get("subject to", []):
        cname, body = line.split(":", 1)
        toks = body.split()
        k = next(i for i, t in enumerate(toks) if t in ("<=", ">=", "="))
        lin, _, const = _parse_expr(toks[:k])
        m.add_linear_constraint({ids[v]: a for v, a in lin.items()}, toks[k],
                                _parse_num(toks[k + 1]) - const, name=cname.strip())
    obj = " ".join(sections.get("minimize", []))
    lin, quad, const = _parse_expr(obj.split(":", 1)[1].split() if ":" in obj else obj.split())
    m.set_objective({(ids[a], ids[b]): v for (a, b), v in quad.items()},
                    {ids[v]: a for v, a in lin.items() if v not in bins},
                    {ids[v]: a for v, a in lin.items() if v in bins}, const, check=False)
    return m
