"""CPLEX-style LP text export with stable ``x{i}`` names."""

from __future__ import annotations

import math

from .model import LinearModel

_REL = {"<=": "<=", ">=": ">=", "=": "="}


def _num(v: float) -> str:
    return repr(float(v))


def _expr(pairs) -> str:
    parts = []
    for j, c in pairs:
        if c == 0:
            continue
        sign = "-" if c < 0 else "+"
        mag = abs(c)
        term = f"x{j}" if mag == 1 else f"{_num(mag)} x{j}"
        parts.append(f"{sign} {term}")
    if not parts:
        return ""
    out = " ".join(parts)
    return out[2:] if out.startswith("+ ") else "-" + out[1:]


def _wrap(text: str, width: int = 240) -> list[str]:
    # LP readers cap line length; break between terms
    lines, cur = [], ""
    for tok in text.split(" "):
        if cur and len(cur) + 1 + len(tok) > width and tok in ("+", "-"):
            lines.append(cur)
            cur = "   " + tok
        else:
            cur = f"{cur} {tok}" if cur else tok
    if cur:
        lines.append(cur)
    return lines


def export_lp_format(model: LinearModel) -> str:
    """Render ``model`` as LP text. Output is byte-for-byte reproducible."""
    lines = ["\\ " + (model.name or "model"), "Maximize" if model.sense == "max" else "Minimize"]
    if model.n_vars == 0:
        return "\n".join(lines + [" obj:", "End", ""])
    c = model.objective_vector()
    obj = _expr((j, c[j]) for j in range(model.n_vars) if c[j] != 0)
    if model.obj_constant:
        const = _num(model.obj_constant)
        obj = f"{obj} + {const}" if model.obj_constant > 0 else f"{obj} - {_num(-model.obj_constant)}"
    body = _wrap(f"obj: {obj}" if obj else "obj: 0 x0")
    lines += [" " + ln for ln in body]
    lines.append("Subject To")
    for i, con in enumerate(model.constraints):
        expr = _expr(zip(con.index.tolist(), con.coef.tolist()))
        if not expr:
            expr = "0 x0"
        for ln in _wrap(f"c{i}: {expr} {_REL[con.relation]} {_num(con.rhs)}"):
            lines.append(" " + ln)
    lines.append("Bounds")
    lb, ub = model.lb, model.ub
    for j in range(model.n_vars):
        if j in model.integrality and lb[j] == 0 and ub[j] == 1:
            continue
        lo, hi = lb[j], ub[j]
        if math.isinf(lo) and lo < 0 and math.isinf(hi):
            lines.append(f" x{j} free")
        elif lo == hi:
            lines.append(f" x{j} = {_num(lo)}")
        else:
            left = "-inf" if math.isinf(lo) else _num(lo)
            right = "+inf" if math.isinf(hi) else _num(hi)
            lines.append(f" {left} <= x{j} <= {right}")
    if model.integrality:
        lines.append("Binaries")
        lines.append(" " + " ".join(f"x{j}" for j in sorted(model.integrality)))
    lines.append("End")
    return "\n".join(lines) + "\n"
