"""Network data, admittance/PTDF matrices and case file I/O.

All user-facing powers are in MW. Susceptances are per unit on ``base_mva``.
Bus indices are 0-based positions; MATPOWER bus numbers are remapped in file
order.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FORMAT_KEYS = ("buses", "lines", "generators", "loads", "slack_bus", "base_mva")


class CaseError(ValueError):
    """Malformed case text."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class UnsupportedFeatureError(CaseError):
    pass


class CaseValidationError(CaseError):
    pass


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    susceptance: float
    flow_limit: float


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    cost: float


@dataclass(frozen=True)
class Load:
    bus: int
    p_max: float


@dataclass(frozen=True)
class GridCase:
    n_buses: int
    lines: tuple[Line, ...]
    gens: tuple[Generator, ...]
    loads: tuple[Load, ...]
    slack_bus: int
    base_mva: float = 100.0
    name: str = "case"

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "gens", tuple(self.gens))
        object.__setattr__(self, "loads", tuple(self.loads))
        validate(self)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_gens(self) -> int:
        return len(self.gens)

    @property
    def n_loads(self) -> int:
        return len(self.loads)

    @cached_property
    def slack_gen(self) -> int:
        """Index of the generator that absorbs the prediction imbalance."""
        return next(g for g, gen in enumerate(self.gens) if gen.bus == self.slack_bus)

    @cached_property
    def nonslack_gens(self) -> np.ndarray:
        return np.array([g for g in range(self.n_gens) if g != self.slack_gen], dtype=int)

    @cached_property
    def nonslack_buses(self) -> np.ndarray:
        return np.array([b for b in range(self.n_buses) if b != self.slack_bus], dtype=int)

    @cached_property
    def p_min(self) -> np.ndarray:
        return np.array([g.p_min for g in self.gens])

    @cached_property
    def p_max(self) -> np.ndarray:
        return np.array([g.p_max for g in self.gens])

    @cached_property
    def cost(self) -> np.ndarray:
        return np.array([g.cost for g in self.gens])

    @cached_property
    def load_max(self) -> np.ndarray:
        return np.array([d.p_max for d in self.loads])

    @cached_property
    def flow_limit(self) -> np.ndarray:
        return np.array([ln.flow_limit for ln in self.lines])

    @cached_property
    def maps(self) -> "IncidenceMaps":
        gen_map = np.zeros((self.n_buses, self.n_gens))
        gen_map[[g.bus for g in self.gens], np.arange(self.n_gens)] = 1.0
        load_map = np.zeros((self.n_buses, self.n_loads))
        load_map[[d.bus for d in self.loads], np.arange(self.n_loads)] = 1.0
        return IncidenceMaps(gen_map, load_map)

    @cached_property
    def admittance(self) -> "AdmittanceSet":
        return build_admittance(self)


@dataclass(frozen=True)
class IncidenceMaps:
    gen_map: np.ndarray
    load_map: np.ndarray


@dataclass(frozen=True)
class AdmittanceSet:
    b_bus: np.ndarray
    b_line: np.ndarray
    ptdf: np.ndarray
    slack_bus: int
    nonslack: np.ndarray = field(repr=False)


def _connected(n: int, edges) -> bool:
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {0}
    todo = deque([0])
    while todo:
        for nb in adj[todo.popleft()]:
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    return len(seen) == n


def validate(case: GridCase) -> None:
    n = case.n_buses
    if n < 1:
        raise CaseValidationError("case has no buses")

    def check_bus(b, what):
        if not (isinstance(b, (int, np.integer)) and 0 <= b < n):
            raise CaseValidationError(f"{what} refers to bus {b}, outside [0, {n})")

    for k, ln in enumerate(case.lines):
        check_bus(ln.from_bus, f"line {k}")
        check_bus(ln.to_bus, f"line {k}")
        if ln.from_bus == ln.to_bus:
            raise CaseValidationError(f"line {k} is a self-loop")
        if not ln.flow_limit > 0:
            raise CaseValidationError(f"line {k}: flow limit must be positive")
        if not (math.isfinite(ln.susceptance) and ln.susceptance != 0):
            raise CaseValidationError(f"line {k}: susceptance must be finite and nonzero")
    for k, g in enumerate(case.gens):
        check_bus(g.bus, f"generator {k}")
        if not g.p_min <= g.p_max:
            raise CaseValidationError(f"generator {k}: p_min > p_max")
    for k, d in enumerate(case.loads):
        check_bus(d.bus, f"load {k}")
    check_bus(case.slack_bus, "slack_bus")
    if not any(g.bus == case.slack_bus for g in case.gens):
        raise CaseValidationError("no generator at the slack bus")
    if not _connected(n, [(ln.from_bus, ln.to_bus) for ln in case.lines]):
        raise CaseValidationError("network graph is disconnected")
    if not case.base_mva > 0:
        raise CaseValidationError("base_mva must be positive")


def build_admittance(case: GridCase) -> AdmittanceSet:
    n, L = case.n_buses, case.n_lines
    b = np.array([ln.susceptance for ln in case.lines])
    inc = np.zeros((L, n))
    inc[np.arange(L), [ln.from_bus for ln in case.lines]] = 1.0
    inc[np.arange(L), [ln.to_bus for ln in case.lines]] = -1.0
    b_line = b[:, None] * inc
    b_bus = inc.T @ b_line
    ns = case.nonslack_buses
    if ns.size == 0:
        return AdmittanceSet(b_bus, b_line, np.zeros((L, 0)), case.slack_bus, ns)
    reduced = b_bus[np.ix_(ns, ns)]
    try:
        # reduced matrix is symmetric: ptdf^T = reduced^{-1} b_line^T
        ptdf = np.linalg.solve(reduced, b_line[:, ns].T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError("slack-reduced admittance matrix is singular") from exc
    if not np.all(np.isfinite(ptdf)) or np.linalg.cond(reduced) > 1e12:
        raise NumericalError("slack-reduced admittance matrix is numerically singular")
    return AdmittanceSet(b_bus, b_line, ptdf, case.slack_bus, ns)


def line_flows(admittance: AdmittanceSet, injections) -> np.ndarray:
    """Line flows [MW] for net injections [MW] at the non-slack buses.

    Injections need not balance; the slack bus absorbs the residual.
    """
    inj = np.asarray(injections, dtype=float)
    if inj.shape[-1] != admittance.ptdf.shape[1]:
        raise ValueError(f"expected {admittance.ptdf.shape[1]} non-slack injections, got {inj.shape[-1]}")
    return inj @ admittance.ptdf.T


def bus_injections(case: GridCase, p_g, p_d) -> np.ndarray:
    """Net injection ``M_g p_g - M_d p_d`` at the non-slack buses (batched)."""
    m = case.maps
    inj = np.asarray(p_g) @ m.gen_map.T - np.asarray(p_d) @ m.load_map.T
    return inj[..., case.nonslack_buses]


# -- native JSON format --------------------------------------------------------

def case_to_dict(case: GridCase) -> dict:
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": case.n_buses,
        "slack_bus": case.slack_bus,
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "susceptance": ln.susceptance, "flow_limit": ln.flow_limit}
            for ln in case.lines
        ],
        "generators": [{"bus": g.bus, "p_min": g.p_min, "p_max": g.p_max, "cost": g.cost} for g in case.gens],
        "loads": [{"bus": d.bus, "p_max": d.p_max} for d in case.loads],
    }


def serialize_case(case: GridCase) -> str:
    # json writes floats with repr, which round-trips exactly; inf -> "Infinity"
    return json.dumps(case_to_dict(case), indent=2) + "\n"


def case_from_dict(doc: dict) -> GridCase:
    missing = [k for k in FORMAT_KEYS if k not in doc]
    if missing:
        raise CaseError(f"missing keys: {', '.join(missing)}")
    try:
        return GridCase(
            n_buses=int(doc["buses"]),
            lines=[Line(int(d["from"]), int(d["to"]), float(d["susceptance"]), float(d["flow_limit"])) for d in doc["lines"]],
            gens=[Generator(int(d["bus"]), float(d["p_min"]), float(d["p_max"]), float(d["cost"])) for d in doc["generators"]],
            loads=[Load(int(d["bus"]), float(d["p_max"])) for d in doc["loads"]],
            slack_bus=int(doc["slack_bus"]),
            base_mva=float(doc["base_mva"]),
            name=str(doc.get("name", "case")),
        )
    except (KeyError, TypeError) as exc:
        raise CaseError(f"bad record: {exc}") from exc


# -- MATPOWER subset -----------------------------------------------------------

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^;\[]+);")


def _matpower_tables(text: str):
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    scalars: dict[str, tuple[int, str]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = lines[i].split("%", 1)[0]
        m = _MATRIX_RE.search(raw)
        if m:
            name = m.group(1)
            rows: list[tuple[int, list[float]]] = []
            rest = raw[m.end():]
            lineno = i + 1
            done = False
            while True:
                chunk, sep, _ = rest.partition("]")
                for piece in chunk.split(";"):
                    piece = piece.strip()
                    if not piece:
                        continue
                    try:
                        rows.append((lineno, [float(tok) for tok in piece.replace(",", " ").split()]))
                    except ValueError as exc:
                        raise CaseError(f"non-numeric entry in mpc.{name}: {piece!r}", lineno) from exc
                if sep:
                    done = True
                    break
                i += 1
                if i >= len(lines):
                    break
                lineno = i + 1
                rest = lines[i].split("%", 1)[0]
            if not done:
                raise CaseError(f"unterminated matrix mpc.{name}", lineno)
            tables[name] = rows
        else:
            s = _SCALAR_RE.search(raw)
            if s:
                scalars[s.group(1)] = (i + 1, s.group(2).strip())
        i += 1
    return tables, scalars


def _need(row, k, lineno, table):
    if len(row) <= k:
        raise CaseError(f"mpc.{table} row has {len(row)} columns, need at least {k + 1}", lineno)
    return row[k]


def parse_matpower(text: str, name: str = "case") -> GridCase:
    tables, scalars = _matpower_tables(text)
    for t in ("bus", "gen", "branch", "gencost"):
        if t not in tables:
            raise CaseError(f"missing table mpc.{t}")
    base = 100.0
    if "baseMVA" in scalars:
        lineno, val = scalars["baseMVA"]
        try:
            base = float(val)
        except ValueError as exc:
            raise CaseError("bad baseMVA", lineno) from exc

    bus_index: dict[int, int] = {}
    loads: list[Load] = []
    slack = None
    for lineno, row in tables["bus"]:
        bus_id = int(_need(row, 0, lineno, "bus"))
        btype = int(_need(row, 1, lineno, "bus"))
        pd = _need(row, 2, lineno, "bus")
        if bus_id in bus_index:
            raise CaseError(f"duplicate bus {bus_id}", lineno)
        k = bus_index[bus_id] = len(bus_index)
        if btype == 3:
            if slack is not None:
                raise CaseValidationError("more than one reference bus", lineno)
            slack = k
        if pd > 0:
            loads.append(Load(k, float(pd)))
        elif pd < 0:
            log.warning("bus %d: negative demand %.3f MW ignored", bus_id, pd)
    if slack is None:
        raise CaseValidationError("no reference (type 3) bus")

    def bus_of(bid, lineno):
        if int(bid) not in bus_index:
            raise CaseValidationError(f"unknown bus {int(bid)}", lineno)
        return bus_index[int(bid)]

    gens: list[Generator] = []
    gen_rows = tables["gen"]
    cost_rows = tables["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise CaseError("mpc.gencost has fewer rows than mpc.gen")
    if len(cost_rows) > len(gen_rows):
        raise UnsupportedFeatureError("reactive power cost rows are not supported", cost_rows[len(gen_rows)][0])
    for (lineno, row), (clineno, crow) in zip(gen_rows, cost_rows):
        status = _need(row, 7, lineno, "gen")
        pmax = _need(row, 8, lineno, "gen")
        pmin = _need(row, 9, lineno, "gen")
        model = int(_need(crow, 0, clineno, "gencost"))
        if model != 2:
            raise UnsupportedFeatureError("only polynomial (model 2) costs are supported", clineno)
        ncoef = int(_need(crow, 3, clineno, "gencost"))
        coefs = crow[4:4 + ncoef]
        if len(coefs) != ncoef:
            raise CaseError("gencost row shorter than its declared coefficient count", clineno)
        if any(c != 0 for c in coefs[:-2]):
            raise UnsupportedFeatureError("nonlinear generator cost", clineno)
        c1 = coefs[-2] if ncoef >= 2 else 0.0
        if status <= 0:
            continue
        gens.append(Generator(bus_of(row[0], lineno), float(pmin), float(pmax), float(c1)))

    lines: list[Line] = []
    for lineno, row in tables["branch"]:
        x = _need(row, 3, lineno, "branch")
        rate = _need(row, 5, lineno, "branch")
        status = row[10] if len(row) > 10 else 1
        if status <= 0 or x == 0:
            log.warning("branch at line %d dropped (out of service or zero reactance)", lineno)
            continue
        if len(row) > 9 and row[9] != 0:
            log.warning("branch at line %d: phase shift ignored", lineno)
        limit = float(rate) if rate > 0 else math.inf
        lines.append(Line(bus_of(row[0], lineno), bus_of(row[1], lineno), 1.0 / float(x), limit))
    return GridCase(len(bus_index), lines, gens, loads, slack, base, name)


def parse_case(source: str, name: str | None = None) -> GridCase:
    """Parse native JSON or MATPOWER ``.m`` text."""
    stripped = source.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise CaseError(exc.msg, exc.lineno) from exc
        case = case_from_dict(doc)
        if name is not None and "name" not in doc:
            case = GridCase(case.n_buses, case.lines, case.gens, case.loads, case.slack_bus, case.base_mva, name)
        return case
    return parse_matpower(source, name or "case")


def load_case(path) -> GridCase:
    path = Path(path)
    if not path.exists():
        builtin = Path(__file__).with_name("data") / path.name
        if not builtin.exists():
            builtin = Path(__file__).with_name("data") / f"{path.name}.json"
        if not builtin.exists():
            raise FileNotFoundError(path)
        path = builtin
    return parse_case(path.read_text(), name=path.stem)


def save_case(case: GridCase, path) -> None:
    Path(path).write_text(serialize_case(case))
