"""Linear / mixed-binary model container and solve results."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

INF = math.inf


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    TIME_LIMIT = "TimeLimit"
    NODE_LIMIT = "NodeLimit"
    # every node bound was at or below the caller's cutoff
    CUTOFF = "Cutoff"


class ModelError(ValueError):
    pass


class SealedModelError(ModelError):
    pass


_RELATIONS = {"<=": "<=", "=<": "<=", "L": "<=", ">=": ">=", "=>": ">=", "G": ">=", "=": "=", "==": "=", "E": "="}


@dataclass(frozen=True)
class Constraint:
    index: np.ndarray
    coef: np.ndarray
    relation: str
    rhs: float
    big_m: bool = False
    name: str | None = None


class LinearModel:
    """Builder for ``min/max c'x`` over linear rows, variable boxes and binaries.

    Variables are referenced by integer index. Once :meth:`seal` is called the
    model rejects further edits; solvers only ever read it.
    """

    def __init__(self, sense: str = "min", name: str | None = None):
        if sense not in ("min", "max"):
            raise ModelError(f"unknown sense {sense!r}")
        self.sense = sense
        self.name = name
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._names: list[str | None] = []
        self._obj: dict[int, float] = {}
        self.obj_constant = 0.0
        self.constraints: list[Constraint] = []
        self.integrality: set[int] = set()
        self._sealed = False
        self._compiled = None

    # -- construction -----------------------------------------------------
    @property
    def n_vars(self) -> int:
        return len(self._lb)

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    @property
    def sealed(self) -> bool:
        return self._sealed

    def _check_open(self):
        if self._sealed:
            raise SealedModelError("model is sealed")

    def add_var(self, lb: float = 0.0, ub: float = INF, name: str | None = None, binary: bool = False) -> int:
        self._check_open()
        if binary:
            lb, ub = math.ceil(max(0.0, lb)), math.floor(min(1.0, ub))
        lb, ub = float(lb), float(ub)
        if math.isnan(lb) or math.isnan(ub):
            raise ModelError("NaN variable bound")
        if lb > ub:
            raise ModelError(f"variable {name or len(self._lb)}: lower bound {lb} > upper bound {ub}")
        j = len(self._lb)
        self._lb.append(lb)
        self._ub.append(ub)
        self._names.append(name)
        if binary:
            self.integrality.add(j)
        return j

    def add_vars(self, count: int, lb=0.0, ub=INF, prefix: str | None = None, binary: bool = False) -> np.ndarray:
        lbs = np.broadcast_to(np.asarray(lb, dtype=float), (count,))
        ubs = np.broadcast_to(np.asarray(ub, dtype=float), (count,))
        return np.array(
            [
                self.add_var(lbs[i], ubs[i], None if prefix is None else f"{prefix}{i}", binary=binary)
                for i in range(count)
            ],
            dtype=int,
        )

    def set_bounds(self, j: int, lb: float | None = None, ub: float | None = None) -> None:
        self._check_open()
        if lb is not None:
            self._lb[j] = float(lb)
        if ub is not None:
            self._ub[j] = float(ub)
        if self._lb[j] > self._ub[j]:
            raise ModelError(f"variable {j}: lower bound exceeds upper bound")

    def add_constraint(
        self,
        terms: Mapping[int, float] | tuple[Sequence[int], Sequence[float]],
        relation: str,
        rhs: float,
        big_m: bool = False,
        name: str | None = None,
    ) -> int:
        """Add ``sum(coef * x[idx]) relation rhs``; repeated indices are summed."""
        self._check_open()
        rel = _RELATIONS.get(relation)
        if rel is None:
            raise ModelError(f"unknown relation {relation!r}")
        if isinstance(terms, Mapping):
            idx = np.fromiter(terms.keys(), dtype=int, count=len(terms))
            coef = np.fromiter(terms.values(), dtype=float, count=len(terms))
        else:
            idx = np.asarray(terms[0], dtype=int).ravel()
            coef = np.asarray(terms[1], dtype=float).ravel()
        if idx.shape != coef.shape:
            raise ModelError("index/coefficient length mismatch")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_vars):
            raise ModelError("constraint references an unknown variable")
        if not np.all(np.isfinite(coef)) or math.isnan(rhs):
            raise ModelError("non-finite constraint data")
        if idx.size:
            uniq, inv = np.unique(idx, return_inverse=True)
            if uniq.size != idx.size:
                summed = np.zeros(uniq.size)
                np.add.at(summed, inv, coef)
                idx, coef = uniq, summed
        keep = coef != 0.0
        self.constraints.append(Constraint(idx[keep], coef[keep], rel, float(rhs), big_m, name))
        return len(self.constraints) - 1

    def set_objective(self, terms: Mapping[int, float] | tuple[Sequence[int], Sequence[float]], sense: str | None = None, constant: float = 0.0) -> None:
        self._check_open()
        if sense is not None:
            if sense not in ("min", "max"):
                raise ModelError(f"unknown sense {sense!r}")
            self.sense = sense
        self._obj = {}
        if isinstance(terms, Mapping):
            items = terms.items()
        else:
            items = zip(np.asarray(terms[0], dtype=int).ravel(), np.asarray(terms[1], dtype=float).ravel())
        for j, c in items:
            j = int(j)
            if not 0 <= j < self.n_vars:
                raise ModelError("objective references an unknown variable")
            self._obj[j] = self._obj.get(j, 0.0) + float(c)
        self.obj_constant = float(constant)

    # -- access -----------------------------------------------------------
    @property
    def lb(self) -> np.ndarray:
        return np.array(self._lb, dtype=float)

    @property
    def ub(self) -> np.ndarray:
        return np.array(self._ub, dtype=float)

    @property
    def var_names(self) -> list[str | None]:
        return list(self._names)

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for j, v in self._obj.items():
            c[j] = v
        return c

    def seal(self) -> "LinearModel":
        self._sealed = True
        return self

    def copy(self) -> "LinearModel":
        """Unsealed deep-enough copy (constraints are immutable records)."""
        m = LinearModel(self.sense, self.name)
        m._lb, m._ub, m._names = list(self._lb), list(self._ub), list(self._names)
        m._obj = dict(self._obj)
        m.obj_constant = self.obj_constant
        m.constraints = list(self.constraints)
        m.integrality = set(self.integrality)
        return m

    def with_objective(self, terms, sense: str, constant: float = 0.0) -> "LinearModel":
        """Sealed copy sharing rows (and the compiled matrix) with a new objective."""
        m = self.copy()
        m.set_objective(terms, sense, constant)
        m._sealed = True
        if self._sealed:
            m._compiled = self._compiled
        return m

    def compiled(self):
        """Dense row matrix and row-activity bounds ``(A, row_lo, row_hi)``."""
        if self._compiled is not None and self._compiled[0].shape == (self.n_constraints, self.n_vars):
            return self._compiled
        A = np.zeros((self.n_constraints, self.n_vars))
        lo = np.empty(self.n_constraints)
        hi = np.empty(self.n_constraints)
        for i, con in enumerate(self.constraints):
            A[i, con.index] = con.coef
            lo[i] = con.rhs if con.relation in (">=", "=") else -INF
            hi[i] = con.rhs if con.relation in ("<=", "=") else INF
        out = (A, lo, hi)
        if self._sealed:
            self._compiled = out
        return out

    def check_feasibility(self, x: np.ndarray, tol: float = 1e-6) -> float:
        """Largest violation of rows, bounds and binary integrality at ``x``."""
        x = np.asarray(x, dtype=float)
        A, lo, hi = self.compiled()
        act = A @ x if A.size else np.zeros(0)
        viol = [0.0]
        if act.size:
            viol.append(float(np.max(np.maximum(lo - act, 0.0), initial=0.0)))
            viol.append(float(np.max(np.maximum(act - hi, 0.0), initial=0.0)))
        viol.append(float(np.max(np.maximum(self.lb - x, 0.0), initial=0.0)))
        viol.append(float(np.max(np.maximum(x - self.ub, 0.0), initial=0.0)))
        if self.integrality:
            ints = np.fromiter(sorted(self.integrality), dtype=int)
            viol.append(float(np.max(np.abs(x[ints] - np.round(x[ints])))))
        return max(viol)

    def objective_value(self, x: np.ndarray) -> float:
        return float(self.objective_vector() @ np.asarray(x, dtype=float)) + self.obj_constant

    def __repr__(self) -> str:
        return (
            f"LinearModel({self.sense}, vars={self.n_vars}, rows={self.n_constraints}, "
            f"binaries={len(self.integrality)}{', sealed' if self._sealed else ''})"
        )


@dataclass
class SolveResult:
    status: Status
    x: np.ndarray | None = None
    objective: float = math.nan
    # row duals: d(objective)/d(rhs); reduced costs: duals of variable bounds
    duals: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    best_bound: float = math.nan
    milp_gap: float = math.nan
    node_count: int = 0
    iterations: int = 0
    wall_time: float = 0.0
    basis: object | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL


def relative_gap(bound: float, incumbent: float) -> float:
    if math.isinf(bound) or math.isinf(incumbent) or math.isnan(bound) or math.isnan(incumbent):
        return INF
    return abs(bound - incumbent) / max(1.0, abs(incumbent))
