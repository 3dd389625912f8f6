"""Load input domain, Latin hypercube sampling and labelled DC-OPF datasets."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from .dcopf import DcOpfInfeasible, DcOpfSolver
from .fileio import atomic_write_json, atomic_write_text, csv_matrix, read_csv_matrix
from .grid import GridCase

log = logging.getLogger(__name__)

MAX_INFEASIBLE_SHARE = 0.5
TRAIN_SHARE = 0.8


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class InputDomain:
    """Per-load box ``lower*p_max <= p_d <= upper*p_max`` plus optional rows ``A p_d <= b``."""

    lower: float | tuple[float, ...] = 0.6
    upper: float | tuple[float, ...] = 1.0
    A: np.ndarray | None = field(default=None, compare=False)
    b: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, dtype=float), np.asarray(self.upper, dtype=float)
        if np.any(lo > hi + 1e-15):
            raise ValueError("domain lower fraction exceeds upper fraction")
        if (self.A is None) != (self.b is None):
            raise ValueError("polytope rows need both A and b")

    @property
    def is_box(self) -> bool:
        return self.A is None

    def box(self, case: GridCase) -> tuple[np.ndarray, np.ndarray]:
        """Box bounds in MW."""
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), (case.n_loads,)) * case.load_max
        hi = np.broadcast_to(np.asarray(self.upper, dtype=float), (case.n_loads,)) * case.load_max
        return lo, np.maximum(hi, lo)

    def rows(self, case: GridCase) -> tuple[np.ndarray, np.ndarray]:
        """All domain constraints as ``A p_d <= b`` (box included)."""
        lo, hi = self.box(case)
        eye = np.eye(case.n_loads)
        A, b = [eye, -eye], [hi, -lo]
        if self.A is not None:
            A.append(np.atleast_2d(self.A))
            b.append(np.asarray(self.b, dtype=float))
        return np.vstack(A), np.concatenate(b)

    def shrink(self, delta: float) -> "InputDomain":
        """Box ``(lower + delta, upper - delta)``; a crossed box collapses to its midpoint."""
        lo = np.asarray(self.lower, dtype=float) + delta
        hi = np.asarray(self.upper, dtype=float) - delta
        mid = 0.5 * (np.asarray(self.lower, dtype=float) + np.asarray(self.upper, dtype=float))
        crossed = lo > hi
        lo = np.where(crossed, mid, lo)
        hi = np.where(crossed, mid, hi)
        return replace(self, lower=_scalarise(lo), upper=_scalarise(hi))

    def contains(self, case: GridCase, p_d, tol: float = 1e-9) -> np.ndarray:
        A, b = self.rows(case)
        return np.all(np.atleast_2d(p_d) @ A.T <= b + tol, axis=1)

    def to_dict(self) -> dict:
        d = {"lower": _listify(self.lower), "upper": _listify(self.upper)}
        if self.A is not None:
            d["A"] = np.asarray(self.A).tolist()
            d["b"] = np.asarray(self.b).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InputDomain":
        lower, upper = d.get("lower", 0.6), d.get("upper", 1.0)
        A = np.asarray(d["A"], dtype=float) if "A" in d else None
        b = np.asarray(d["b"], dtype=float) if "b" in d else None
        return cls(_scalarise(lower), _scalarise(upper), A, b)


def _scalarise(v):
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        return float(arr)
    return tuple(float(x) for x in arr)


def _listify(v):
    return list(v) if isinstance(v, tuple) else v


def lhs_sample(case: GridCase, domain: InputDomain, n: int, seed: int) -> np.ndarray:
    """Latin hypercube sample of ``n`` load vectors [MW] inside the domain box.

    Each load dimension has exactly one sample in each of ``n`` equal-width
    strata of its interval.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not domain.is_box:
        raise ValueError("Latin hypercube sampling needs a box domain; use sample_domain for polytopes")
    rng = np.random.default_rng(seed)
    lo, hi = domain.box(case)
    d = case.n_loads
    u = np.empty((n, d))
    for j in range(d):
        u[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return lo + u * (hi - lo)


def sample_domain(case: GridCase, domain: InputDomain, n: int, seed: int, max_rounds: int = 50) -> np.ndarray:
    """LHS for boxes; for general polytopes, rejection from repeated box LHS draws."""
    if domain.is_box:
        return lhs_sample(case, domain, n, seed)
    box = replace(domain, A=None, b=None)
    kept: list[np.ndarray] = []
    total = 0
    for r in range(max_rounds):
        pts = lhs_sample(case, box, n, seed + r)
        pts = pts[domain.contains(case, pts)]
        kept.append(pts)
        total += len(pts)
        if total >= n:
            break
    if total == 0:
        raise DatasetError("no sample fell inside the polytope domain")
    log.warning("polytope domain: rejection sampling, stratification is not preserved")
    return np.vstack(kept)[:n]


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    provenance: dict

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.train_idx], self.targets[self.train_idx]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.test_idx], self.targets[self.test_idx]

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        atomic_write_text(path / "inputs.csv", csv_matrix([f"p_d_{j}" for j in range(self.inputs.shape[1])], self.inputs))
        atomic_write_text(path / "targets.csv", csv_matrix([f"p_g_{j}" for j in range(self.targets.shape[1])], self.targets))
        atomic_write_json(path / "split.json", {"train": self.train_idx.tolist(), "test": self.test_idx.tolist()})
        atomic_write_json(path / "meta.json", self.provenance)

    @classmethod
    def load(cls, path) -> "LabeledDataset":
        path = Path(path)
        _, inputs = read_csv_matrix(path / "inputs.csv")
        _, targets = read_csv_matrix(path / "targets.csv")
        split = json.loads((path / "split.json").read_text())
        meta = json.loads((path / "meta.json").read_text())
        if len(inputs) != len(targets):
            raise DatasetError("inputs.csv and targets.csv have different row counts")
        return cls(inputs, targets, np.array(split["train"], dtype=int), np.array(split["test"], dtype=int), meta)


def _label_chunk(args):
    case, loads = args
    solver = DcOpfSolver(case)
    out = []
    for d in loads:
        try:
            out.append(solver.solve(d).p_g)
        except DcOpfInfeasible:
            out.append(None)
    return out


def label(case: GridCase, loads: np.ndarray, jobs: int = 1) -> list[np.ndarray | None]:
    """DC-OPF optimal dispatch per row, ``None`` where infeasible; order preserved."""
    if jobs <= 1 or len(loads) < 2 * jobs:
        return _label_chunk((case, loads))
    chunks = np.array_split(loads, jobs)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_label_chunk, [(case, c) for c in chunks]))
    return [p for part in parts for p in part]


def check_distinct_costs(case: GridCase, allow_ties: bool = False) -> None:
    costs = case.cost
    if len(np.unique(costs)) < len(costs):
        msg = "generator costs are not distinct; the optimal dispatch may be non-unique"
        if not allow_ties:
            raise DatasetError(msg)
        log.warning(msg)


def generate_dataset(
    case: GridCase,
    domain: InputDomain,
    n: int,
    seed: int,
    jobs: int = 1,
    allow_cost_ties: bool = False,
) -> LabeledDataset:
    check_distinct_costs(case, allow_cost_ties)
    loads = sample_domain(case, domain, n, seed)
    labels = label(case, loads, jobs)
    feasible = np.array([p is not None for p in labels])
    n_bad = int((~feasible).sum())
    if n_bad > MAX_INFEASIBLE_SHARE * len(loads):
        raise DatasetError(
            f"{n_bad} of {len(loads)} samples are DC-OPF infeasible; the input domain is probably misconfigured"
        )
    if n_bad:
        log.warning("dropped %d infeasible samples of %d", n_bad, len(loads))
    inputs = loads[feasible]
    targets = np.array([p for p in labels if p is not None]).reshape(-1, case.n_gens)
    order = np.random.default_rng([seed, 1]).permutation(len(inputs))
    n_train = int(round(TRAIN_SHARE * len(inputs)))
    prov = {
        "case": case.name,
        "seed": seed,
        "domain": domain.to_dict(),
        "n_requested": n,
        "n_infeasible": n_bad,
        "n_loads": case.n_loads,
        "n_gens": case.n_gens,
    }
    return LabeledDataset(inputs, targets, np.sort(order[:n_train]), np.sort(order[n_train:]), prov)


def opt_reference_cost(case: GridCase) -> float:
    """Generation cost of the fully loaded case; normalises ``nu_opt``."""
    return DcOpfSolver(case).solve(case.load_max).objective_cost


def empirical_worst_case(dataset: LabeledDataset, net, case: GridCase) -> dict[str, tuple[float, int]]:
    """Maximum of each raw metric over every dataset row, with the attaining row."""
    from .mlp import predict_dispatch

    p_hat = predict_dispatch(net, case, dataset.inputs)
    vals = metrics.pointwise(case, p_hat, dataset.inputs, dataset.targets)
    return {k: (float(v.max()), int(np.argmax(v))) for k, v in vals.items()}
