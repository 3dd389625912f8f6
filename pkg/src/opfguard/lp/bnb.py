"""Deterministic best-bound branch-and-bound over binary variables."""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import time

import numpy as np

from .model import INF, LinearModel, SolveResult, Status, relative_gap
from .simplex import SimplexEngine, SolverError, WarmStart, _solve_with

log = logging.getLogger(__name__)

INT_TOL = 1e-6
# pruning slack relative to max(1, |incumbent|); keeps gap_tol=0 finite
OPT_TOL = 1e-9


def solve_milp(
    model: LinearModel,
    gap_tol: float = 0.0,
    time_limit: float | None = None,
    max_nodes: int | None = None,
    cutoff: float | None = None,
    priority=None,
) -> SolveResult:
    """Solve ``model`` with binaries enforced.

    Branching picks the most fractional binary (lowest index on ties); the
    open node with the best LP bound is expanded first, insertion order
    breaking ties. Children are solved eagerly from the parent basis with
    dual simplex iterations.

    ``cutoff`` prunes every node whose bound is not strictly better than it;
    when nothing survives the status is ``Cutoff``.

    ``priority`` maps variable index to an integer class; fractional binaries
    of the highest class are branched on first.
    """
    t0 = time.perf_counter()
    bad = [j for j in model.integrality if model.lb[j] < 0 or model.ub[j] > 1]
    if bad:
        raise ValueError(f"non-binary integer variables: {bad[:5]}")
    A, lo, hi = model.compiled()
    engine = SimplexEngine(A, lo, hi)
    sign = 1.0 if model.sense == "min" else -1.0
    ints = np.array(sorted(model.integrality), dtype=int)
    prio = np.zeros(ints.size)
    if priority:
        prio = np.array([priority.get(int(j), 0) for j in ints], dtype=float)
    base_lb, base_ub = model.lb, model.ub

    def internal(v):  # model objective -> minimisation value
        return sign * (v - model.obj_constant)

    def external(v):
        return sign * v + model.obj_constant

    inc_val = INF if cutoff is None else internal(cutoff)
    have_cutoff = cutoff is not None
    incumbent: np.ndarray | None = None
    nodes = 0
    iters = 0

    def lp(lb, ub, warm):
        nonlocal nodes, iters
        nodes += 1
        try:
            res = _solve_with(engine, model, warm, lb, ub, t0)
        except SolverError:
            if warm is None:
                raise
            log.debug("warm node solve failed, retrying cold")
            res = _solve_with(engine, model, None, lb, ub, t0)
        iters += res.iterations
        return res

    def prunable(bound):
        return bound >= inc_val - OPT_TOL * max(1.0, abs(inc_val))

    def fractional(x):
        if ints.size == 0:
            return -1
        frac = np.abs(x[ints] - np.round(x[ints]))
        if frac.max() <= INT_TOL:
            return -1
        score = np.abs(x[ints] - np.floor(x[ints]) - 0.5)
        if priority:
            top = prio[frac > INT_TOL].max()
            score = np.where((prio == top) & (frac > INT_TOL), score, np.inf)
        return int(ints[np.argmin(score)])

    def finish(status, bound):
        res = SolveResult(status, node_count=nodes, iterations=iters, wall_time=time.perf_counter() - t0)
        if incumbent is not None:
            res.x = incumbent
            res.objective = external(inc_val)
        res.best_bound = external(bound) if math.isfinite(bound) else sign * bound
        if incumbent is not None:
            res.milp_gap = relative_gap(res.best_bound, res.objective)
        return res

    root = lp(base_lb, base_ub, None)
    if root.status == Status.INFEASIBLE:
        return finish(Status.INFEASIBLE, INF)
    if root.status == Status.UNBOUNDED:
        return finish(Status.UNBOUNDED, -INF)
    if root.status != Status.OPTIMAL:
        return finish(root.status, -INF)

    counter = itertools.count()
    heap: list = []

    def consider(res, lb, ub):
        nonlocal inc_val, incumbent
        b = internal(res.objective)
        if prunable(b):
            return
        j = fractional(res.x)
        if j < 0:
            x = res.x.copy()
            x[ints] = np.round(x[ints])
            inc_val = b
            incumbent = x
            return
        ws = WarmStart(res.basis.basis, res.basis.at_upper)
        heapq.heappush(heap, (b, next(counter), j, lb, ub, ws))

    consider(root, base_lb.copy(), base_ub.copy())
    status = Status.OPTIMAL
    while heap:
        bound = heap[0][0]
        if incumbent is not None and gap_tol > 0 and relative_gap(external(bound), external(inc_val)) <= gap_tol:
            break
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            status = Status.TIME_LIMIT
            break
        if max_nodes is not None and nodes >= max_nodes:
            status = Status.NODE_LIMIT
            break
        b, _, j, lb, ub, ws = heapq.heappop(heap)
        if prunable(b):
            continue
        # one factorisation per expanded node, shared by both children
        try:
            ws = WarmStart(ws.basis, ws.at_upper, np.linalg.inv(engine.K[:, ws.basis]))
        except np.linalg.LinAlgError:
            ws = None
        for val in (0.0, 1.0):
            if not lb[j] <= val <= ub[j]:
                continue
            clb, cub = lb.copy(), ub.copy()
            clb[j] = cub[j] = val
            res = lp(clb, cub, ws)
            if res.status == Status.OPTIMAL:
                consider(res, clb, cub)

    if incumbent is None and status == Status.OPTIMAL:
        if have_cutoff:
            return finish(Status.CUTOFF, inc_val)
        return finish(Status.INFEASIBLE, INF)
    bound = min(heap[0][0], inc_val) if heap else inc_val
    return finish(status, bound)
