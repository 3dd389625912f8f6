"""Dense bounded-variable revised simplex.

Every row ``lo <= a'x <= hi`` gets a logical variable ``s = a'x`` so the
working system is ``[A  -I] [x; s] = 0`` with boxes on all columns. The basis
inverse is kept explicitly and updated with product-form pivots, refactored
every ``REFACTOR_EVERY`` pivots.

Primal iterations use a composite phase 1 (minimise the sum of basic bound
violations) followed by phase 2. Dual iterations are used for warm starts
after bound changes, where the previous optimal basis stays dual feasible.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .model import INF, LinearModel, SolveResult, Status

log = logging.getLogger(__name__)

PRIMAL_TOL = 1e-9
DUAL_TOL = 1e-9
PIVOT_TOL = 1e-9
REFACTOR_EVERY = 50
STALL_LIMIT = 50


class SolverError(RuntimeError):
    pass


@dataclass
class WarmStart:
    basis: np.ndarray
    at_upper: np.ndarray
    binv: np.ndarray | None = None


class SimplexEngine:
    """Reusable engine for one constraint matrix; bounds and costs vary per call."""

    def __init__(self, A: np.ndarray, row_lo: np.ndarray, row_hi: np.ndarray):
        A = np.asarray(A, dtype=float)
        self.m, self.n = A.shape
        self.A = A
        self.K = np.hstack([A, -np.eye(self.m)])
        self.KT = np.ascontiguousarray(self.K.T)
        self.row_lo = np.asarray(row_lo, dtype=float)
        self.row_hi = np.asarray(row_hi, dtype=float)
        self.iterations = 0

    # ------------------------------------------------------------------
    def solve(self, c, lb, ub, warm: WarmStart | None = None, max_iter: int | None = None):
        """Minimise ``c'x``. Returns ``(status, x, y, d, obj, warmstart)``.

        ``y`` are row duals (d obj / d rhs) and ``d`` structural reduced costs.
        """
        m, n = self.m, self.n
        N = n + m
        self.c = np.concatenate([np.asarray(c, dtype=float), np.zeros(m)])
        self.lo = np.concatenate([np.asarray(lb, dtype=float), self.row_lo])
        self.hi = np.concatenate([np.asarray(ub, dtype=float), self.row_hi])
        if np.any(self.lo > self.hi + PRIMAL_TOL):
            return Status.INFEASIBLE, None, None, None, math.nan, None
        self.max_iter = max_iter or 50 * (N + 10)
        self.iterations = 0
        self.bland = False
        self.stall = 0
        self.since_refactor = 0

        started = False
        if warm is not None and warm.basis.shape == (m,):
            started = self._load(warm)
        if not started:
            self._cold()

        status = None
        if started and self._dual_feasible():
            status = self._dual()
            if status == Status.INFEASIBLE:
                # confirm from a fresh factorisation before trusting it
                self._refactor()
                status = self._dual()
        if status != Status.INFEASIBLE:
            status = self._primal()
        if status != Status.OPTIMAL:
            return status, None, None, None, math.nan, None

        x = self.x
        y = self.binv.T @ self.c[self.basis]
        d = self.c - self.KT @ y
        obj = float(self.c[:n] @ x[:n])
        ws = WarmStart(self.basis.copy(), self._at_upper(), self.binv.copy())
        return status, x[:n].copy(), y, d[:n], obj, ws

    # -- setup -----------------------------------------------------------
    def _place_nonbasic(self, j_mask, prefer_upper=None):
        lo, hi = self.lo, self.hi
        val = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))
        if prefer_upper is not None:
            up = prefer_upper & np.isfinite(hi)
            val = np.where(up, hi, val)
        self.x = np.where(j_mask, val, 0.0)

    def _cold(self):
        m, n = self.m, self.n
        self.basis = np.arange(n, n + m)
        self.is_basic = np.zeros(n + m, dtype=bool)
        self.is_basic[self.basis] = True
        self._place_nonbasic(~self.is_basic)
        self.binv = -np.eye(m)
        self._update_basics()

    def _load(self, warm: WarmStart) -> bool:
        self.basis = warm.basis.copy()
        self.is_basic = np.zeros(self.n + self.m, dtype=bool)
        self.is_basic[self.basis] = True
        if self.is_basic.sum() != self.m:
            return False
        self._place_nonbasic(~self.is_basic, warm.at_upper & ~self.is_basic)
        if warm.binv is not None:
            self.binv = warm.binv.copy()
        elif not self._refactor(update=False):
            return False
        self._update_basics()
        return True

    def _at_upper(self):
        return (~self.is_basic) & (self.x == self.hi) & (self.hi > self.lo)

    def _refactor(self, update=True) -> bool:
        B = self.K[:, self.basis]
        try:
            binv = np.linalg.inv(B)
        except np.linalg.LinAlgError:
            return False
        if not np.all(np.isfinite(binv)):
            return False
        self.binv = binv
        self.since_refactor = 0
        if update:
            self._update_basics()
        return True

    def _update_basics(self):
        xn = self.x.copy()
        xn[self.basis] = 0.0
        self.x[self.basis] = -self.binv @ (self.K @ xn)

    def _pivot(self, r, q, alpha):
        piv = alpha[r]
        row = self.binv[r] / piv
        self.binv -= np.outer(alpha, row)
        self.binv[r] = row
        leaving = self.basis[r]
        self.is_basic[leaving] = False
        self.is_basic[q] = True
        self.basis[r] = q
        self.since_refactor += 1
        if self.since_refactor >= REFACTOR_EVERY:
            if not self._refactor():
                raise SolverError("basis became singular")

    def _tick(self):
        self.iterations += 1
        if self.iterations > self.max_iter:
            raise SolverError("simplex iteration limit exceeded")

    def _movable(self):
        nb = ~self.is_basic
        can_inc = nb & (self.x < self.hi)
        can_dec = nb & (self.x > self.lo)
        return can_inc, can_dec

    def _dual_feasible(self) -> bool:
        y = self.binv.T @ self.c[self.basis]
        d = self.c - self.KT @ y
        can_inc, can_dec = self._movable()
        bad = (can_inc & (d < -DUAL_TOL)) | (can_dec & (d > DUAL_TOL))
        return not bad.any()

    # -- primal ------------------------------------------------------------
    def _primal(self) -> Status:
        checks = 0
        while True:
            self._tick()
            basis = self.basis
            xB = self.x[basis]
            loB, hiB = self.lo[basis], self.hi[basis]
            below = xB < loB - PRIMAL_TOL
            above = xB > hiB + PRIMAL_TOL
            phase1 = bool(below.any() or above.any())
            if phase1:
                cB = np.where(below, -1.0, np.where(above, 1.0, 0.0))
                y = self.binv.T @ cB
                d = -(self.KT @ y)
            else:
                y = self.binv.T @ self.c[basis]
                d = self.c - self.KT @ y
            can_inc, can_dec = self._movable()
            elig = (can_inc & (d < -DUAL_TOL)) | (can_dec & (d > DUAL_TOL))
            if not elig.any():
                # verify on a fresh factorisation before declaring termination
                if self.since_refactor > 0 and checks < 3:
                    checks += 1
                    if not self._refactor():
                        raise SolverError("singular basis at termination")
                    continue
                return Status.INFEASIBLE if phase1 else Status.OPTIMAL
            cand = np.flatnonzero(elig)
            if self.bland:
                q = int(cand[0])
            else:
                q = int(cand[np.argmax(np.abs(d[cand]))])
            direction = 1.0 if d[q] < 0 else -1.0
            alpha = self.binv @ self.K[:, q]
            delta = -direction * alpha

            # Harris two-pass ratio test
            lim_hi = np.where(phase1 & below, loB, np.where(above, INF, hiB))
            lim_lo = np.where(phase1 & above, hiB, np.where(below, -INF, loB))
            up = delta > PIVOT_TOL
            dn = delta < -PIVOT_TOL
            with np.errstate(divide="ignore", invalid="ignore"):
                relaxed = np.where(up, (lim_hi + PRIMAL_TOL - xB) / delta, np.where(dn, (lim_lo - PRIMAL_TOL - xB) / delta, INF))
                exact = np.where(up, (lim_hi - xB) / delta, np.where(dn, (lim_lo - xB) / delta, INF))
            relaxed = np.where(np.isnan(relaxed), INF, relaxed)
            theta_max = float(relaxed.min()) if relaxed.size else INF
            span = self.hi[q] - self.lo[q]
            if math.isinf(theta_max) and math.isinf(span):
                if phase1:
                    if not self._refactor():
                        raise SolverError("numerical trouble in phase 1")
                    continue
                return Status.UNBOUNDED
            elif span <= theta_max:
                t, r = span, -1
            else:
                ok = np.flatnonzero(exact <= theta_max)
                if self.bland:
                    r = int(ok[np.argmin(basis[ok])])
                else:
                    r = int(ok[np.argmax(np.abs(delta[ok]))])
                t = max(float(exact[r]), 0.0)
            if t <= 1e-12:
                self.stall += 1
                if self.stall > STALL_LIMIT:
                    self.bland = True
            else:
                self.stall = 0
            self.x[q] += direction * t
            self.x[basis] += delta * t
            if r < 0:
                self.x[q] = self.hi[q] if direction > 0 else self.lo[q]
                continue
            leaving = basis[r]
            self.x[leaving] = lim_hi[r] if delta[r] > 0 else lim_lo[r]
            self._pivot(r, q, alpha)

    # -- dual --------------------------------------------------------------
    def _dual(self) -> Status:
        while True:
            self._tick()
            basis = self.basis
            xB = self.x[basis]
            loB, hiB = self.lo[basis], self.hi[basis]
            v_lo = loB - xB
            v_hi = xB - hiB
            viol = np.maximum(v_lo, v_hi)
            infeas = viol > PRIMAL_TOL
            if not infeas.any():
                return Status.OPTIMAL
            if self.bland:
                cand = np.flatnonzero(infeas)
                r = int(cand[np.argmin(basis[cand])])
            else:
                r = int(np.argmax(viol))
            to_lower = v_lo[r] > v_hi[r]
            y = self.binv.T @ self.c[basis]
            d = self.c - self.KT @ y
            alpha_r = self.binv[r] @ self.K
            can_inc, can_dec = self._movable()
            if to_lower:
                elig = (can_inc & (alpha_r < -PIVOT_TOL)) | (can_dec & (alpha_r > PIVOT_TOL))
            else:
                elig = (can_inc & (alpha_r > PIVOT_TOL)) | (can_dec & (alpha_r < -PIVOT_TOL))
            cand = np.flatnonzero(elig)
            if cand.size == 0:
                return Status.INFEASIBLE
            a = np.abs(alpha_r[cand])
            dd = np.abs(d[cand])
            relaxed = (dd + DUAL_TOL) / a
            theta_max = relaxed.min()
            ok = cand[dd / a <= theta_max]
            if self.bland:
                q = int(ok.min())
            else:
                q = int(ok[np.argmax(np.abs(alpha_r[ok]))])
            alpha = self.binv @ self.K[:, q]
            bound = loB[r] if to_lower else hiB[r]
            step = (xB[r] - bound) / alpha[r]
            if abs(step) <= 1e-12:
                self.stall += 1
                if self.stall > STALL_LIMIT:
                    self.bland = True
            else:
                self.stall = 0
            leaving = basis[r]
            self.x[q] += step
            self.x[basis] -= alpha * step
            self.x[leaving] = bound
            self._pivot(r, q, alpha)


def solve_lp(model: LinearModel, warm_start: WarmStart | None = None, lb=None, ub=None) -> SolveResult:
    """Solve the LP relaxation of ``model`` (integrality ignored).

    Duals follow the shadow-price convention of the model's own sense: the
    dual of a row is the rate of change of the optimal objective per unit
    increase of its right-hand side.
    """
    t0 = time.perf_counter()
    A, lo, hi = model.compiled()
    engine = SimplexEngine(A, lo, hi)
    return _solve_with(engine, model, warm_start, lb, ub, t0)


def _solve_with(engine, model, warm_start, lb, ub, t0, max_iter=None):
    sign = 1.0 if model.sense == "min" else -1.0
    c = sign * model.objective_vector()
    lb = model.lb if lb is None else lb
    ub = model.ub if ub is None else ub
    status, x, y, d, obj, ws = engine.solve(c, lb, ub, warm_start, max_iter)
    res = SolveResult(status, iterations=engine.iterations, wall_time=time.perf_counter() - t0)
    if status == Status.OPTIMAL:
        res.x = x
        res.objective = sign * obj + model.obj_constant
        res.duals = sign * y
        res.reduced_costs = sign * d
        res.best_bound = res.objective
        res.milp_gap = 0.0
        res.basis = ws
    return res
