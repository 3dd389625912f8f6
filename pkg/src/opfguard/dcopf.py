"""DC optimal power flow: LP construction, solution with duals, KKT checks.

The LP is posed in MW. Angles enter through ``phi = base_mva * theta`` so the
angle coefficients are the per-unit susceptances and every row is in MW.

Dual sign convention (Lagrangian ``c'p + lam'(M_g p - M_d d - B theta) + ...``):
stationarity reads ``c - mu_g_min + mu_g_max + M_g' lam = 0`` and
``-B_line' mu_line_min + B_line' mu_line_max - B_bus lam = 0`` on non-slack
buses; all ``mu`` are nonnegative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import GridCase
from .lp import LinearModel, SolveResult, Status, WarmStart
from .lp.model import INF
from .lp.simplex import SimplexEngine, _solve_with


class DcOpfInfeasible(RuntimeError):
    pass


@dataclass
class DcOpfSolution:
    p_g: np.ndarray
    theta: np.ndarray
    objective_cost: float
    lam: np.ndarray
    mu_line_min: np.ndarray
    mu_line_max: np.ndarray
    mu_g_min: np.ndarray
    mu_g_max: np.ndarray
    warm: WarmStart | None = None

    def copy_with(self, **changes) -> "DcOpfSolution":
        d = dict(self.__dict__)
        d.update(changes)
        return DcOpfSolution(**d)


@dataclass(frozen=True)
class DcOpfLayout:
    """Variable and row positions inside the DC-OPF model."""

    p_g: np.ndarray
    phi: np.ndarray
    balance: np.ndarray
    line_max: np.ndarray  # row index per line, -1 when the line is unlimited
    line_min: np.ndarray
    gen_max: np.ndarray
    gen_min: np.ndarray


def _check_load(case: GridCase, load) -> np.ndarray:
    load = np.asarray(load, dtype=float)
    if load.shape != (case.n_loads,):
        raise ValueError(f"load vector must have length {case.n_loads}")
    if np.any(load < 0) or not np.all(np.isfinite(load)):
        raise ValueError("loads must be finite and nonnegative")
    return load


def build_dcopf(case: GridCase, load) -> tuple[LinearModel, DcOpfLayout]:
    load = _check_load(case, load)
    adm = case.admittance
    ns = case.nonslack_buses
    m = LinearModel("min", name=f"dcopf_{case.name}")
    pg = m.add_vars(case.n_gens, -INF, INF, prefix="pg")
    phi = m.add_vars(ns.size, -INF, INF, prefix="phi")
    demand = case.maps.load_map @ load
    gen_map = case.maps.gen_map
    balance = []
    for b in range(case.n_buses):
        terms = {int(pg[g]): 1.0 for g in np.flatnonzero(gen_map[b])}
        for k, bus in enumerate(ns):
            if adm.b_bus[b, bus] != 0:
                terms[int(phi[k])] = -adm.b_bus[b, bus]
        balance.append(m.add_constraint(terms, "=", demand[b], name=f"balance{b}"))

    def line_terms(ell):
        return {int(phi[k]): adm.b_line[ell, bus] for k, bus in enumerate(ns) if adm.b_line[ell, bus] != 0}

    line_max = np.full(case.n_lines, -1)
    line_min = np.full(case.n_lines, -1)
    for ell, ln in enumerate(case.lines):
        if math.isinf(ln.flow_limit):
            continue
        line_max[ell] = m.add_constraint(line_terms(ell), "<=", ln.flow_limit, name=f"line_max{ell}")
    for ell, ln in enumerate(case.lines):
        if math.isinf(ln.flow_limit):
            continue
        line_min[ell] = m.add_constraint(line_terms(ell), ">=", -ln.flow_limit, name=f"line_min{ell}")
    gen_max = np.array([m.add_constraint({int(pg[g]): 1.0}, "<=", gen.p_max, name=f"gen_max{g}") for g, gen in enumerate(case.gens)], dtype=int)
    gen_min = np.array([m.add_constraint({int(pg[g]): 1.0}, ">=", gen.p_min, name=f"gen_min{g}") for g, gen in enumerate(case.gens)], dtype=int)
    m.set_objective({int(pg[g]): gen.cost for g, gen in enumerate(case.gens)})
    m.seal()
    return m, DcOpfLayout(pg, phi, np.array(balance, dtype=int), line_max, line_min, gen_max, gen_min)


def _unpack(case: GridCase, layout: DcOpfLayout, res: SolveResult) -> DcOpfSolution:
    y = res.duals

    def pick(rows, sign):
        out = np.zeros(rows.size)
        ok = rows >= 0
        out[ok] = sign * y[rows[ok]] + 0.0  # no signed zeros
        return out

    theta = np.zeros(case.n_buses)
    theta[case.nonslack_buses] = res.x[layout.phi] / case.base_mva
    return DcOpfSolution(
        p_g=res.x[layout.p_g].copy(),
        theta=theta,
        objective_cost=float(res.objective),
        lam=-y[layout.balance] + 0.0,
        mu_line_min=pick(layout.line_min, 1.0),
        mu_line_max=pick(layout.line_max, -1.0),
        mu_g_min=y[layout.gen_min].copy(),
        mu_g_max=-y[layout.gen_max] + 0.0,
        warm=res.basis,
    )


class DcOpfSolver:
    """Repeated DC-OPF solves on one case; only the demand right-hand side changes.

    Consecutive solves are warm-started from the previous optimal basis.
    """

    def __init__(self, case: GridCase, warm_start: bool = True):
        self.case = case
        self.model, self.layout = build_dcopf(case, case.load_max)
        A, lo, hi = self.model.compiled()
        self._lo0, self._hi0 = lo.copy(), hi.copy()
        self.engine = SimplexEngine(A, lo.copy(), hi.copy())
        self.warm_start = warm_start
        self._warm: WarmStart | None = None

    def solve(self, load) -> DcOpfSolution:
        load = _check_load(self.case, load)
        demand = self.case.maps.load_map @ load
        lo, hi = self._lo0.copy(), self._hi0.copy()
        lo[self.layout.balance] = demand
        hi[self.layout.balance] = demand
        self.engine.row_lo, self.engine.row_hi = lo, hi
        warm = self._warm if self.warm_start else None
        if warm is not None:
            warm = WarmStart(warm.basis, warm.at_upper, warm.binv)
        res = _solve_with(self.engine, self.model, warm, None, None, 0.0)
        if res.status == Status.INFEASIBLE:
            raise DcOpfInfeasible(f"DC-OPF infeasible at total load {load.sum():.3f} MW")
        if res.status != Status.OPTIMAL:
            raise RuntimeError(f"DC-OPF solve ended with status {res.status.value}")
        self._warm = res.basis
        return _unpack(self.case, self.layout, res)


def solve_dcopf(case: GridCase, load, warm: WarmStart | None = None) -> DcOpfSolution:
    """Solve the DC-OPF at ``load`` [MW]. Raises :class:`DcOpfInfeasible`."""
    model, layout = build_dcopf(case, load)
    A, lo, hi = model.compiled()
    res = _solve_with(SimplexEngine(A, lo, hi), model, warm, None, None, 0.0)
    if res.status == Status.INFEASIBLE:
        raise DcOpfInfeasible(f"DC-OPF infeasible at total load {float(np.sum(load)):.3f} MW")
    if res.status != Status.OPTIMAL:
        raise RuntimeError(f"DC-OPF solve ended with status {res.status.value}")
    return _unpack(case, layout, res)


def kkt_residuals(case: GridCase, load, sol: DcOpfSolution) -> dict[str, float]:
    """Largest residual of each KKT condition group at ``sol`` (MW, $/h, $/MWh)."""
    load = np.asarray(load, dtype=float)
    adm = case.admittance
    ns = case.nonslack_buses
    gmap, dmap = case.maps.gen_map, case.maps.load_map
    F = case.flow_limit
    finite = np.isfinite(F)
    flows = case.base_mva * (adm.b_line @ sol.theta)

    stat_g = case.cost - sol.mu_g_min + sol.mu_g_max + gmap.T @ sol.lam
    stat_t = (-adm.b_line.T @ sol.mu_line_min + adm.b_line.T @ sol.mu_line_max - adm.b_bus @ sol.lam)[ns]
    stationarity = float(np.max(np.abs(np.concatenate([stat_g, stat_t])), initial=0.0))

    gap_lmin = np.where(finite, flows + np.where(finite, F, 0.0), 0.0)
    gap_lmax = np.where(finite, np.where(finite, F, 0.0) - flows, 0.0)
    cs = np.concatenate([
        sol.mu_line_min * gap_lmin,
        sol.mu_line_max * gap_lmax,
        sol.mu_g_min * (sol.p_g - case.p_min),
        sol.mu_g_max * (case.p_max - sol.p_g),
        # an unlimited line cannot carry a multiplier
        np.where(finite, 0.0, np.abs(sol.mu_line_min) + np.abs(sol.mu_line_max)),
    ])
    complementarity = float(np.max(np.abs(cs), initial=0.0))

    mus = np.concatenate([sol.mu_line_min, sol.mu_line_max, sol.mu_g_min, sol.mu_g_max])
    dual_feas = float(np.max(np.maximum(-mus, 0.0), initial=0.0))

    balance = gmap @ sol.p_g - dmap @ load - case.base_mva * (adm.b_bus @ sol.theta)
    line_v = np.where(finite, np.abs(flows) - np.where(finite, F, 0.0), 0.0)
    primal = np.concatenate([
        np.abs(balance),
        np.maximum(line_v, 0.0),
        np.maximum(case.p_min - sol.p_g, 0.0),
        np.maximum(sol.p_g - case.p_max, 0.0),
        [abs(sol.theta[case.slack_bus])],
    ])
    return {
        "stationarity": stationarity,
        "complementary_slackness": complementarity,
        "dual_feasibility": dual_feas,
        "primal_feasibility": float(np.max(primal)),
    }


def kkt_ok(residuals: dict[str, float], tol: float = 1e-6) -> bool:
    return all(v <= tol for v in residuals.values())
