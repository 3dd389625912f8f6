"""Worst-case guarantees over the whole input domain.

Every metric is a maximum of affine terms in the MILP variables. By default
each term gets its own MILP, solved with the best value found so far as a
cutoff, so most terms are closed at the root. The KKT-embedded metrics add the
DC-OPF primal and dual variables with big-M complementarity rows.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .dataset import InputDomain, lhs_sample, opt_reference_cost
from .dcopf import DcOpfInfeasible, DcOpfSolver, solve_dcopf
from .encode import NetworkEncoding, NeuronBounds, compute_bounds, encode_network
from .grid import GridCase, bus_injections, line_flows
from .lp import LinearModel, Status, solve_milp
from .lp.model import INF, relative_gap
from .mlp import MlpNetwork, lipschitz_bound, predict_dispatch

log = logging.getLogger(__name__)

DEFAULT_BIG_M = 1e5
AUDIT_TOL = 1e-6
MAX_M_RETRIES = 3
LIMIT_STATUSES = (Status.TIME_LIMIT, Status.NODE_LIMIT)
MAX_CORNER_LOADS = 10


class VerificationError(RuntimeError):
    pass


class InfeasibleVerification(VerificationError):
    """The verification MILP has no feasible point."""


@dataclass
class SolverOptions:
    gap_tol: float = 0.0
    time_limit: float | None = None
    max_nodes: int | None = None
    single_milp: bool = False
    big_m: float = DEFAULT_BIG_M


@dataclass
class TermResult:
    label: dict
    status: str
    value: float | None
    bound: float
    nodes: int
    wall_time: float


@dataclass
class BigMAudit:
    big_m: float
    min_slack: float
    slacks: list[float]
    labels: list[str]

    @property
    def passed(self) -> bool:
        return self.min_slack > AUDIT_TOL


@dataclass
class VerificationReport:
    metric: str
    unit: str
    worst_case_value: float
    raw_value: float
    upper_bound: float
    maximizer_load: list[float]
    milp_gap: float
    status: str
    node_count: int
    wall_time: float
    breakdown: dict
    terms: list[TermResult] = field(default_factory=list)
    stability: str = "certified"
    boundary_fraction: float = math.nan
    empirical_lower_bound: float | None = None
    ratio: float | None = None
    audit: BigMAudit | None = None

    @property
    def exact(self) -> bool:
        return self.status == Status.OPTIMAL.value and self.milp_gap == 0.0

    def attach_empirical(self, value: float) -> None:
        self.empirical_lower_bound = value
        self.ratio = self.worst_case_value / value if value > 0 else (1.0 if self.worst_case_value == 0 else math.inf)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["maximizer_load"] = list(map(float, self.maximizer_load))
        return d


# -- KKT embedding -------------------------------------------------------------------

@dataclass
class KktLayout:
    p_g: np.ndarray
    phi: np.ndarray
    lam: np.ndarray
    mu_line_min: np.ndarray  # -1 for unlimited lines
    mu_line_max: np.ndarray
    mu_g_min: np.ndarray
    mu_g_max: np.ndarray
    # (primal slack terms, constant, mu index, r index, label, primal M); slack = terms.x + constant >= 0
    pairs: list = field(default_factory=list)
    big_m: float = DEFAULT_BIG_M

    @property
    def priority(self) -> dict[int, int]:
        # fixing the complementarity indicators first pins the dispatch to an
        # affine function of the load, which keeps the tree small
        return {int(p[3]): 1 for p in self.pairs}


def embed_dcopf_kkt(m: LinearModel, p_d: np.ndarray, case: GridCase, big_m: float = DEFAULT_BIG_M, tight_primal: bool = True) -> KktLayout:
    """Add DC-OPF primal feasibility, stationarity and linearised complementarity rows.

    ``big_m`` bounds the multipliers. With ``tight_primal`` the primal side of
    each pair uses the row's feasible width instead when that is smaller.
    """
    adm = case.admittance
    ns = case.nonslack_buses
    gmap, dmap = case.maps.gen_map, case.maps.load_map
    pg = m.add_vars(case.n_gens, -INF, INF, prefix="pg")
    phi = m.add_vars(ns.size, -INF, INF, prefix="phi")
    lam = m.add_vars(case.n_buses, -INF, INF, prefix="lam")
    finite = np.isfinite(case.flow_limit)
    mu_lmin = np.full(case.n_lines, -1)
    mu_lmax = np.full(case.n_lines, -1)
    for ell in np.flatnonzero(finite):
        mu_lmin[ell] = m.add_var(0.0, INF, name=f"mu_line_min{ell}")
        mu_lmax[ell] = m.add_var(0.0, INF, name=f"mu_line_max{ell}")
    mu_gmin = m.add_vars(case.n_gens, 0.0, INF, prefix="mu_g_min")
    mu_gmax = m.add_vars(case.n_gens, 0.0, INF, prefix="mu_g_max")

    # nodal balance: M_g p_g - B phi - M_d p_d = 0
    for b in range(case.n_buses):
        terms = {int(pg[g]): 1.0 for g in np.flatnonzero(gmap[b])}
        for k, bus in enumerate(ns):
            if adm.b_bus[b, bus] != 0:
                terms[int(phi[k])] = -adm.b_bus[b, bus]
        for j in np.flatnonzero(dmap[b]):
            terms[int(p_d[j])] = terms.get(int(p_d[j]), 0.0) - 1.0
        m.add_constraint(terms, "=", 0.0, name=f"kkt_balance{b}")

    def flow(ell):
        return {int(phi[k]): adm.b_line[ell, bus] for k, bus in enumerate(ns) if adm.b_line[ell, bus] != 0}

    for ell in np.flatnonzero(finite):
        m.add_constraint(flow(ell), "<=", case.flow_limit[ell], name=f"kkt_line_max{ell}")
        m.add_constraint(flow(ell), ">=", -case.flow_limit[ell], name=f"kkt_line_min{ell}")
    for g, gen in enumerate(case.gens):
        m.add_constraint({int(pg[g]): 1.0}, "<=", gen.p_max, name=f"kkt_gen_max{g}")
        m.add_constraint({int(pg[g]): 1.0}, ">=", gen.p_min, name=f"kkt_gen_min{g}")

    # stationarity in p_g: c - mu_min + mu_max + M_g' lam = 0
    for g, gen in enumerate(case.gens):
        terms = {int(mu_gmin[g]): -1.0, int(mu_gmax[g]): 1.0, int(lam[gen.bus]): 1.0}
        m.add_constraint(terms, "=", -gen.cost, name=f"kkt_stat_g{g}")
    # stationarity in theta (non-slack): -B_l' mu_min + B_l' mu_max - B_bus lam = 0
    for bus in ns:
        terms: dict[int, float] = {}
        for ell in np.flatnonzero(finite):
            a = adm.b_line[ell, bus]
            if a != 0:
                terms[int(mu_lmin[ell])] = -a
                terms[int(mu_lmax[ell])] = a
        for i in range(case.n_buses):
            if adm.b_bus[i, bus] != 0:
                terms[int(lam[i])] = terms.get(int(lam[i]), 0.0) - adm.b_bus[bus, i]
        m.add_constraint(terms, "=", 0.0, name=f"kkt_stat_theta{bus}")

    lay = KktLayout(pg, phi, lam, mu_lmin, mu_lmax, mu_gmin, mu_gmax, [], big_m)

    def pair(slack_terms, const, mu, label, m_primal):
        # r = 1: the row may be slack and the multiplier is zero; r = 0: the row is tight
        r = m.add_var(0.0, 1.0, name=f"fam_{label}", binary=True)
        m.add_constraint(_merge(slack_terms, {r: -m_primal}), "<=", -const, big_m=True, name=f"fam_p_{label}")
        m.add_constraint({mu: 1.0, r: big_m}, "<=", big_m, big_m=True, name=f"fam_d_{label}")
        lay.pairs.append((slack_terms, const, mu, r, label, m_primal))
        return r

    # a primal slack never exceeds the width of its feasible interval, so that
    # width is a valid primal-side constant whenever it is below big_m
    for ell in np.flatnonzero(finite):
        F = case.flow_limit[ell]
        f = flow(ell)
        mp = min(big_m, 2 * F) if tight_primal else big_m
        r1 = pair(f, F, int(mu_lmin[ell]), f"line_min{ell}", mp)  # slack = flow + F
        r2 = pair({j: -c for j, c in f.items()}, F, int(mu_lmax[ell]), f"line_max{ell}", mp)  # slack = F - flow
        # both limits of a line cannot be tight at once
        m.add_constraint({r1: 1.0, r2: 1.0}, ">=", 1.0, name=f"fam_line_pair{ell}")
    for g, gen in enumerate(case.gens):
        span = gen.p_max - gen.p_min
        mp = min(big_m, span) if (tight_primal and span > 0) else big_m
        r1 = pair({int(pg[g]): 1.0}, -gen.p_min, int(mu_gmin[g]), f"gen_min{g}", mp)
        r2 = pair({int(pg[g]): -1.0}, gen.p_max, int(mu_gmax[g]), f"gen_max{g}", mp)
        if span > 0:
            m.add_constraint({r1: 1.0, r2: 1.0}, ">=", 1.0, name=f"fam_gen_pair{g}")
    return lay


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0.0) + v
    return out


def audit_big_m(x: np.ndarray, layout: KktLayout) -> BigMAudit:
    """Distance of each complementarity row's big-M side from binding at ``x``."""
    M = layout.big_m
    slacks, labels = [], []
    for terms, const, mu, r, label, m_primal in layout.pairs:
        primal = sum(c * x[j] for j, c in terms.items()) + const
        if x[r] > 0.5:
            # a width-derived constant can be met with equality without cutting anything off
            slacks.append(M - primal if m_primal >= M else M)
        else:
            slacks.append(M - x[mu])
        labels.append(label)
    return BigMAudit(M, float(min(slacks, default=M)), slacks, labels)


def audit_dcopf_point(case: GridCase, p_d, big_m: float) -> BigMAudit:
    """Big-M audit for the KKT point of the DC-OPF solved at ``p_d``.

    Each pair takes the admissible indicator value: slack side (r = 1) when
    the multiplier is zero, tight side (r = 0) otherwise.
    """
    sol = solve_dcopf(case, p_d)
    flows = case.base_mva * (case.admittance.b_line @ sol.theta)
    slacks, labels = [], []

    def add(primal, mu, width, label):
        # same convention as audit_big_m: a width-capped primal side never binds
        if mu <= 0:
            slacks.append(big_m - primal if width >= big_m else big_m)
        else:
            slacks.append(big_m - mu)
        labels.append(label)

    for ell, F in enumerate(case.flow_limit):
        if math.isfinite(F):
            add(flows[ell] + F, sol.mu_line_min[ell], 2 * F, f"line_min{ell}")
            add(F - flows[ell], sol.mu_line_max[ell], 2 * F, f"line_max{ell}")
    for g in range(case.n_gens):
        span = case.p_max[g] - case.p_min[g]
        add(sol.p_g[g] - case.p_min[g], sol.mu_g_min[g], span, f"gen_min{g}")
        add(case.p_max[g] - sol.p_g[g], sol.mu_g_max[g], span, f"gen_max{g}")
    return BigMAudit(big_m, float(min(slacks, default=big_m)), slacks, labels)


# -- per-term worst-case search ---------------------------------------------------------

@dataclass
class Term:
    terms: dict
    const: float
    label: dict
    scale: float = 1.0  # raw metric = scale * (terms.x + const)
    # same term evaluated on sampled points (dict of arrays), for seeding the search
    ev: object = field(default=None, repr=False)


@dataclass
class Incumbent:
    value: float
    p_d: np.ndarray
    label: dict
    x: np.ndarray | None = None  # full MILP point when found by the solver


def _expr_bounds(model: LinearModel, t: Term) -> tuple[float, float]:
    lb, ub = model.lb, model.ub
    lo = hi = t.const
    for j, c in t.terms.items():
        if c > 0:
            lo += c * lb[j]
            hi += c * ub[j]
        else:
            lo += c * ub[j]
            hi += c * lb[j]
    return lo * t.scale, hi * t.scale


def _scaled(t: Term) -> tuple[dict, float]:
    return {j: c * t.scale for j, c in t.terms.items()}, t.const * t.scale


def _search(model: LinearModel, candidates: list[Term], floor: float | None, opts: SolverOptions, p_d_idx, seed: Incumbent | None = None, priority=None):
    """Max over candidate terms (and ``floor`` when given), one MILP per term.

    ``seed`` is a value attained at a known point; it serves as the initial
    cutoff so terms that cannot beat it are closed at the root.
    """
    model.seal()
    inc = seed
    best = -INF if floor is None else floor
    if inc is not None and inc.value > best:
        best = inc.value
    elif inc is not None:
        inc = None
    upper = best
    status = Status.OPTIMAL
    logs, nodes = [], 0
    t_start = time.perf_counter()
    for t in candidates:
        terms, const = _scaled(t)
        t0 = time.perf_counter()
        remaining = None
        if opts.time_limit is not None:
            remaining = max(0.0, opts.time_limit - (t0 - t_start))
        res = solve_milp(
            model.with_objective(terms, "max", const),
            gap_tol=opts.gap_tol, time_limit=remaining, max_nodes=opts.max_nodes,
            cutoff=None if math.isinf(best) else best, priority=priority,
        )
        nodes += res.node_count
        if res.status == Status.INFEASIBLE:
            raise InfeasibleVerification(f"verification MILP infeasible for term {t.label}")
        if res.status == Status.UNBOUNDED:
            raise VerificationError(f"verification MILP unbounded for term {t.label}")
        val = res.objective if res.x is not None else None
        if val is not None and val > best:
            best = val
            inc = Incumbent(val, res.x[p_d_idx].copy(), t.label, res.x)
        if res.status in LIMIT_STATUSES:
            status = res.status
            upper = max(upper, res.best_bound)
        logs.append(TermResult(t.label, res.status.value, val, float(res.best_bound), res.node_count, time.perf_counter() - t0))
    upper = max(upper, best)
    return best, upper, inc, logs, status, nodes


def _disjunctive(model: LinearModel, candidates: list[Term], floor: float | None, opts: SolverOptions, p_d_idx, seed=None, priority=None):
    """Single MILP: max t with t <= term_j + U_j (1 - y_j), one y_j selected."""
    m = model.copy()
    all_terms = list(candidates)
    if floor is not None:
        all_terms.append(Term({}, floor, {"floor": True}))
    bnds = [_expr_bounds(model, t) for t in all_terms]
    top = max(b[1] for b in bnds)
    if not math.isfinite(top):
        raise VerificationError("single-MILP mode needs finite bounds on every term")
    t_var = m.add_var(-INF, top, name="t")
    ys = [m.add_var(0.0, 1.0, name=f"y{i}", binary=True) for i in range(len(all_terms))]
    for t, (lo, _), y in zip(all_terms, bnds, ys):
        U = top - lo
        terms, const = _scaled(t)
        # t - terms.x + U y <= const + U
        m.add_constraint(_merge({t_var: 1.0, y: U}, {j: -c for j, c in terms.items()}), "<=", const + U, big_m=True)
    m.add_constraint({y: 1.0 for y in ys}, "=", 1.0)
    m.set_objective({t_var: 1.0}, "max")
    m.seal()
    t0 = time.perf_counter()
    res = solve_milp(m, gap_tol=opts.gap_tol, time_limit=opts.time_limit, max_nodes=opts.max_nodes, priority=priority)
    if res.status == Status.INFEASIBLE:
        raise InfeasibleVerification("single-MILP verification is infeasible")
    if res.x is None:
        raise VerificationError(f"single-MILP verification ended with status {res.status.value}")
    chosen = int(np.argmax([res.x[y] for y in ys]))
    logs = [TermResult({"single_milp": True}, res.status.value, res.objective, float(res.best_bound), res.node_count, time.perf_counter() - t0)]
    status = res.status if res.status in LIMIT_STATUSES else Status.OPTIMAL
    x = res.x[: model.n_vars]
    inc = Incumbent(res.objective, x[p_d_idx].copy(), all_terms[chosen].label, x)
    return res.objective, max(res.best_bound, res.objective), inc, logs, status, res.node_count


# -- public API -------------------------------------------------------------------------

class Verifier:
    """Worst-case metrics for one network over one domain.

    Bounds are computed once (or passed in); each metric builds its own model
    on top of a fresh network encoding.
    """

    def __init__(
        self,
        net: MlpNetwork,
        case: GridCase,
        domain: InputDomain,
        bounds: NeuronBounds | None = None,
        stability: str = "certified",
        dataset_inputs=None,
        options: SolverOptions | None = None,
        opt_norm: float | None = None,
        bound_max_nodes: int | None = 200,
        seed_samples: int = 2000,
    ):
        self.net, self.case, self.domain = net, case, domain
        # sampled points seed each search with an attained value; -1 disables seeding
        self.seed_samples = seed_samples
        self._sample_cache: dict = {}
        self.options = options or SolverOptions()
        if bounds is None:
            inputs = None
            if dataset_inputs is not None:
                inputs = np.asarray(dataset_inputs)
                inputs = inputs[domain.contains(case, inputs)]
            bounds = compute_bounds(net, case, domain, stability=stability, dataset_inputs=inputs, max_nodes=bound_max_nodes)
        self.bounds = bounds
        self.stability = bounds.source
        self._opt_norm = opt_norm

    @property
    def opt_norm(self) -> float:
        if self._opt_norm is None:
            self._opt_norm = opt_reference_cost(self.case)
        return self._opt_norm

    def encoding(self) -> NetworkEncoding:
        return encode_network(self.net, self.case, self.domain, self.bounds)

    # -- term lists
    def _gen_terms(self, enc) -> list[Term]:
        out = []
        for g, gen in enumerate(self.case.gens):
            v = int(enc.p_hat[g])
            out.append(Term({v: 1.0}, -gen.p_max, {"generator": g, "side": "max"},
                            ev=lambda S, g=g, u=gen.p_max: S["p_hat"][:, g] - u))
            out.append(Term({v: -1.0}, gen.p_min, {"generator": g, "side": "min"},
                            ev=lambda S, g=g, l=gen.p_min: l - S["p_hat"][:, g]))
        return out

    def _line_terms(self, enc) -> list[Term]:
        case = self.case
        ptdf = case.admittance.ptdf
        ns = case.nonslack_buses
        gmap, dmap = case.maps.gen_map[ns], case.maps.load_map[ns]
        out = []
        for ell in range(case.n_lines):
            F = case.flow_limit[ell]
            if math.isinf(F):
                continue
            cg = ptdf[ell] @ gmap  # per generator
            cd = -(ptdf[ell] @ dmap)  # per load
            expr: dict[int, float] = {}
            for g in range(case.n_gens):
                if cg[g] != 0:
                    expr[int(enc.p_hat[g])] = expr.get(int(enc.p_hat[g]), 0.0) + cg[g]
            for j in range(case.n_loads):
                if cd[j] != 0:
                    expr[int(enc.p_d[j])] = expr.get(int(enc.p_d[j]), 0.0) + cd[j]
            out.append(Term(dict(expr), -F, {"line": ell, "side": "from_to"},
                            ev=lambda S, ell=ell, F=F: S["flows"][:, ell] - F))
            out.append(Term({j: -c for j, c in expr.items()}, -F, {"line": ell, "side": "to_from"},
                            ev=lambda S, ell=ell, F=F: -S["flows"][:, ell] - F))
        return out

    def _dist_terms(self, enc, kkt) -> list[Term]:
        out = []
        for g, gen in enumerate(self.case.gens):
            span = gen.p_max - gen.p_min
            if span <= 0:
                log.warning("generator %d has p_min == p_max; excluded from nu_dist", g)
                continue
            a, b = int(enc.p_hat[g]), int(kkt.p_g[g])
            out.append(Term({a: 1.0, b: -1.0}, 0.0, {"generator": g, "side": "over"}, 1.0 / span,
                            ev=lambda S, g=g, s=span: (S["p_hat"][:, g] - S["p_opt"][:, g]) / s))
            out.append(Term({a: -1.0, b: 1.0}, 0.0, {"generator": g, "side": "under"}, 1.0 / span,
                            ev=lambda S, g=g, s=span: (S["p_opt"][:, g] - S["p_hat"][:, g]) / s))
        return out

    def _opt_terms(self, enc, kkt) -> list[Term]:
        terms: dict[int, float] = {}
        for g, gen in enumerate(self.case.gens):
            if gen.cost != 0:
                terms[int(enc.p_hat[g])] = terms.get(int(enc.p_hat[g]), 0.0) + gen.cost
                terms[int(kkt.p_g[g])] = terms.get(int(kkt.p_g[g]), 0.0) - gen.cost
        cost = self.case.cost
        return [Term(terms, 0.0, {"objective": "cost_gap"}, ev=lambda S: (S["p_hat"] - S["p_opt"]) @ cost)]

    # -- runners
    def _samples(self, with_opt: bool) -> dict:
        """Forward-pass data on LHS points, box corners and the box centre."""
        if self._sample_cache.get(with_opt) is not None:
            return self._sample_cache[with_opt]
        case, dom = self.case, self.domain
        lo, hi = dom.box(case)
        pts = [lo[None, :], hi[None, :], (0.5 * (lo + hi))[None, :]]
        if self.seed_samples > 0:
            box = InputDomain(dom.lower, dom.upper)
            pts.append(lhs_sample(case, box, self.seed_samples, 0))
        if case.n_loads <= MAX_CORNER_LOADS:
            corners = np.array(np.meshgrid(*[[a, b] for a, b in zip(lo, hi)], indexing="ij")).reshape(case.n_loads, -1).T
            pts.append(corners)
        P = np.vstack(pts)
        P = P[dom.contains(case, P)]
        S = {"p_d": P, "p_hat": predict_dispatch(self.net, case, P)}
        S["flows"] = line_flows(case.admittance, bus_injections(case, S["p_hat"], P))
        if with_opt:
            solver = DcOpfSolver(case)
            keep, opt = [], []
            for i, p in enumerate(P):
                try:
                    opt.append(solver.solve(p).p_g)
                    keep.append(i)
                except DcOpfInfeasible:
                    pass
            S = {k: v[keep] for k, v in S.items()}
            S["p_opt"] = np.array(opt).reshape(-1, case.n_gens)
        self._sample_cache[with_opt] = S
        return S

    def _seed(self, candidates: list[Term], with_opt: bool) -> tuple[list[Term], Incumbent | None]:
        """Order terms by their best sampled value and return the best sample as incumbent."""
        if self.seed_samples < 0 or not candidates or any(t.ev is None for t in candidates):
            return candidates, None
        S = self._samples(with_opt)
        if len(S["p_d"]) == 0:
            return candidates, None
        vals = np.array([t.ev(S) for t in candidates])  # terms x samples
        top = vals.max(axis=1)
        order = np.argsort(-top, kind="stable")
        j = int(order[0])
        i = int(np.argmax(vals[j]))
        return [candidates[k] for k in order], Incumbent(float(vals[j, i]), S["p_d"][i].copy(), candidates[j].label)

    def _run(self, metric, enc, candidates, floor, kkt=None) -> VerificationReport:
        t0 = time.perf_counter()
        prio = kkt.priority if kkt is not None else None
        if self.options.single_milp:
            best, upper, inc, logs, status, nodes = _disjunctive(enc.model, candidates, floor, self.options, enc.p_d, priority=prio)
        else:
            ordered, seed = self._seed(candidates, kkt is not None)
            best, upper, inc, logs, status, nodes = _search(enc.model, ordered, floor, self.options, enc.p_d, seed, prio)
        if inc is None:
            # nothing beats the floor anywhere, so every point attains it
            p_star, label = self.domain.box(self.case)[0], {"none": True}
        else:
            p_star, label = inc.p_d, inc.label
        audit = None
        if kkt is not None:
            if inc is not None and inc.x is not None:
                audit = audit_big_m(inc.x, kkt)
            else:
                audit = audit_dcopf_point(self.case, p_star, kkt.big_m)
        opt_norm = self.opt_norm if metric == "nu_opt" else None
        gap = 0.0 if (status == Status.OPTIMAL and self.options.gap_tol == 0) else relative_gap(upper, best)
        return VerificationReport(
            metric=metric,
            unit=metrics.UNITS[metric],
            worst_case_value=metrics.to_display(metric, best, opt_norm),
            raw_value=float(best),
            upper_bound=metrics.to_display(metric, upper, opt_norm),
            maximizer_load=np.asarray(p_star, dtype=float).tolist(),
            milp_gap=float(gap),
            status=status.value,
            node_count=int(nodes),
            wall_time=time.perf_counter() - t0,
            breakdown=label,
            terms=logs,
            stability=self.stability,
            boundary_fraction=self._boundary_fraction(p_star),
            audit=audit,
        )

    def _boundary_fraction(self, p) -> float:
        lo, hi = self.domain.box(self.case)
        tol = 1e-6 * np.maximum(1.0, np.abs(hi))
        at = (np.abs(np.asarray(p) - lo) <= tol) | (np.abs(np.asarray(p) - hi) <= tol)
        return float(np.mean(at)) if len(at) else math.nan

    def worst_case_generation(self) -> VerificationReport:
        enc = self.encoding()
        return self._run("nu_g", enc, self._gen_terms(enc), 0.0)

    def worst_case_line(self) -> VerificationReport:
        enc = self.encoding()
        return self._run("nu_line", enc, self._line_terms(enc), 0.0)

    def _kkt_metric(self, metric: str) -> VerificationReport:
        big_m = self.options.big_m
        for attempt in range(MAX_M_RETRIES + 1):
            enc = self.encoding()
            kkt = embed_dcopf_kkt(enc.model, enc.p_d, self.case, big_m)
            try:
                if metric == "nu_dist":
                    rep = self._run(metric, enc, self._dist_terms(enc, kkt), 0.0, kkt)
                else:
                    rep = self._run(metric, enc, self._opt_terms(enc, kkt), None, kkt)
            except InfeasibleVerification:
                # the domain always has a KKT point, so M is cutting every one of them off
                log.warning("%s: KKT model infeasible at big-M %.3g; re-solving with %.3g", metric, big_m, 10 * big_m)
                big_m *= 10
                continue
            if rep.audit is None or rep.audit.passed:
                return rep
            log.warning("%s: big-M constant %.3g binding (min slack %.3g); re-solving with %.3g",
                        metric, big_m, rep.audit.min_slack, 10 * big_m)
            big_m *= 10
        raise VerificationError(f"{metric}: big-M audit still failing at M={big_m / 10:.3g}")

    def worst_case_distance(self) -> VerificationReport:
        return self._kkt_metric("nu_dist")

    def worst_case_suboptimality(self) -> VerificationReport:
        return self._kkt_metric("nu_opt")

    def run(self, which=metrics.METRICS) -> dict[str, VerificationReport]:
        fns = {
            "nu_g": self.worst_case_generation,
            "nu_line": self.worst_case_line,
            "nu_dist": self.worst_case_distance,
            "nu_opt": self.worst_case_suboptimality,
        }
        return {k: fns[k]() for k in which}


def evaluate_at(net: MlpNetwork, case: GridCase, metric: str, p_d, opt_norm: float | None = None) -> float:
    """Metric at one load vector, in display units, by forward pass (and DC-OPF solve)."""
    p_d = np.asarray(p_d, dtype=float)
    p_hat = predict_dispatch(net, case, p_d)
    p_opt = None
    if metric in ("nu_dist", "nu_opt"):
        p_opt = solve_dcopf(case, p_d).p_g
    raw = float(metrics.pointwise(case, p_hat, p_d[None, :], p_opt)[metric][0])
    return metrics.to_display(metric, raw, opt_norm)


def domain_reduction_sweep(
    net: MlpNetwork,
    case: GridCase,
    deltas,
    base: InputDomain | None = None,
    which=metrics.METRICS,
    stability: str = "certified",
    dataset_inputs=None,
    options: SolverOptions | None = None,
) -> dict[float, dict[str, VerificationReport]]:
    """Rebuild bounds and encodings on each shrunk box and verify every metric."""
    deltas = list(deltas)
    if not deltas:
        raise ValueError("empty delta list")
    if any(d < 0 or d > 0.2 + 1e-12 for d in deltas):
        raise ValueError("delta values must lie in [0, 0.2]")
    base = base or InputDomain()
    opt_norm = opt_reference_cost(case) if "nu_opt" in which else None
    out = {}
    for d in deltas:
        dom = base.shrink(d)
        v = Verifier(net, case, dom, stability=stability, dataset_inputs=dataset_inputs, options=options, opt_norm=opt_norm)
        out[d] = v.run(which)
    return out


def normalised_sweep(results: dict[float, dict[str, VerificationReport]]) -> dict[float, dict[str, float]]:
    """Values as percent of the smallest-delta entry (100 at the reference)."""
    ref_d = min(results)
    out = {}
    for d, reps in results.items():
        out[d] = {}
        for k, r in reps.items():
            ref = results[ref_d][k].worst_case_value
            out[d][k] = 100.0 * r.worst_case_value / ref if ref > 0 else (100.0 if r.worst_case_value == 0 else math.inf)
    return out


def metric_lipschitz(net: MlpNetwork, case: GridCase, metric: str) -> float:
    """Bound on the metric's change per unit change of ``|p_d|_inf`` (nu_g, nu_line)."""
    L = lipschitz_bound(net)
    n_ns = len(case.nonslack_gens)
    l_slack = case.n_loads + n_ns * L
    if metric == "nu_g":
        return max(L, l_slack)
    if metric == "nu_line":
        ns = case.nonslack_buses
        gmap, dmap = case.maps.gen_map[ns], case.maps.load_map[ns]
        per_gen = np.full(case.n_gens, L)
        per_gen[case.slack_gen] = l_slack
        per_bus = gmap @ per_gen + dmap @ np.ones(case.n_loads)
        return float(np.max(np.abs(case.admittance.ptdf) @ per_bus, initial=0.0))
    raise ValueError(f"no Lipschitz bound for {metric}")
