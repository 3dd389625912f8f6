"""End-to-end acceptance checks; the terminal summary prints one PASS/FAIL line per criterion."""

import time

import numpy as np
import pytest

from conftest import TOY_COST, TOY_PMAX, TOY_PMIN, constant_net
from highs_oracle import solve_lp_text
from opfguard.dataset import empirical_worst_case, lhs_sample
from opfguard.dcopf import build_dcopf, kkt_ok, kkt_residuals, solve_dcopf
from opfguard.encode import compute_bounds, encode_network, interval_bounds, tighten_bounds
from opfguard.lp import Status, export_lp_format, solve_milp
from opfguard.metrics import METRICS, pointwise, to_display
from opfguard.mlp import TrainConfig, forward, init_network, mse_and_gradients, pre_activations, predict_dispatch, train
from opfguard.mlp import test_mae_percent as mae_percent
from opfguard.verify import Verifier, audit_big_m, domain_reduction_sweep, embed_dcopf_kkt, evaluate_at, metric_lipschitz

FIRST_RUN: dict[int, object] = {}


def crit(number, title):
    return pytest.mark.criterion(number, title)


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def net3x50(case9, ds9_10k):
    (net, log_), secs = timed(train, ds9_10k, case9, [50, 50, 50], TrainConfig(seed=0))
    return net, log_, secs


# -- 1 ---------------------------------------------------------------------------------

@crit(1, "DC-OPF KKT and external LP check")
def test_dcopf_kkt_and_external_solver(case9, domain):
    def run():
        worst_kkt, worst_rel = 0.0, 0.0
        for load in lhs_sample(case9, domain, 50, 2024):
            sol = solve_dcopf(case9, load)
            res = kkt_residuals(case9, load, sol)
            assert kkt_ok(res, 1e-6), res
            worst_kkt = max(worst_kkt, max(res.values()))
            model, _ = build_dcopf(case9, load)
            status, obj, _ = solve_lp_text(export_lp_format(model))
            assert status == "Optimal"
            worst_rel = max(worst_rel, abs(obj - sol.objective_cost) / abs(obj))
        return worst_kkt, worst_rel

    (worst_kkt, worst_rel), secs = timed(run)
    print(f"criterion 1: max KKT residual {worst_kkt:.2e}, max relative objective gap {worst_rel:.2e}, {secs:.1f}s")
    assert worst_rel <= 1e-6
    assert secs < 60


# -- 2 ---------------------------------------------------------------------------------

def run_encoding_exactness(net, case, domain):
    bounds = compute_bounds(net, case, domain)
    errors, nodes = [], 0
    for p in lhs_sample(case, domain, 100, 99):
        enc = encode_network(net, case, domain, bounds)
        for j, v in zip(enc.p_d, p):
            enc.model.set_bounds(int(j), v, v)
        enc.model.set_objective({int(enc.p_hat_ns[0]): 1.0}, "max")
        res = solve_milp(enc.model.seal())
        assert res.status == Status.OPTIMAL
        errors.append(np.max(np.abs(res.x[enc.p_hat_ns] - forward(net, p))))
        nodes += res.node_count
    return np.array(errors), nodes


@crit(2, "encoding exactness")
def test_encoding_exactness(net9_3x10, case9, domain):
    (errors, nodes), secs = timed(run_encoding_exactness, net9_3x10, case9, domain)
    FIRST_RUN[2] = (errors, nodes)
    print(f"criterion 2: max output error {errors.max():.2e} over 100 points, {nodes} nodes, {secs:.1f}s")
    assert errors.max() <= 1e-5
    assert secs < 300


# -- 3 ---------------------------------------------------------------------------------

def check_cascade(net, case, domain, milp_nodes):
    b0 = interval_bounds(net, case, domain)
    b1 = tighten_bounds(net, case, domain, b0, "lp_relax")
    b2 = tighten_bounds(net, case, domain, b1, "milp", max_nodes=milp_nodes)
    for k in range(len(b0.lo)):
        assert np.all(b0.lo[k] <= b1.lo[k]) and np.all(b1.lo[k] <= b2.lo[k])
        assert np.all(b0.hi[k] >= b1.hi[k]) and np.all(b1.hi[k] >= b2.hi[k])
    X = lhs_sample(case, domain, 10_000, 31)
    violations = 0
    for k, h in enumerate(pre_activations(net, X)):
        for b in (b0, b1, b2):
            violations += int(np.sum((h < b.lo[k]) | (h > b.hi[k])))
    width = [float(np.mean(b.hi[-1] - b.lo[-1])) for b in (b0, b1, b2)]
    print(f"criterion 3: {net.layers} last-layer mean width interval/lp/milp "
          f"{width[0]:.4g}/{width[1]:.4g}/{width[2]:.4g}, free neurons {b2.n_free}, {violations} violations")
    assert violations == 0


@crit(3, "bound cascade nesting and soundness")
def test_bound_cascade_small(net9_3x10, case9, domain):
    check_cascade(net9_3x10, case9, domain, None)


@crit(3, "bound cascade nesting and soundness")
def test_bound_cascade_large(net3x50, case9, domain):
    # node-capped MILP stage: the proven bound is kept, which is still valid
    check_cascade(net3x50[0], case9, domain, 200)


# -- 4 ---------------------------------------------------------------------------------

GRID = 300


def run_grid_oracle(net, case, domain):
    v = Verifier(net, case, domain, stability="certified")
    reps = v.run(("nu_g", "nu_line"))
    lo, hi = domain.box(case)
    axes = [np.linspace(lo[i], hi[i], GRID) for i in range(2)]
    P = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
    vals = pointwise(case, predict_dispatch(net, case, P), P)
    h = float(np.max((hi - lo) / (GRID - 1)))
    out = {}
    for k in ("nu_g", "nu_line"):
        out[k] = (float(vals[k].max()), reps[k].worst_case_value, metric_lipschitz(net, case, k) * h,
                  reps[k].node_count, reps[k].milp_gap, reps[k].stability)
    return out


@crit(4, "grid-search oracle on the 2-load case")
def test_grid_oracle(net2_3x10, case9_2load, domain):
    out, secs = timed(run_grid_oracle, net2_3x10, case9_2load, domain)
    FIRST_RUN[4] = out
    for k, (grid, milp, slack, nodes, gap, stab) in out.items():
        print(f"criterion 4: {k} grid {grid:.6g} <= MILP {milp:.6g} <= grid + L*h {grid + slack:.6g} "
              f"({nodes} nodes, gap {gap}, {stab})")
        assert gap == 0.0 and stab == "certified"
        assert grid <= milp + 1e-7
        assert milp <= grid + slack + 1e-7
    print(f"criterion 4: {secs:.1f}s")
    assert secs < 600


# -- 5 and 9 ---------------------------------------------------------------------------

@crit(9, "training quality of the 3x50 net")
def test_training_quality(net3x50, case9, ds9_10k):
    net, _, secs = net3x50
    X, Y = ds9_10k.test
    mae = mae_percent(net, case9, X, Y)
    sparsity = [float(np.mean(W == 0)) for W in net.weights]
    print(f"criterion 9: test MAE {mae:.4f}%, weight sparsity {min(sparsity):.2f}, training {secs:.1f}s")
    assert mae < 1.0
    assert secs < 900


@crit(5, "guarantees dominate empirical maxima")
def test_guarantee_dominance(net3x50, case9, domain, ds9_10k):
    net = net3x50[0]
    v = Verifier(net, case9, domain)
    reps = v.run(METRICS)
    emp = empirical_worst_case(ds9_10k, net, case9)
    for k in METRICS:
        rep = reps[k]
        rep.attach_empirical(to_display(k, emp[k][0], v.opt_norm if k == "nu_opt" else None))
        print(f"criterion 5: {k} guarantee {rep.worst_case_value:.6g} {rep.unit} >= empirical "
              f"{rep.empirical_lower_bound:.6g} (ratio {rep.ratio:.3f}, {rep.status}, {rep.wall_time:.1f}s)")
        assert rep.raw_value >= emp[k][0] - 1e-7
        assert rep.ratio >= 1.0 - 1e-9


# -- 6 ---------------------------------------------------------------------------------

def run_kkt_fidelity(net, case, domain):
    v = Verifier(net, case, domain)
    errors, nodes, min_slack = [], 0, np.inf
    for p in lhs_sample(case, domain, 20, 6):
        p_opt = solve_dcopf(case, p).p_g
        enc = v.encoding()
        kkt = embed_dcopf_kkt(enc.model, enc.p_d, case, big_m=1e5)
        for j, x in zip(enc.p_d, p):
            enc.model.set_bounds(int(j), x, x)
        enc.model.seal()
        for g in range(case.n_gens):
            for sense in ("min", "max"):
                res = solve_milp(enc.model.with_objective({int(kkt.p_g[g]): 1.0}, sense), priority=kkt.priority)
                assert res.status == Status.OPTIMAL
                errors.append(abs(res.objective - p_opt[g]))
                nodes += res.node_count
                min_slack = min(min_slack, audit_big_m(res.x, kkt).min_slack)
    return np.array(errors), nodes, float(min_slack)


@crit(6, "KKT embedding fidelity and big-M audit")
def test_kkt_fidelity(net9_3x10, case9, domain):
    (errors, nodes, min_slack), secs = timed(run_kkt_fidelity, net9_3x10, case9, domain)
    FIRST_RUN[6] = (errors, nodes, min_slack)
    print(f"criterion 6: max p_g error {errors.max():.2e} over 20 loads, min big-M slack {min_slack:.4g}, "
          f"{nodes} nodes, {secs:.1f}s")
    assert errors.max() <= 1e-5
    assert min_slack > 1e-6
    assert secs < 600


# -- 7 ---------------------------------------------------------------------------------

@crit(7, "toy closed form")
@pytest.mark.parametrize("d", [0.25, 4.0, 15.0])
def test_toy_closed_form(toy_case, domain, d):
    v = Verifier(constant_net(1, [TOY_PMIN + d]), toy_case, domain)
    dist = v.worst_case_distance().raw_value
    opt = v.worst_case_suboptimality().raw_value
    print(f"criterion 7: d={d}: nu_dist {dist:.9g} (expected {d / (TOY_PMAX - TOY_PMIN):.9g}), "
          f"raw nu_opt {opt:.9g} (expected {TOY_COST * d:.9g})")
    assert abs(dist - d / (TOY_PMAX - TOY_PMIN)) <= 1e-6
    assert abs(opt - TOY_COST * d) <= 1e-6


# -- 8 ---------------------------------------------------------------------------------

@crit(8, "domain-reduction sweep")
def test_delta_sweep(net9_3x10, case9, domain):
    deltas = [0.0, 0.04, 0.08, 0.12]
    res = domain_reduction_sweep(net9_3x10, case9, deltas, base=domain)
    for k in METRICS:
        vals = [res[d][k].worst_case_value for d in deltas]
        print(f"criterion 8: {k} " + ", ".join(f"{v:.6g}" for v in vals))
        assert all(b <= a + 1e-6 for a, b in zip(vals, vals[1:]))
    point = domain_reduction_sweep(net9_3x10, case9, [0.2], base=domain)[0.2]
    norm = Verifier(net9_3x10, case9, domain).opt_norm
    for k in METRICS:
        direct = evaluate_at(net9_3x10, case9, k, 0.8 * case9.load_max, norm)
        print(f"criterion 8: {k} at delta 0.2: {point[k].worst_case_value:.9g}, direct {direct:.9g}")
        assert point[k].worst_case_value == pytest.approx(direct, abs=1e-6)


# -- 10 --------------------------------------------------------------------------------

@crit(10, "gradient check")
def test_gradient_check():
    worst = 0.0
    eps = 1e-6
    for draw in range(20):
        rng = np.random.default_rng(1000 + draw)
        net = init_network([2, 3, 2], draw)
        W = [w.copy() for w in net.weights]
        b = [rng.normal(size=x.shape) * 0.1 for x in net.biases]
        xn, yn = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        _, gW, gb = mse_and_gradients(W, b, xn, yn)
        for params, grads in ((W, gW), (b, gb)):
            for p, g in zip(params, grads):
                for idx in np.ndindex(p.shape):
                    old = p[idx]
                    p[idx] = old + eps
                    up = mse_and_gradients(W, b, xn, yn)[0]
                    p[idx] = old - eps
                    dn = mse_and_gradients(W, b, xn, yn)[0]
                    p[idx] = old
                    fd = (up - dn) / (2 * eps)
                    worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
    print(f"criterion 10: max relative gradient error {worst:.2e} over 20 draws")
    assert worst <= 1e-4


# -- 11 --------------------------------------------------------------------------------

@crit(11, "determinism of criteria 2, 4 and 6")
def test_determinism(net9_3x10, net2_3x10, case9, case9_2load, domain):
    first = {
        2: FIRST_RUN.get(2) or run_encoding_exactness(net9_3x10, case9, domain),
        4: FIRST_RUN.get(4) or run_grid_oracle(net2_3x10, case9_2load, domain),
        6: FIRST_RUN.get(6) or run_kkt_fidelity(net9_3x10, case9, domain),
    }
    again = {
        2: run_encoding_exactness(net9_3x10, case9, domain),
        4: run_grid_oracle(net2_3x10, case9_2load, domain),
        6: run_kkt_fidelity(net9_3x10, case9, domain),
    }
    assert np.array_equal(first[2][0], again[2][0]) and first[2][1] == again[2][1]
    assert first[4] == again[4]
    assert np.array_equal(first[6][0], again[6][0]) and first[6][1:] == again[6][1:]
    print(f"criterion 11: identical values and node counts ({first[2][1]}, "
          f"{[v[3] for v in first[4].values()]}, {first[6][1]})")
