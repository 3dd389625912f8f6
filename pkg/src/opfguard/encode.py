"""Big-M MILP encoding of a trained ReLU network and pre-activation bounds.

Per free neuron with pre-activation ``zh = w'z_prev + b`` in ``[lo, hi]``::

    z <= zh - lo (1 - r),   z >= zh,   z <= hi r,   z >= 0,   r binary

Neurons whose bounds prove a fixed phase are encoded without a binary:
``z = zh`` when ``lo >= 0`` and ``z = 0`` (no variable at all) when
``hi <= 0``. Pre-activations are never materialised as variables; every row
is written directly in terms of the previous layer's ``z``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import InputDomain
from .fileio import atomic_write_json
from .grid import GridCase, case_to_dict
from .lp import LinearModel, Status, solve_milp
from .lp.model import INF
from .lp.simplex import SimplexEngine
from .mlp import MlpNetwork, folded_layers, net_to_dict, pre_activations

log = logging.getLogger(__name__)

FREE, ACTIVE, INACTIVE = 0, 1, -1
# outward padding on solver-derived bounds, relative to max(1, |bound|)
BOUND_PAD = 1e-8
STAGES = ("interval", "lp_relax", "milp")


class EncodingError(RuntimeError):
    pass


@dataclass
class NeuronBounds:
    lo: list[np.ndarray]
    hi: list[np.ndarray]
    provenance: list[list[str]]
    stability: list[np.ndarray]
    # "certified": fixed phases are proven by the bounds; "dataset": some were inferred from samples
    source: str = "certified"

    def copy(self) -> "NeuronBounds":
        return NeuronBounds(
            [a.copy() for a in self.lo], [a.copy() for a in self.hi],
            [list(p) for p in self.provenance], [s.copy() for s in self.stability], self.source,
        )

    @property
    def n_free(self) -> int:
        return int(sum(np.sum(s == FREE) for s in self.stability))

    def counts(self) -> dict[str, int]:
        st = np.concatenate(self.stability) if self.stability else np.zeros(0)
        return {"free": int(np.sum(st == FREE)), "active": int(np.sum(st == ACTIVE)), "inactive": int(np.sum(st == INACTIVE))}

    def promote(self) -> None:
        """Fix every neuron whose bounds prove its phase."""
        for k in range(len(self.lo)):
            s = self.stability[k]
            s[(s == FREE) & (self.lo[k] >= 0)] = ACTIVE
            s[(s == FREE) & (self.hi[k] <= 0)] = INACTIVE

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "layers": [
                {"lo": lo.tolist(), "hi": hi.tolist(), "provenance": prov, "stability": st.astype(int).tolist()}
                for lo, hi, prov, st in zip(self.lo, self.hi, self.provenance, self.stability)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeuronBounds":
        L = d["layers"]
        return cls(
            [np.array(x["lo"], dtype=float) for x in L], [np.array(x["hi"], dtype=float) for x in L],
            [list(x["provenance"]) for x in L], [np.array(x["stability"], dtype=int) for x in L], d.get("source", "certified"),
        )


def interval_bounds(net: MlpNetwork, case: GridCase, domain: InputDomain) -> NeuronBounds:
    Ws, bs = folded_layers(net)
    lo_in, hi_in = domain.box(case)
    lo, hi = lo_in, hi_in
    out_lo, out_hi, prov, stab = [], [], [], []
    for W, b in zip(Ws[:-1], bs[:-1]):
        Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
        zl = Wp @ lo + Wn @ hi + b
        zu = Wp @ hi + Wn @ lo + b
        out_lo.append(zl)
        out_hi.append(zu)
        prov.append(["interval"] * len(b))
        stab.append(np.zeros(len(b), dtype=int))
        lo, hi = np.maximum(zl, 0.0), np.maximum(zu, 0.0)
    nb = NeuronBounds(out_lo, out_hi, prov, stab)
    nb.promote()
    return nb


def stability_from_dataset(net: MlpNetwork, inputs) -> list[np.ndarray]:
    """Phase flags from the sign pattern of every pre-activation over the samples."""
    pres = pre_activations(net, inputs)
    out = []
    for h in pres:
        s = np.zeros(h.shape[1], dtype=int)
        s[np.all(h >= 0, axis=0)] = ACTIVE
        s[np.all(h <= 0, axis=0)] = INACTIVE
        out.append(s)
    return out


def apply_dataset_stability(bounds: NeuronBounds, flags: list[np.ndarray]) -> NeuronBounds:
    nb = bounds.copy()
    changed = False
    for k, f in enumerate(flags):
        sel = (nb.stability[k] == FREE) & (f != FREE)
        if np.any(sel):
            changed = True
            nb.stability[k][sel] = f[sel]
    if changed:
        nb.source = "dataset"
    return nb


# -- encoding ------------------------------------------------------------------------

@dataclass
class NetworkEncoding:
    model: LinearModel
    p_d: np.ndarray
    z: list[np.ndarray]  # variable index per neuron, -1 where fixed inactive
    r: list[np.ndarray]  # binary index per neuron, -1 where fixed
    p_hat_ns: np.ndarray  # non-slack predictions
    p_hat: np.ndarray  # full dispatch, slack completion included
    bounds: NeuronBounds
    n_layers_encoded: int = 0
    rows: dict = field(default_factory=dict)

    @property
    def n_binaries(self) -> int:
        return int(sum(np.sum(r >= 0) for r in self.r))


def _affine(W_row, b_val, prev: np.ndarray) -> tuple[dict, float]:
    terms = {}
    for j, w in enumerate(W_row):
        if w != 0 and prev[j] >= 0:
            terms[int(prev[j])] = terms.get(int(prev[j]), 0.0) + float(w)
    return terms, float(b_val)


def _shift(terms: dict, coef: float, var: int) -> dict:
    out = dict(terms)
    out[var] = out.get(var, 0.0) + coef
    return out


def _encode_hidden(m: LinearModel, net: MlpNetwork, bounds: NeuronBounds, prev: np.ndarray, n_layers: int, relax: bool):
    Ws, bs = folded_layers(net)
    zs, rs = [], []
    for k in range(n_layers):
        W, b = Ws[k], bs[k]
        lo, hi, st = bounds.lo[k], bounds.hi[k], bounds.stability[k]
        if np.any(lo > hi + 1e-9 * np.maximum(1.0, np.abs(lo))):
            raise EncodingError(f"layer {k}: lower pre-activation bound exceeds upper bound")
        z = np.full(len(b), -1, dtype=int)
        r = np.full(len(b), -1, dtype=int)
        for i in range(len(b)):
            terms, const = _affine(W[i], b[i], prev)
            phase = st[i]
            if phase == FREE and lo[i] >= 0:
                phase = ACTIVE
            elif phase == FREE and hi[i] <= 0:
                phase = INACTIVE
            if phase == INACTIVE:
                continue
            if phase == ACTIVE:
                # z = zh; a dataset-fixed neuron may see zh < 0 inside the domain
                zi = z[i] = m.add_var(lo[i], hi[i], name=f"z{k}_{i}")
                m.add_constraint(_shift(terms, -1.0, zi), "=", -const, name=f"act{k}_{i}")
                continue
            zi = z[i] = m.add_var(0.0, hi[i], name=f"z{k}_{i}")
            ri = r[i] = m.add_var(0.0, 1.0, name=f"r{k}_{i}", binary=not relax)
            # z - zh + lo (1 - r) <= 0   ->   z - w'x + (-lo) r <= b - lo
            m.add_constraint(_shift(_shift({j: -c for j, c in terms.items()}, 1.0, zi), -lo[i], ri), "<=", const - lo[i], name=f"relu_a{k}_{i}")
            m.add_constraint(_shift({j: -c for j, c in terms.items()}, 1.0, zi), ">=", const, name=f"relu_b{k}_{i}")
            m.add_constraint({zi: 1.0, ri: -hi[i]}, "<=", 0.0, name=f"relu_c{k}_{i}")
        zs.append(z)
        rs.append(r)
        prev = z
    return zs, rs, prev


def _base_model(case: GridCase, domain: InputDomain, name: str) -> tuple[LinearModel, np.ndarray]:
    m = LinearModel("max", name=name)
    lo, hi = domain.box(case)
    p_d = np.array([m.add_var(lo[j], hi[j], name=f"pd{j}") for j in range(case.n_loads)], dtype=int)
    if not domain.is_box:
        A = np.atleast_2d(domain.A)
        for i, (row, rhs) in enumerate(zip(A, np.asarray(domain.b, dtype=float))):
            m.add_constraint({int(p_d[j]): float(a) for j, a in enumerate(row) if a != 0}, "<=", rhs, name=f"domain{i}")
    return m, p_d


def encode_network(
    net: MlpNetwork,
    case: GridCase,
    domain: InputDomain,
    bounds: NeuronBounds,
    relax: bool = False,
    n_hidden: int | None = None,
    name: str = "nn",
) -> NetworkEncoding:
    """Network graph over the domain as MILP rows in a fresh (unsealed) model.

    With ``n_hidden`` set, only that many hidden layers are encoded and no
    output rows are emitted (used while tightening bounds).
    """
    if net.n_inputs != case.n_loads or net.n_outputs != len(case.nonslack_gens):
        raise EncodingError("network dimensions do not match the case")
    m, p_d = _base_model(case, domain, name)
    K = len(net.hidden) if n_hidden is None else n_hidden
    zs, rs, last = _encode_hidden(m, net, bounds, p_d, K, relax)
    enc = NetworkEncoding(m, p_d, zs, rs, np.zeros(0, dtype=int), np.zeros(0, dtype=int), bounds, K)
    if n_hidden is not None:
        return enc
    Ws, bs = folded_layers(net)
    W, b = Ws[-1], bs[-1]
    p_ns = []
    for i in range(len(b)):
        v = m.add_var(-INF, INF, name=f"phat{case.nonslack_gens[i]}")
        terms, const = _affine(W[i], b[i], last)
        m.add_constraint(_shift({j: -c for j, c in terms.items()}, 1.0, v), "=", const, name=f"out{i}")
        p_ns.append(v)
    slack = m.add_var(-INF, INF, name=f"phat{case.slack_gen}")
    # slack completion: phat_slack + sum(phat_ns) - sum(p_d) = 0
    terms = {slack: 1.0, **{v: 1.0 for v in p_ns}}
    for j in p_d:
        terms[int(j)] = -1.0
    m.add_constraint(terms, "=", 0.0, name="slack_completion")
    # interval bounds on the outputs keep every verification term bounded
    zlo = np.array([m.lb[j] if j >= 0 else 0.0 for j in last])
    zhi = np.array([m.ub[j] if j >= 0 else 0.0 for j in last])
    Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
    out_lo, out_hi = Wp @ zlo + Wn @ zhi + b, Wp @ zhi + Wn @ zlo + b
    for v, lo_v, hi_v in zip(p_ns, out_lo, out_hi):
        m.set_bounds(v, _pad(lo_v, up=False), _pad(hi_v, up=True))
    d_lo, d_hi = domain.box(case)
    m.set_bounds(slack, _pad(d_lo.sum() - out_hi.sum(), up=False), _pad(d_hi.sum() - out_lo.sum(), up=True))
    full = np.zeros(case.n_gens, dtype=int)
    full[case.nonslack_gens] = p_ns
    full[case.slack_gen] = slack
    enc.p_hat_ns = np.array(p_ns, dtype=int)
    enc.p_hat = full
    return enc


# -- bound tightening ----------------------------------------------------------------

def _pad(v: float, up: bool) -> float:
    d = BOUND_PAD * max(1.0, abs(v))
    return v + d if up else v - d


def _neuron_objective(W_row, b_val, prev):
    terms, const = _affine(W_row, b_val, prev)
    return terms, const


def _tighten_layer_lp(model: LinearModel, objectives, old_lo, old_hi, targets):
    """Min/max each objective over the LP relaxation, warm-starting between solves."""
    model.seal()
    A, rlo, rhi = model.compiled()
    engine = SimplexEngine(A, rlo, rhi)
    lb, ub = model.lb, model.ub
    warm = None
    new_lo, new_hi = old_lo.copy(), old_hi.copy()
    for i in targets:
        terms, const = objectives[i]
        c = np.zeros(model.n_vars)
        for j, v in terms.items():
            c[j] = v
        vals = []
        for sgn in (1.0, -1.0):  # minimise, then maximise
            status, x, _, _, obj, ws = engine.solve(sgn * c, lb, ub, warm)
            if status == Status.UNBOUNDED:
                vals.append(None)
                continue
            if status != Status.OPTIMAL:
                raise EncodingError(f"bound LP ended with status {status.value}")
            warm = ws
            vals.append(sgn * obj + const)
        if vals[0] is not None:
            new_lo[i] = max(old_lo[i], _pad(vals[0], up=False))
        if vals[1] is not None:
            new_hi[i] = min(old_hi[i], _pad(vals[1], up=True))
    return new_lo, new_hi


def _tighten_layer_milp(model: LinearModel, objectives, old_lo, old_hi, targets, max_nodes, time_limit):
    model.seal()
    new_lo, new_hi = old_lo.copy(), old_hi.copy()
    capped = 0
    for i in targets:
        terms, const = objectives[i]
        for sense in ("min", "max"):
            res = solve_milp(model.with_objective(terms, sense, const), max_nodes=max_nodes, time_limit=time_limit)
            if res.status in (Status.INFEASIBLE, Status.UNBOUNDED):
                raise EncodingError(f"bound MILP ended with status {res.status.value}")
            if res.status != Status.OPTIMAL:
                capped += 1
            bound = res.best_bound
            if not math.isfinite(bound):
                continue
            if sense == "min":
                new_lo[i] = max(old_lo[i], _pad(bound, up=False))
            else:
                new_hi[i] = min(old_hi[i], _pad(bound, up=True))
    return new_lo, new_hi, capped


def tighten_bounds(
    net: MlpNetwork,
    case: GridCase,
    domain: InputDomain,
    bounds: NeuronBounds,
    stage: str,
    max_nodes: int | None = 200,
    time_limit: float | None = None,
) -> NeuronBounds:
    """One tightening pass, layer by layer; bounds only shrink.

    ``lp_relax`` optimises each pre-activation over the LP relaxation of the
    preceding layers, ``milp`` over the exact encoding. A MILP stopped by its
    node or time cap contributes its proven bound, which is still valid.
    Neurons already proven stable are not re-solved in the ``milp`` stage.
    """
    if stage not in ("lp_relax", "milp"):
        raise ValueError(f"unknown stage {stage!r}")
    nb = bounds.copy()
    Ws, bs = folded_layers(net)
    for k in range(len(net.hidden)):
        enc = encode_network(net, case, domain, nb, relax=(stage == "lp_relax"), n_hidden=k)
        prev = enc.z[-1] if k else enc.p_d
        objectives = [_neuron_objective(Ws[k][i], bs[k][i], prev) for i in range(len(bs[k]))]
        if stage == "lp_relax":
            targets = range(len(bs[k]))
            lo, hi = _tighten_layer_lp(enc.model, objectives, nb.lo[k], nb.hi[k], targets)
        else:
            targets = [i for i in range(len(bs[k])) if nb.stability[k][i] == FREE]
            if k == 0 and domain.is_box:
                targets = []  # first layer over a box: the LP bound is already exact
            if enc.n_binaries == 0:
                lo, hi = _tighten_layer_lp(enc.model, objectives, nb.lo[k], nb.hi[k], targets)
            else:
                lo, hi, capped = _tighten_layer_milp(enc.model, objectives, nb.lo[k], nb.hi[k], targets, max_nodes, time_limit)
                if capped:
                    log.info("layer %d: %d bound MILPs hit the node/time cap", k, capped)
        for i in targets:
            if lo[i] > nb.lo[k][i] or hi[i] < nb.hi[k][i]:
                nb.provenance[k][i] = stage
            elif STAGES.index(nb.provenance[k][i]) < STAGES.index(stage):
                nb.provenance[k][i] = stage
        nb.lo[k], nb.hi[k] = lo, hi
        nb.promote()
    return nb


def compute_bounds(
    net: MlpNetwork,
    case: GridCase,
    domain: InputDomain,
    stages=("lp_relax", "milp"),
    stability: str = "certified",
    dataset_inputs=None,
    max_nodes: int | None = 200,
    time_limit: float | None = None,
) -> NeuronBounds:
    """Full cascade: interval arithmetic, then the requested tightening stages.

    ``stability="dataset"`` additionally fixes every neuron whose phase never
    changes over ``dataset_inputs`` before tightening. Such fixings are not
    proven over the domain, so the result is tagged ``source="dataset"``.
    """
    nb = interval_bounds(net, case, domain)
    if stability == "dataset":
        if dataset_inputs is None or len(dataset_inputs) == 0:
            raise ValueError("dataset stability needs samples")
        nb = apply_dataset_stability(nb, stability_from_dataset(net, dataset_inputs))
    elif stability != "certified":
        raise ValueError(f"unknown stability mode {stability!r}")
    for stage in stages:
        nb = tighten_bounds(net, case, domain, nb, stage, max_nodes=max_nodes, time_limit=time_limit)
    return nb


# -- cache ---------------------------------------------------------------------------

def fingerprint(net: MlpNetwork, case: GridCase, domain: InputDomain, stability: str, stages) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(net_to_dict(net), sort_keys=True).encode())
    h.update(json.dumps({"case": case_to_dict(case), "domain": domain.to_dict(),
                         "stability": stability, "stages": list(stages)}, sort_keys=True).encode())
    return h.hexdigest()


def save_bounds(path, bounds: NeuronBounds, fp: str) -> None:
    atomic_write_json(path, {"fingerprint": fp, **bounds.to_dict()})


def load_bounds(path, fp: str) -> NeuronBounds | None:
    """Cached bounds, or ``None`` if missing or computed for another net/domain."""
    path = Path(path)
    if not path.exists():
        return None
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError:
        return None
    if d.get("fingerprint") != fp:
        return None
    return NeuronBounds.from_dict(d)


def cached_bounds(cache_path, net, case, domain, stability="certified", stages=("lp_relax", "milp"), dataset_inputs=None, **kw) -> NeuronBounds:
    fp = fingerprint(net, case, domain, stability, stages)
    if cache_path is not None:
        hit = load_bounds(cache_path, fp)
        if hit is not None:
            return hit
    nb = compute_bounds(net, case, domain, stages, stability, dataset_inputs, **kw)
    if cache_path is not None:
        save_bounds(cache_path, nb, fp)
    return nb
