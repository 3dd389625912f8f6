"""Command-line pipeline: gen-data, train, verify, sweep, export-lp.

Settings resolve in three layers: built-in defaults, then a ``--config`` JSON
file, then flags given explicitly on the command line. The resolved settings
are written to ``config.json`` in every output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .dataset import DatasetError, InputDomain, LabeledDataset, empirical_worst_case, generate_dataset
from .dcopf import build_dcopf
from .encode import EncodingError, cached_bounds
from .fileio import atomic_write_json, atomic_write_text
from .grid import CaseError, NumericalError, load_case
from .lp import export_lp_format
from .lp.simplex import SolverError
from .mlp import NetFormatError, TrainConfig, TrainingError, load_net, save_net, test_mae_percent, train
from .report import (
    aggregate,
    plot_dominance,
    plot_sweep,
    plot_training,
    sweep_rows,
    write_aggregate_csv,
    write_report_json,
    write_sweep_csvs,
)
from .verify import SolverOptions, VerificationError, Verifier, domain_reduction_sweep, embed_dcopf_kkt, normalised_sweep

log = logging.getLogger("opfguard")

EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2, 3
STABILITY_MODES = ("certified", "dataset")


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    case: str = "case9"
    lower: float = 0.6
    upper: float = 1.0
    n_samples: int = 10000
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    layers: list[int] = field(default_factory=lambda: [50, 50, 50])
    epochs: int = 250
    batch_size: int = 40
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    final_sparsity: float = 0.8
    stability: str = "certified"
    gap_tol: float = 0.0
    time_limit: float | None = None
    max_nodes: int | None = None
    bound_max_nodes: int | None = 200
    big_m: float = 1e5
    single_milp: bool = False
    metrics: list[str] = field(default_factory=lambda: list(metrics.METRICS))
    deltas: list[float] = field(default_factory=lambda: [0.0, 0.02, 0.04, 0.06, 0.08])
    threshold: float | None = None
    dataset: str | None = None
    nets: list[str] = field(default_factory=list)
    out: str = "out"
    jobs: int = 1
    allow_cost_ties: bool = False

    def validate(self, command: str) -> None:
        if not 0 <= self.lower <= self.upper:
            raise UsageError("need 0 <= lower <= upper")
        if self.n_samples < 1:
            raise UsageError("n_samples must be positive")
        if not self.seeds:
            raise UsageError("seeds list is empty")
        if not self.layers or any(n < 1 for n in self.layers):
            raise UsageError("layers must be positive integers")
        if self.stability not in STABILITY_MODES:
            raise UsageError(f"stability must be one of {STABILITY_MODES}")
        if self.gap_tol < 0:
            raise UsageError("gap_tol must be non-negative")
        bad = [m for m in self.metrics if m not in metrics.METRICS]
        if bad or not self.metrics:
            raise UsageError(f"unknown or empty metric list: {bad}")
        if self.jobs < 1:
            raise UsageError("jobs must be at least 1")
        if command == "sweep":
            if not self.deltas:
                raise UsageError("empty delta list")
            if any(d < 0 or d > 0.2 for d in self.deltas):
                raise UsageError("delta values must lie in [0, 0.2]")
        if command in ("verify", "sweep") and not self.nets:
            raise UsageError("no network given (--net)")
        if command == "train" and not self.dataset:
            raise UsageError("train needs --dataset")
        if self.stability == "dataset" and command in ("verify", "sweep") and not self.dataset:
            raise UsageError("dataset stability needs --dataset")
        try:
            self.train_config(self.seeds[0]).validate()
        except ValueError as e:
            raise UsageError(str(e)) from e

    def domain(self) -> InputDomain:
        return InputDomain(self.lower, self.upper)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            optimizer=self.optimizer, final_sparsity=self.final_sparsity, seed=seed,
        )

    def solver_options(self) -> SolverOptions:
        return SolverOptions(self.gap_tol, self.time_limit, self.max_nodes, self.single_milp, self.big_m)


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _strs(s: str) -> list[str]:
    return [v.strip() for v in s.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opfguard", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        # SUPPRESS keeps unset flags out of the namespace so config-file values survive
        S = argparse.SUPPRESS
        sp.add_argument("--config", default=S, help="JSON file with RunConfig fields")
        sp.add_argument("--case", default=S, help="case file (.json or .m) or built-in name")
        sp.add_argument("--lower", type=float, default=S, help="lower load fraction of the domain box")
        sp.add_argument("--upper", type=float, default=S, help="upper load fraction of the domain box")
        sp.add_argument("--out", default=S, help="output directory")
        sp.add_argument("--jobs", type=int, default=S, help="worker processes")
        sp.add_argument("--seeds", type=_ints, default=S, help="comma-separated seeds")
        sp.add_argument("--seed", type=int, dest="seeds_single", default=S, help="single seed")
        return sp

    g = common(sub.add_parser("gen-data", help="sample loads and label them with DC-OPF"))
    g.add_argument("--n", type=int, dest="n_samples", default=argparse.SUPPRESS)
    g.add_argument("--allow-cost-ties", action="store_true", default=argparse.SUPPRESS)

    t = common(sub.add_parser("train", help="train one network per seed"))
    t.add_argument("--dataset", default=argparse.SUPPRESS)
    t.add_argument("--layers", type=_ints, default=argparse.SUPPRESS)
    t.add_argument("--epochs", type=int, default=argparse.SUPPRESS)
    t.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
    t.add_argument("--learning-rate", type=float, default=argparse.SUPPRESS)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default=argparse.SUPPRESS)
    t.add_argument("--final-sparsity", type=float, default=argparse.SUPPRESS)

    for name, helptext in (("verify", "worst-case guarantees per network"), ("sweep", "guarantees on shrinking domains")):
        v = common(sub.add_parser(name, help=helptext))
        v.add_argument("--net", dest="nets", action="append", default=argparse.SUPPRESS, help="network file (repeatable)")
        v.add_argument("--dataset", default=argparse.SUPPRESS, help="dataset for empirical maxima and dataset stability")
        v.add_argument("--stability", "--relu-stability", choices=STABILITY_MODES, default=argparse.SUPPRESS)
        v.add_argument("--gap-tol", type=float, default=argparse.SUPPRESS)
        v.add_argument("--time-limit", type=float, default=argparse.SUPPRESS)
        v.add_argument("--max-nodes", type=int, default=argparse.SUPPRESS)
        v.add_argument("--bound-max-nodes", type=int, default=argparse.SUPPRESS)
        v.add_argument("--big-m", type=float, default=argparse.SUPPRESS)
        v.add_argument("--single-milp", action="store_true", default=argparse.SUPPRESS)
        v.add_argument("--metric", dest="metrics", type=_strs, default=argparse.SUPPRESS, help="comma-separated metrics")
        v.add_argument("--all", dest="all_metrics", action="store_true", default=argparse.SUPPRESS)
        if name == "verify":
            v.add_argument("--threshold", type=float, default=argparse.SUPPRESS,
                           help="exit with status 1 when a guarantee exceeds this value")
        else:
            v.add_argument("--deltas", type=_floats, default=argparse.SUPPRESS)

    e = common(sub.add_parser("export-lp", help="write an LP-format model for external solvers"))
    e.add_argument("--load", type=_floats, default=argparse.SUPPRESS,
                   help="DC-OPF at this load vector [MW]; without --net")
    e.add_argument("--load-fraction", type=float, default=argparse.SUPPRESS,
                   help="DC-OPF at this fraction of every load's maximum")
    e.add_argument("--net", dest="nets", action="append", default=argparse.SUPPRESS)
    e.add_argument("--metric", dest="metrics", type=_strs, default=argparse.SUPPRESS)
    e.add_argument("--stability", "--relu-stability", choices=STABILITY_MODES, default=argparse.SUPPRESS)
    e.add_argument("--dataset", default=argparse.SUPPRESS)
    e.add_argument("--big-m", type=float, default=argparse.SUPPRESS)
    e.add_argument("--file", dest="lp_file", default=argparse.SUPPRESS, help="output file name inside --out")
    return p


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(ns, "config", None):
        path = Path(ns.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            values.update(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path}: {e}") from e
    flags = vars(ns)
    if "seeds_single" in flags:
        flags["seeds"] = [flags.pop("seeds_single")]
    if flags.pop("all_metrics", False):
        flags["metrics"] = list(metrics.METRICS)
    known = {f.name for f in fields(RunConfig)}
    for k, v in flags.items():
        if k in known:
            values[k] = v
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    try:
        cfg = RunConfig(**values)
    except TypeError as e:
        raise UsageError(str(e)) from e
    cfg.validate(ns.command)
    return cfg


def _echo(cfg: RunConfig, out: Path, command: str) -> None:
    atomic_write_json(out / "config.json", {"command": command, **asdict(cfg)})


def _load_case(cfg: RunConfig):
    try:
        return load_case(cfg.case)
    except FileNotFoundError as e:
        raise UsageError(f"case file not found: {cfg.case}") from e


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    case = _load_case(cfg)
    out = Path(cfg.out)
    ds = generate_dataset(case, cfg.domain(), cfg.n_samples, cfg.seeds[0], jobs=cfg.jobs, allow_cost_ties=cfg.allow_cost_ties)
    ds.save(out)
    _echo(cfg, out, "gen-data")
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def _train_one(args):
    cfg, seed = args
    case = _load_case(cfg)
    ds = LabeledDataset.load(cfg.dataset)
    net, tlog = train(ds, case, cfg.layers, cfg.train_config(seed))
    out = Path(cfg.out)
    save_net(net, out / f"net_seed{seed}.json")
    atomic_write_text(out / f"train_log_seed{seed}.csv", tlog.to_csv())
    plot_training(out / f"train_log_seed{seed}.png", tlog)
    X, Y = ds.test
    return seed, test_mae_percent(net, case, X, Y)


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def cmd_train(cfg: RunConfig) -> int:
    if not Path(cfg.dataset).is_dir():
        raise UsageError(f"dataset directory not found: {cfg.dataset}")
    _load_case(cfg)
    out = Path(cfg.out)
    _echo(cfg, out, "train")
    rows = _map(_train_one, [(cfg, s) for s in cfg.seeds], cfg.jobs)
    atomic_write_text(out / "test_mae.csv", "seed,test_mae_percent\n" + "".join(f"{s},{m:.17g}\n" for s, m in rows))
    for s, m in rows:
        print(f"seed {s}: test MAE {m:.4f}%")
    return EXIT_OK


def _dataset_inputs(cfg: RunConfig):
    if not cfg.dataset:
        return None, None
    if not Path(cfg.dataset).is_dir():
        raise UsageError(f"dataset directory not found: {cfg.dataset}")
    ds = LabeledDataset.load(cfg.dataset)
    return ds, ds.inputs


def _verifier(cfg: RunConfig, case, net, domain, inputs, cache: Path | None) -> Verifier:
    kept = None
    if inputs is not None:
        kept = inputs[domain.contains(case, inputs)]
    bounds = cached_bounds(
        cache, net, case, domain, stability=cfg.stability,
        dataset_inputs=kept if cfg.stability == "dataset" else None, max_nodes=cfg.bound_max_nodes,
    )
    return Verifier(net, case, domain, bounds=bounds, options=cfg.solver_options())


def _verify_one(args):
    cfg, net_path = args
    case = _load_case(cfg)
    net = _load_net(net_path)
    ds, inputs = _dataset_inputs(cfg)
    out = Path(cfg.out)
    stem = Path(net_path).stem
    v = _verifier(cfg, case, net, cfg.domain(), inputs, out / f"bounds_{stem}_{cfg.stability}.json")
    emp = empirical_worst_case(ds, net, case) if ds is not None else {}
    reps, failures = {}, {}
    for metric in cfg.metrics:
        try:
            rep = v.run([metric])[metric]
        except (VerificationError, SolverError, NumericalError) as e:
            failures[metric] = str(e)
            atomic_write_json(out / f"report_{stem}_{metric}.json", {"metric": metric, "net": str(net_path), "error": str(e)})
            continue
        if metric in emp:
            norm = v.opt_norm if metric == "nu_opt" else None
            rep.attach_empirical(metrics.to_display(metric, emp[metric][0], norm))
        write_report_json(out / f"report_{stem}_{metric}.json", rep, {"net": str(net_path), "case": case.name})
        reps[metric] = rep
    return case.name, reps, failures


def _load_net(path):
    try:
        return load_net(path)
    except FileNotFoundError as e:
        raise UsageError(f"network file not found: {path}") from e


def cmd_verify(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _echo(cfg, out, "verify")
    results = _map(_verify_one, [(cfg, n) for n in cfg.nets], cfg.jobs)
    case_name = results[0][0]
    runs = [r for _, r, _ in results]
    rows = aggregate(case_name, runs)
    write_aggregate_csv(out / "aggregate.csv", rows)
    if rows:
        plot_dominance(out / "aggregate.png", rows)
    failed = any(f for _, _, f in results)
    for row in rows:
        print(f"{row['metric']}: guarantee {row['guarantee']:.6g} {row['unit']}, empirical {row['empirical']:.6g}, "
              f"ratio {row['ratio']:.3g} [{row['status']}] ({cfg.stability})")
    for _, _, f in results:
        for metric, msg in f.items():
            print(f"{metric}: FAILED: {msg}", file=sys.stderr)
    if failed:
        return EXIT_SOLVER
    if cfg.threshold is not None and any(
        rep.worst_case_value > cfg.threshold for r in runs for rep in r.values()
    ):
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    case = _load_case(cfg)
    out = Path(cfg.out)
    _echo(cfg, out, "sweep")
    _, inputs = _dataset_inputs(cfg)
    for net_path in cfg.nets:
        net = _load_net(net_path)
        results = domain_reduction_sweep(
            net, case, cfg.deltas, cfg.domain(), cfg.metrics, cfg.stability,
            inputs if cfg.stability == "dataset" else None, cfg.solver_options(),
        )
        rows = sweep_rows(results, normalised_sweep(results))
        sub = out / Path(net_path).stem if len(cfg.nets) > 1 else out
        write_sweep_csvs(sub, rows)
        plot_sweep(sub / "sweep.png", rows)
        for r in rows:
            print(f"delta {r['delta']:.3f} {r['metric']}: {r['guarantee']:.6g} {r['unit']} ({r['percent_of_initial']:.1f}%)")
    return EXIT_OK


def cmd_export_lp(cfg: RunConfig, ns: argparse.Namespace) -> int:
    case = _load_case(cfg)
    out = Path(cfg.out)
    if not cfg.nets:
        if getattr(ns, "load", None) is not None:
            load = np.asarray(ns.load, dtype=float)
            if load.shape != (case.n_loads,):
                raise UsageError(f"--load needs {case.n_loads} values")
        else:
            load = getattr(ns, "load_fraction", 1.0) * case.load_max
        model, _ = build_dcopf(case, load)
        name = getattr(ns, "lp_file", "dcopf.lp")
    else:
        net = _load_net(cfg.nets[0])
        metric = cfg.metrics[0]
        _, inputs = _dataset_inputs(cfg)
        v = _verifier(cfg, case, net, cfg.domain(), inputs, None)
        enc = v.encoding()
        if metric in ("nu_dist", "nu_opt"):
            kkt = embed_dcopf_kkt(enc.model, enc.p_d, case, cfg.big_m)
            terms = v._dist_terms(enc, kkt) if metric == "nu_dist" else v._opt_terms(enc, kkt)
        else:
            terms = v._gen_terms(enc) if metric == "nu_g" else v._line_terms(enc)
        enc.model.seal()
        t = terms[0]
        model = enc.model.with_objective({j: c * t.scale for j, c in t.terms.items()}, "max", t.const * t.scale)
        name = getattr(ns, "lp_file", f"{metric}.lp")
        print(f"exported first {metric} term {t.label}; {len(terms)} terms in total")
    atomic_write_text(out / name, export_lp_format(model))
    _echo(cfg, out, "export-lp")
    print(f"wrote {out / name}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    command = ns.command
    extra = argparse.Namespace(**{k: v for k, v in vars(ns).items() if k in ("load", "load_fraction", "lp_file")})
    cfg_ns = argparse.Namespace(**{k: v for k, v in vars(ns).items() if k not in ("load", "load_fraction", "lp_file", "verbose")})
    try:
        cfg = resolve_config(cfg_ns)
        if command == "gen-data":
            return cmd_gen_data(cfg)
        if command == "train":
            return cmd_train(cfg)
        if command == "verify":
            return cmd_verify(cfg)
        if command == "sweep":
            return cmd_sweep(cfg)
        return cmd_export_lp(cfg, extra)
    except (UsageError, CaseError, NetFormatError, DatasetError, ValueError) as e:
        print(f"opfguard: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, VerificationError, NumericalError, EncodingError, TrainingError) as e:
        print(f"opfguard: solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
