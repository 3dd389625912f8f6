"""Report files: per-run JSON, aggregate CSV tables and figures."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fileio import atomic_write_json, atomic_write_text  # noqa: E402
from .metrics import METRICS, UNITS  # noqa: E402

AGGREGATE_COLUMNS = ["case", "metric", "unit", "empirical", "guarantee", "ratio", "n_runs", "status"]


def _clean(obj):
    """JSON-safe copy: NaN and infinities become null."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_report_json(path, report, extra: dict | None = None) -> None:
    d = report.to_dict()
    if extra:
        d.update(extra)
    atomic_write_json(path, _clean(d))


def _ratio(guarantee: float, empirical: float) -> float:
    if empirical > 0:
        return guarantee / empirical
    return 1.0 if guarantee == 0 else math.inf


def aggregate(case_name: str, runs: list[dict]) -> list[dict]:
    """Average guarantees and empirical maxima over runs (one dict metric -> report per run)."""
    rows = []
    for metric in METRICS:
        reps = [r[metric] for r in runs if metric in r]
        if not reps:
            continue
        g = float(np.mean([r.worst_case_value for r in reps]))
        emps = [r.empirical_lower_bound for r in reps if r.empirical_lower_bound is not None]
        e = float(np.mean(emps)) if emps else math.nan
        statuses = sorted({r.status for r in reps})
        rows.append({
            "case": case_name,
            "metric": metric,
            "unit": UNITS[metric],
            "empirical": e,
            "guarantee": g,
            "ratio": _ratio(g, e) if emps else math.nan,
            "n_runs": len(reps),
            "status": "/".join(statuses),
        })
    return rows


def _csv_text(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def write_aggregate_csv(path, rows: list[dict]) -> None:
    atomic_write_text(path, _csv_text(AGGREGATE_COLUMNS, rows))


def sweep_rows(results: dict, normalised: dict) -> list[dict]:
    rows = []
    for d in sorted(results):
        for metric, rep in results[d].items():
            rows.append({
                "delta": float(d),
                "metric": metric,
                "unit": rep.unit,
                "guarantee": rep.worst_case_value,
                "percent_of_initial": normalised[d][metric],
                "status": rep.status,
                "node_count": rep.node_count,
            })
    return rows


def write_sweep_csvs(out_dir, rows: list[dict]) -> list[Path]:
    """One CSV per metric, rows ordered by delta."""
    out_dir = Path(out_dir)
    cols = ["delta", "guarantee", "percent_of_initial", "unit", "status", "node_count"]
    paths = []
    for metric in METRICS:
        sel = [{k: r[k] for k in cols} for r in rows if r["metric"] == metric]
        if not sel:
            continue
        p = out_dir / f"sweep_{metric}.csv"
        atomic_write_text(p, _csv_text(cols, sel))
        paths.append(p)
    return paths


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format=path.suffix.lstrip(".") or "png", dpi=120)
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_dominance(path, rows: list[dict]) -> Path:
    """Grouped bars of empirical maximum against guarantee per metric."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(rows))
    emp = [r["empirical"] for r in rows]
    gua = [r["guarantee"] for r in rows]
    ax.bar(x - 0.2, emp, 0.4, label="empirical")
    ax.bar(x + 0.2, gua, 0.4, label="guarantee")
    ax.set_xticks(x, [f"{r['metric']} [{r['unit']}]" for r in rows])
    ax.set_ylabel("worst case")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(path, rows: list[dict]) -> Path:
    """Guarantees, as percent of the unreduced domain, against delta."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for metric in METRICS:
        sel = sorted((r for r in rows if r["metric"] == metric), key=lambda r: r["delta"])
        if sel:
            ax.plot([r["delta"] for r in sel], [r["percent_of_initial"] for r in sel], marker="o", label=metric)
    ax.set_xlabel("domain reduction delta")
    ax.set_ylabel("guarantee [% of delta = 0]")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_training(path, log) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(log.epoch, log.train_mse, label="train")
    ax.semilogy(log.epoch, log.test_mse, label="test")
    ax2 = ax.twinx()
    ax2.plot(log.epoch, log.sparsity, color="grey", linestyle=":", label="sparsity")
    ax2.set_ylabel("sparsity")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (scaled)")
    ax.legend(loc="upper right")
    fig.tight_layout()
    return _save(fig, path)
