"""Pointwise worst-case metrics, evaluated on batches of loads.

Raw units: ``nu_g`` and ``nu_line`` in MW, ``nu_dist`` as a fraction of the
generator range, ``nu_opt`` in $/h. :func:`to_display` converts the last two
to percent.
"""

from __future__ import annotations

import logging

import numpy as np

from .grid import GridCase, bus_injections, line_flows

log = logging.getLogger(__name__)

METRICS = ("nu_g", "nu_line", "nu_dist", "nu_opt")
UNITS = {"nu_g": "MW", "nu_line": "MW", "nu_dist": "%", "nu_opt": "%"}


def gen_violation(case: GridCase, p_hat) -> np.ndarray:
    """Per-row, per-generator limit violation [MW], clipped at 0."""
    p_hat = np.atleast_2d(p_hat)
    return np.maximum(np.maximum(p_hat - case.p_max, case.p_min - p_hat), 0.0)


def line_violation(case: GridCase, p_hat, p_d) -> np.ndarray:
    flows = line_flows(case.admittance, bus_injections(case, np.atleast_2d(p_hat), np.atleast_2d(p_d)))
    return np.maximum(np.abs(flows) - case.flow_limit, 0.0)


def dist_terms(case: GridCase, p_hat, p_opt) -> np.ndarray:
    rng = case.p_max - case.p_min
    keep = rng > 0
    out = np.zeros(np.atleast_2d(p_hat).shape)
    diff = np.abs(np.atleast_2d(p_hat) - np.atleast_2d(p_opt))
    out[:, keep] = diff[:, keep] / rng[keep]
    return out


def opt_terms(case: GridCase, p_hat, p_opt) -> np.ndarray:
    return (np.atleast_2d(p_hat) - np.atleast_2d(p_opt)) @ case.cost


def pointwise(case: GridCase, p_hat, p_d, p_opt=None) -> dict[str, np.ndarray]:
    """Per-row metric values; ``p_hat`` and ``p_opt`` are full dispatches."""
    out = {
        "nu_g": gen_violation(case, p_hat).max(axis=1, initial=0.0),
        "nu_line": line_violation(case, p_hat, p_d).max(axis=1, initial=0.0),
    }
    if p_opt is not None:
        out["nu_dist"] = dist_terms(case, p_hat, p_opt).max(axis=1, initial=0.0)
        out["nu_opt"] = opt_terms(case, p_hat, p_opt)
    return out


def to_display(metric: str, raw: float, opt_norm: float | None = None) -> float:
    if metric == "nu_dist":
        return 100.0 * raw
    if metric == "nu_opt":
        if opt_norm is None:
            raise ValueError("nu_opt needs the reference cost")
        return 100.0 * raw / opt_norm
    return raw
