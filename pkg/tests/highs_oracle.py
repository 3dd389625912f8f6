"""Reference solves with HiGHS, used only as an external oracle in tests."""

import os
import tempfile

import highspy
import numpy as np

from opfguard.lp import LinearModel, export_lp_format


def _run(h):
    # presolve can label an unbounded model infeasible; the plain simplex path does not
    h.setOptionValue("presolve", "off")
    h.run()
    status = h.modelStatusToString(h.getModelStatus())
    obj = h.getInfo().objective_function_value
    x = np.array(h.getSolution().col_value) if status == "Optimal" else None
    return status, obj, x


def solve_lp_text(text: str):
    """Read an LP-format model from text and solve it. Returns (status, objective, x)."""
    fd, path = tempfile.mkstemp(suffix=".lp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.readModel(path)
        return _run(h)
    finally:
        os.unlink(path)


def solve_model(model: LinearModel, relax: bool = False):
    """Pass the model's matrix directly to HiGHS, bypassing the LP-format writer."""
    A, lo, hi = model.compiled()
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    inf = highspy.kHighsInf
    n = model.n_vars
    c = model.objective_vector()
    lb = np.where(np.isfinite(model.lb), model.lb, -inf)
    ub = np.where(np.isfinite(model.ub), model.ub, inf)
    h.addVars(n, lb, ub)
    h.changeColsCost(n, np.arange(n, dtype=np.int32), c)
    for i in range(A.shape[0]):
        idx = np.flatnonzero(A[i]).astype(np.int32)
        h.addRow(lo[i] if np.isfinite(lo[i]) else -inf, hi[i] if np.isfinite(hi[i]) else inf, idx.size, idx, A[i, idx])
    if model.sense == "max":
        h.changeObjectiveSense(highspy.ObjSense.kMaximize)
    h.changeObjectiveOffset(model.obj_constant)
    if model.integrality and not relax:
        ints = np.array(sorted(model.integrality), dtype=np.int32)
        h.changeColsIntegrality(ints.size, ints, np.array([highspy.HighsVarType.kInteger] * ints.size))
        h.setOptionValue("mip_rel_gap", 0.0)
        h.setOptionValue("mip_abs_gap", 0.0)
    return _run(h)
