"""Linear and mixed-binary programming: model container, simplex, branch-and-bound."""

from .bnb import solve_milp
from .lpformat import export_lp_format
from .model import INF, Constraint, LinearModel, ModelError, SolveResult, Status
from .simplex import SimplexEngine, SolverError, WarmStart, solve_lp

__all__ = [
    "INF",
    "Constraint",
    "LinearModel",
    "ModelError",
    "SimplexEngine",
    "SolveResult",
    "SolverError",
    "Status",
    "WarmStart",
    "export_lp_format",
    "solve_lp",
    "solve_milp",
]
