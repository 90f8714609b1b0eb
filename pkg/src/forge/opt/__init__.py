"""Convex and mixed-integer solver layer."""

from .backends import BuiltinBackend, HighsBackend, make_backend
from .milp import solve_milp
from .program import MathProgram, Solution, SolverBackend, SolverSettings, Status, kkt_residuals
from .qp import EqualityReduction, reduce_equalities, solve_qp

__all__ = [
    "MathProgram", "Solution", "SolverBackend", "SolverSettings", "Status", "kkt_residuals",
    "EqualityReduction", "reduce_equalities", "solve_qp", "solve_milp",
    "BuiltinBackend", "HighsBackend", "make_backend",
]
