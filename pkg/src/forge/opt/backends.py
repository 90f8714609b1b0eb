"""Solver backends behind the :class:`SolverBackend` protocol."""

from __future__ import annotations

import numpy as np

from .milp import solve_milp
from .program import MathProgram, Solution, SolverSettings, Status
from .qp import solve_qp


class BuiltinBackend:
    """Active-set QP plus branch-and-bound, both in this package."""

    def __init__(self, settings: SolverSettings | None = None):
        self.settings = settings or SolverSettings()

    def solve(self, prog: MathProgram, settings: SolverSettings | None = None) -> Solution:
        s = settings or self.settings
        if prog.binaries:
            return solve_milp(prog, s)
        return solve_qp(prog, s)


class HighsBackend:
    """LP/MILP through ``scipy.optimize.milp`` (HiGHS).

    Quadratic objectives are rejected and no multipliers are returned; this is
    a drop-in for feasibility and linear-objective programs only.
    """

    def __init__(self, settings: SolverSettings | None = None):
        self.settings = settings or SolverSettings()

    def solve(self, prog: MathProgram, settings: SolverSettings | None = None) -> Solution:
        from scipy.optimize import Bounds, LinearConstraint, milp

        if prog.H is not None and np.any(prog.H):
            raise ValueError("HighsBackend does not handle quadratic objectives")
        c = prog.f if prog.f is not None else np.zeros(prog.n)
        cons = []
        if prog.A_eq.shape[0]:
            cons.append(LinearConstraint(prog.A_eq, prog.b_eq, prog.b_eq))
        if prog.A_in.shape[0]:
            cons.append(LinearConstraint(prog.A_in, -np.inf, prog.b_in))
        integrality = np.zeros(prog.n)
        integrality[list(prog.binaries)] = 1
        res = milp(c, constraints=cons, integrality=integrality, bounds=Bounds(prog.lb, prog.ub))
        if res.status == 0:
            x = np.asarray(res.x)
            return Solution(Status.OPTIMAL, x=x, objective=float(c @ x))
        if res.status == 2:
            return Solution(Status.INFEASIBLE)
        if res.status == 3:
            return Solution(Status.UNBOUNDED)
        return Solution(Status.ITER_LIMIT)


def make_backend(name: str, settings: SolverSettings | None = None):
    if name in ("builtin", "", None):
        return BuiltinBackend(settings)
    if name == "highs":
        return HighsBackend(settings)
    raise ValueError(f"unknown solver backend {name!r}")
