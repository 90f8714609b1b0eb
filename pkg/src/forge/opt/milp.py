"""Branch-and-bound over the binary variables of a :class:`MathProgram`.

Node relaxations are solved by :func:`solve_qp` with the equality reduction
shared across the tree and each child warm-started from its parent's point.
Search is depth-first until an incumbent exists, then best-bound.  Branching
picks the most fractional binary, lowest index first on ties.
"""

from __future__ import annotations

import heapq
import itertools

import numpy as np

from .program import MathProgram, Solution, SolverSettings, Status
from .qp import reduce_equalities, solve_qp, _check_psd


def _pick_branch(xb: np.ndarray, bins: np.ndarray, int_tol: float) -> int:
    frac = np.abs(xb - np.round(xb))
    if np.max(frac, initial=0.0) <= int_tol:
        return -1
    score = np.minimum(xb - np.floor(xb), np.ceil(xb) - xb)
    best = np.max(score)
    # lowest-index binary among the most fractional
    return int(bins[np.flatnonzero(score >= best - 1e-12)[0]])


def solve_milp(prog: MathProgram, settings: SolverSettings | None = None, x0=None) -> Solution:
    """Solve a MILP/MIQP; pure feasibility programs stop at the first integral point.

    ``Infeasible`` is only reported after every branch was closed; a node or
    iteration limit yields ``IterLimit`` carrying the incumbent, if any.
    """
    settings = settings or SolverSettings()
    prog.check()
    _check_psd(prog.H)
    if not prog.binaries:
        return solve_qp(prog, settings, x0=x0, validate=False)
    bins = np.array(sorted(prog.binaries))
    red = reduce_equalities(prog.A_eq, prog.b_eq, prog.n)
    if red.residual > settings.feas_tol * 10:
        return Solution(Status.INFEASIBLE,
                        certificate={"reason": "inconsistent equalities", "nodes": 0})
    feas_only = prog.is_feasibility
    best: Solution | None = None
    best_obj = np.inf
    counter = itertools.count()
    stack = [(prog.lb.copy(), prog.ub.copy(), x0)]
    heap: list = []
    nodes = 0
    incomplete = False
    unbounded = False
    gap_tol = 1e-9

    while stack or heap:
        if nodes >= settings.max_nodes:
            incomplete = True
            break
        if best is None and stack:
            lb, ub, warm = stack.pop()
            bound = -np.inf
        else:
            if stack:  # move pending depth-first nodes into the bound queue
                for lb_s, ub_s, warm_s in stack:
                    heapq.heappush(heap, (-np.inf, next(counter), lb_s, ub_s, warm_s))
                stack = []
            bound, _, lb, ub, warm = heapq.heappop(heap)
            if bound >= best_obj - gap_tol * max(1.0, abs(best_obj)):
                continue
        nodes += 1
        sol = solve_qp(prog.with_bounds(lb, ub), settings, x0=warm, reduction=red, validate=False)
        if sol.status == Status.INFEASIBLE:
            continue
        if sol.status == Status.UNBOUNDED:
            unbounded = True
            continue
        if sol.status != Status.OPTIMAL:
            incomplete = True
            continue
        if not feas_only and sol.objective >= best_obj - gap_tol * max(1.0, abs(best_obj)):
            continue
        j = _pick_branch(sol.x[bins], bins, settings.int_tol)
        if j < 0:
            lb_f, ub_f = lb.copy(), ub.copy()
            rb = np.round(sol.x[bins])
            lb_f[bins] = rb
            ub_f[bins] = rb
            pol = solve_qp(prog.with_bounds(lb_f, ub_f), settings, x0=sol.x, reduction=red,
                           validate=False)
            if pol.status == Status.OPTIMAL:
                pol.x[bins] = rb
                obj = pol.objective if not feas_only else 0.0
                if obj < best_obj or best is None:
                    best, best_obj = pol, obj
                if feas_only:
                    break
                continue
            # integral only within tolerance: keep branching on what is left
            j = _pick_branch(sol.x[bins], bins, 0.0)
            if j < 0:
                continue
        v = sol.x[j]
        down = (lb.copy(), ub.copy(), sol.x)
        down[1][j] = 0.0
        up = (lb.copy(), ub.copy(), sol.x)
        up[0][j] = 1.0
        if best is None:
            # nearer rounding explored first
            first, second = (up, down) if v >= 0.5 else (down, up)
            stack.append(second)
            stack.append(first)
        else:
            for child in (down, up):
                heapq.heappush(heap, (sol.objective, next(counter), *child))

    info = {"nodes": nodes}
    if best is not None:
        best.info = {**best.info, **info}
        if incomplete and not feas_only and (stack or heap):
            best.status = Status.ITER_LIMIT
        else:
            best.status = Status.OPTIMAL
        return best
    if unbounded and not incomplete:
        return Solution(Status.UNBOUNDED, info=info)
    if incomplete:
        return Solution(Status.ITER_LIMIT, info=info)
    return Solution(Status.INFEASIBLE, info=info,
                    certificate={"reason": "all branches infeasible", "nodes": nodes})
