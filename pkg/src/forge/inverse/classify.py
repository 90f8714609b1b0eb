"""Guaranteed safe / unsafe cells of a planar workspace window.

A cell is GuaranteedSafe when no parameter in the KKT-compatible set ``F``
places any obstacle over it, and GuaranteedUnsafe when every parameter in
``F`` makes some obstacle cover it.  Obstacles are taken closed, so touching
counts as intersecting, which keeps both verdicts conservative.

For one obstacle with disjuncts ``n_b . p <= offset_b(theta)``:

* the cell escapes the obstacle iff some disjunct holds at some corner, i.e.
  ``min_corner n_b . c <= offset_b(theta)`` for some ``b``; the escape query
  is therefore infeasible iff ``min_corner n_b . c > max_F offset_b`` for
  every ``b``, which only needs the per-disjunct maxima over ``F``;
* the cell meets the obstacle iff some ``p`` in the cell has
  ``n_b . p >= offset_b(theta)`` for all ``b``; this is a MILP over ``F``
  with two extra position variables, run only when cheap checks (offset
  minima over ``F`` and a pool of known members of ``F``) do not decide.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..opt import MathProgram, SolverSettings, Status, solve_milp
from ..problem import Obstacle
from .kkt import KktProgram, infer_theta

log = logging.getLogger(__name__)

SAFE = "GuaranteedSafe"
UNSAFE = "GuaranteedUnsafe"
UNKNOWN = "Unknown"

_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """``nx`` by ``ny`` cells tiling ``[x0, x1] x [y0, y1]``; cell ``(i, j)`` is column ``i``, row ``j``."""

    nx: int
    ny: int
    window: tuple

    def cell(self, i: int, j: int) -> tuple[float, float, float, float]:
        x0, x1, y0, y1 = self.window
        dx = (x1 - x0) / self.nx
        dy = (y1 - y0) / self.ny
        return (x0 + i * dx, x0 + (i + 1) * dx, y0 + j * dy, y0 + (j + 1) * dy)

    def cells(self):
        for i in range(self.nx):
            for j in range(self.ny):
                yield i, j, self.cell(i, j)


def _corners(cell) -> np.ndarray:
    x0, x1, y0, y1 = cell
    return np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])


def _support(normals: np.ndarray, cell) -> tuple[np.ndarray, np.ndarray]:
    """``(min, max)`` of ``n_b . p`` over the cell, per disjunct."""
    vals = normals @ _corners(cell).T
    return vals.min(axis=1), vals.max(axis=1)


def _axis_aligned(ob: Obstacle) -> bool:
    return bool(np.all(np.count_nonzero(ob.normals, axis=1) <= 1))


def cell_meets_obstacle(ob: Obstacle, theta, cell, settings: SolverSettings | None = None) -> bool:
    """Whether the closed cell and the closed obstacle at ``theta`` share a point."""
    off = ob.offsets(theta)
    lo, hi = _support(ob.normals, cell)
    if np.any(hi < off - _TOL):
        return False
    if _axis_aligned(ob):
        return True
    x0, x1, y0, y1 = cell
    prog = MathProgram(2, None, None, None, None, -ob.normals, -off,
                       np.array([x0, y0]), np.array([x1, y1]))
    return solve_milp(prog, settings or SolverSettings()).status == Status.OPTIMAL


@dataclass
class OffsetRange:
    """Per obstacle and disjunct, ``[min, max]`` of ``offset_b(theta)`` over ``F``."""

    lower: list
    upper: list
    exact: bool
    witnesses: list = field(default_factory=list)   # theta vectors known to be in F


def offset_ranges(kp: KktProgram, obstacles, settings: SolverSettings | None = None) -> OffsetRange | None:
    """Extremes of every disjunct offset over ``F``; ``None`` when ``F`` is empty.

    A MILP that stops on a limit falls back to the parameter-box extreme, which
    only makes later verdicts more cautious.
    """
    cache: dict[tuple, tuple[float, np.ndarray | None, bool]] = {}
    lower, upper, wit = [], [], []
    exact = True

    def extreme(vec: np.ndarray) -> float:
        # min over F of vec . theta
        nonlocal exact
        key = tuple(np.round(vec, 15))
        if key not in cache:
            if not np.any(vec):
                cache[key] = (0.0, None, True)
            else:
                w = infer_theta(kp, settings=settings, objective=vec)
                if w.status == Status.OPTIMAL:
                    cache[key] = (float(vec @ w.theta), w.theta, True)
                elif w.status == Status.INFEASIBLE:
                    raise _EmptyF()
                else:
                    box = np.where(vec > 0, kp.theta_lower, kp.theta_upper)
                    cache[key] = (float(vec @ box), None, False)
        val, th, ok = cache[key]
        if th is not None:
            wit.append(th)
        exact = exact and ok
        return val

    try:
        for ob in obstacles:
            lo = np.array([ob.offset0[b] + extreme(ob.theta_map[b]) for b in range(ob.n_disjuncts)])
            hi = np.array([ob.offset0[b] - extreme(-ob.theta_map[b]) for b in range(ob.n_disjuncts)])
            lower.append(lo)
            upper.append(hi)
    except _EmptyF:
        return None
    uniq = {tuple(np.round(t, 12)): t for t in wit}
    return OffsetRange(lower, upper, exact, list(uniq.values()))


class _EmptyF(Exception):
    pass


def _intersect_program(kp: KktProgram, ob: Obstacle, cell) -> MathProgram:
    """``theta in F`` plus a position ``p`` in the cell inside the closed obstacle."""
    base = kp.program
    n = base.n
    th = kp.idx["theta"]
    nb = ob.n_disjuncts
    A_in = np.zeros((base.A_in.shape[0] + nb, n + 2))
    A_in[: base.A_in.shape[0], :n] = base.A_in
    rows = A_in[base.A_in.shape[0]:]
    rows[:, n:] = -ob.normals
    rows[:, th] = ob.theta_map
    b_in = np.r_[base.b_in, -ob.offset0]
    A_eq = np.hstack([base.A_eq, np.zeros((base.A_eq.shape[0], 2))])
    x0, x1, y0, y1 = cell
    lb = np.r_[base.lb, x0, y0]
    ub = np.r_[base.ub, x1, y1]
    return MathProgram(n + 2, None, None, A_eq, base.b_eq, A_in, b_in, lb, ub, base.binaries)


@dataclass
class CellResult:
    verdict: str
    flags: tuple = ()
    milps: int = 0


def classify_cell(cell, kp: KktProgram, obstacles, ranges: OffsetRange | None,
                  pool: list | None = None, settings: SolverSettings | None = None) -> CellResult:
    """Verdict for one axis-aligned cell ``(x0, x1, y0, y1)``.

    ``pool`` holds parameters known to lie in ``F``; members found by the
    intersection MILPs are appended to it.
    """
    if ranges is None:
        return CellResult(UNKNOWN, ("empty-F",))
    settings = settings or SolverSettings()
    pool = pool if pool is not None else list(ranges.witnesses)
    # escape queries: exact from the offset maxima
    for k, ob in enumerate(obstacles):
        lo, _ = _support(ob.normals, cell)
        if np.all(lo > ranges.upper[k] + _TOL):
            return CellResult(UNSAFE)
    flags = []
    milps = 0
    for k, ob in enumerate(obstacles):
        _, hi = _support(ob.normals, cell)
        if np.any(hi < ranges.lower[k] - _TOL):
            continue   # no member of F reaches the cell
        if any(cell_meets_obstacle(ob, th, cell, settings) for th in pool):
            return CellResult(UNKNOWN, tuple(flags), milps)
        milps += 1
        sol = solve_milp(_intersect_program(kp, ob, cell), settings)
        if sol.status == Status.OPTIMAL:
            pool.append(sol.x[kp.idx["theta"]].copy())
            return CellResult(UNKNOWN, tuple(flags), milps)
        if sol.status != Status.INFEASIBLE:
            flags.append(f"limit:{sol.status.value}")
            return CellResult(UNKNOWN, tuple(flags), milps)
    return CellResult(SAFE, tuple(flags), milps)


@dataclass
class GridClassification:
    grid: GridSpec
    verdicts: np.ndarray            # (nx, ny) of verdict strings
    flags: dict = field(default_factory=dict)
    milps: int = 0
    exact_ranges: bool = True

    def count(self, verdict: str) -> int:
        return int(np.sum(self.verdicts == verdict))

    def rows(self):
        for i in range(self.grid.nx):
            for j in range(self.grid.ny):
                yield i, j, str(self.verdicts[i, j])


def _worker(args):
    cells, kp, obstacles, ranges, settings = args
    pool = list(ranges.witnesses) if ranges is not None else []
    return [(i, j, classify_cell(c, kp, obstacles, ranges, pool, settings)) for i, j, c in cells]


def classify_grid(kp: KktProgram, obstacles, grid: GridSpec, settings: SolverSettings | None = None,
                  jobs: int = 1, ranges: OffsetRange | None = None) -> GridClassification:
    """Classify every cell; ``jobs > 1`` splits the cells over worker processes.

    Verdicts do not depend on the split: each one is decided by an exact
    query, and the shared parameter pool only changes how quickly.
    """
    settings = settings or SolverSettings()
    obstacles = tuple(obstacles)
    if ranges is None and kp.infeasible_reason is None:
        ranges = offset_ranges(kp, obstacles, settings)
    cells = list(grid.cells())
    verdicts = np.full((grid.nx, grid.ny), UNKNOWN, dtype=object)
    flags = {}
    total = 0
    if jobs <= 1:
        chunks = [cells]
        results = [_worker((cells, kp, obstacles, ranges, settings))]
    else:
        chunks = [cells[r::jobs] for r in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_worker, [(c, kp, obstacles, ranges, settings) for c in chunks]))
    for res in results:
        for i, j, r in res:
            verdicts[i, j] = r.verdict
            total += r.milps
            if r.flags:
                flags[(i, j)] = r.flags
    if ranges is None:
        log.warning("the KKT-compatible parameter set is empty; every cell is Unknown")
    log.info("classified %d cells with %d intersection MILPs", len(cells), total)
    return GridClassification(grid, verdicts, flags, total, ranges.exact if ranges else False)
