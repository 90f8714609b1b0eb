"""Program and solution containers shared by every solver backend."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"


@dataclass(frozen=True)
class SolverSettings:
    feas_tol: float = 1e-7
    stat_tol: float = 1e-7
    int_tol: float = 1e-6
    max_iter: int = 20000
    max_nodes: int = 20000

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverSettings":
        d = dict(d or {})
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def _as2d(a, n):
    if a is None:
        return np.zeros((0, n))
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(1, -1) if a.size else np.zeros((0, n))
    return a


def _as1d(b, m):
    if b is None:
        return np.zeros(m)
    return np.asarray(b, dtype=float).reshape(-1)


@dataclass
class MathProgram:
    """``min 1/2 x'Hx + f'x`` subject to ``A_eq x = b_eq``, ``A_in x <= b_in``,
    ``lb <= x <= ub`` and ``x[i] in {0, 1}`` for ``i in binaries``.

    ``H`` and ``f`` may both be ``None`` for a pure feasibility program.
    """

    n: int
    H: np.ndarray | None = None
    f: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    binaries: tuple[int, ...] = ()
    names: list[str] | None = None

    def __post_init__(self):
        n = int(self.n)
        self.n = n
        if self.H is not None:
            self.H = np.asarray(self.H, dtype=float).reshape(n, n)
        if self.f is not None:
            self.f = np.asarray(self.f, dtype=float).reshape(n)
        self.A_eq = _as2d(self.A_eq, n)
        self.b_eq = _as1d(self.b_eq, self.A_eq.shape[0])
        self.A_in = _as2d(self.A_in, n)
        self.b_in = _as1d(self.b_in, self.A_in.shape[0])
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).copy()
        self.binaries = tuple(int(i) for i in self.binaries)
        for i in self.binaries:
            self.lb[i] = max(self.lb[i], 0.0)
            self.ub[i] = min(self.ub[i], 1.0)

    @property
    def is_feasibility(self) -> bool:
        return self.H is None and self.f is None

    def objective(self, x: np.ndarray) -> float:
        val = 0.0
        if self.H is not None:
            val += 0.5 * float(x @ self.H @ x)
        if self.f is not None:
            val += float(self.f @ x)
        return val

    def check(self) -> None:
        """Raise ``ValueError`` on inconsistent shapes or non-finite data."""
        n = self.n
        if self.A_eq.shape[1] != n or self.A_in.shape[1] != n:
            raise ValueError("constraint matrices must have n columns")
        if self.A_eq.shape[0] != self.b_eq.size or self.A_in.shape[0] != self.b_in.size:
            raise ValueError("constraint right-hand sides do not match row counts")
        for name in ("H", "f", "A_eq", "b_eq", "A_in", "b_in"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise ValueError("NaN in variable bounds")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bounds must have length n")
        for i in self.binaries:
            if not 0 <= i < n:
                raise ValueError(f"binary index {i} out of range")

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> "MathProgram":
        return MathProgram(self.n, self.H, self.f, self.A_eq, self.b_eq, self.A_in,
                           self.b_in, lb, ub, self.binaries, self.names)

    def to_json(self) -> str:
        """Debug dump (infinite bounds become ``null``)."""

        def arr(a):
            if a is None:
                return None
            return np.where(np.isfinite(a), a, np.nan).tolist()

        d = {
            "n": self.n,
            "H": arr(self.H), "f": arr(self.f),
            "A_eq": arr(self.A_eq), "b_eq": arr(self.b_eq),
            "A_in": arr(self.A_in), "b_in": arr(self.b_in),
            "lb": arr(self.lb), "ub": arr(self.ub),
            "binaries": list(self.binaries),
            "names": self.names,
        }
        return json.dumps(d).replace("NaN", "null")


@dataclass
class Solution:
    status: Status
    x: np.ndarray | None = None
    eq_multipliers: np.ndarray | None = None
    ineq_multipliers: np.ndarray | None = None
    lower_multipliers: np.ndarray | None = None
    upper_multipliers: np.ndarray | None = None
    objective: float = float("nan")
    certificate: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL


def kkt_residuals(prog: MathProgram, sol: Solution) -> dict[str, float]:
    """Primal feasibility, stationarity and complementarity residuals of ``sol``."""
    x = sol.x
    g = (prog.H @ x if prog.H is not None else 0.0) + (prog.f if prog.f is not None else 0.0)
    g = np.zeros(prog.n) + g
    nu = sol.eq_multipliers if sol.eq_multipliers is not None else np.zeros(prog.A_eq.shape[0])
    lam = sol.ineq_multipliers if sol.ineq_multipliers is not None else np.zeros(prog.A_in.shape[0])
    lo = sol.lower_multipliers if sol.lower_multipliers is not None else np.zeros(prog.n)
    hi = sol.upper_multipliers if sol.upper_multipliers is not None else np.zeros(prog.n)
    stat = g + prog.A_eq.T @ nu + prog.A_in.T @ lam - lo + hi
    slack_in = prog.A_in @ x - prog.b_in
    res = {
        "eq": float(np.max(np.abs(prog.A_eq @ x - prog.b_eq), initial=0.0)),
        "ineq": float(np.max(slack_in, initial=0.0)),
        "bounds": float(max(np.max(prog.lb - x, initial=0.0), np.max(x - prog.ub, initial=0.0))),
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "dual": float(max(np.max(-lam, initial=0.0), np.max(-lo, initial=0.0), np.max(-hi, initial=0.0))),
    }
    comp = np.abs(lam * slack_in)
    fin_lo = np.isfinite(prog.lb)
    fin_hi = np.isfinite(prog.ub)
    comp_b = np.concatenate([np.abs(lo[fin_lo] * (x - prog.lb)[fin_lo]),
                             np.abs(hi[fin_hi] * (prog.ub - x)[fin_hi])])
    res["complementarity"] = float(max(np.max(comp, initial=0.0), np.max(comp_b, initial=0.0)))
    return res


class SolverBackend(Protocol):
    """Anything that turns an assembled program into a :class:`Solution`."""

    def solve(self, prog: MathProgram, settings: SolverSettings | None = None) -> Solution:
        ...
