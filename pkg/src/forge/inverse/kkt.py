"""KKT inversion: parameters consistent with the optimality of a recovered trajectory.

At a frozen nominal ``eta`` with frozen tightening margins every constraint
value is affine in ``theta``:

    g_j(theta) = a_j . eta + margin_j - c0_j - G_j . theta  (unknown rows)
    g_i        = a_i . eta + margin_i - b_i                 (known rows, constant)

The feasibility program over ``(theta, lambda_known, lambda_unknown, nu)`` with
binaries ``s`` (which disjunct certifies each obstacle/timestep) and ``c``
(which multipliers may be positive) is

    g_j(theta) <= M_j (1 - s_j) + tol,   sum_beta s_j >= 1 per group
    0 <= lambda_j <= M_lam c_j,          c_j <= s_j
    -g_j(theta) <= M'_j (1 - c_j) + tol
    grad J(eta) + A_k' lambda_k + A_u' lambda_u + A_dyn' nu = 0

Known rows are classified once: active rows get a free multiplier, slack rows
none.  In relaxed mode (corrupted data) rows violated at ``eta`` count as
active instead of making the program infeasible.  Bounds on ``theta`` come from the parameter box, which also supplies
the big-M constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..forward import dynamics_rows, tightening_margins
from ..opt import MathProgram, Solution, SolverSettings, Status, solve_milp
from ..problem import ProblemInstance, build_block_operators
from ..sls import deviation_map
from .recovery import RecoveredPolicy

M_LAMBDA = 1e3


@dataclass(frozen=True)
class UnknownRow:
    group: int        # index into KktProgram.groups
    obstacle: int
    t: int
    beta: int
    a: np.ndarray     # row over eta
    kappa: float      # g(theta) = kappa - G . theta
    G: np.ndarray
    gmin: float
    gmax: float


@dataclass
class KktProgram:
    program: MathProgram
    d: int
    theta_lower: np.ndarray
    theta_upper: np.ndarray
    rows: list                    # UnknownRow for every kept disjunct
    groups: list                  # (obstacle, t) per kept group
    known_active: np.ndarray      # indices of known rows with a free multiplier
    known_g: np.ndarray           # constant known constraint values
    grad: np.ndarray
    A_dyn: np.ndarray
    A_known: np.ndarray
    eta: np.ndarray
    idx: dict                     # variable blocks -> slice
    relaxed: bool
    tol: float
    M_lambda: float
    infeasible_reason: str | None = None
    all_rows: list = field(default_factory=list)   # every disjunct, including dropped ones
    tol_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))  # rows carrying +tol

    @property
    def n_binaries(self) -> int:
        return len(self.program.binaries)

    def fixed_theta(self, theta) -> MathProgram:
        th = np.asarray(theta, float)
        lb = self.program.lb.copy()
        ub = self.program.ub.copy()
        lb[self.idx["theta"]] = th
        ub[self.idx["theta"]] = th
        return self.program.with_bounds(lb, ub)


def _known_rows(inst: ProblemInstance):
    return inst.known.A, inst.known.b


def build_kkt_program(policy: RecoveredPolicy, inst: ProblemInstance, M_lambda: float = M_LAMBDA,
                      relaxed: bool = False, tol: float | None = None,
                      theta_fixed=None) -> KktProgram:
    """Assemble the KKT feasibility MILP at the recovered trajectory.

    ``relaxed`` adds nonnegative stationarity slacks whose sum is minimized,
    for trajectories recovered from corrupted data.  ``theta_fixed`` narrows
    the parameter box to a point before presolve.
    """
    fam = inst.unknown
    d = fam.param_dim
    lo = np.asarray(fam.param_lower, float).copy()
    hi = np.asarray(fam.param_upper, float).copy()
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("parameter box must be bounded to derive big-M constants")
    if theta_fixed is not None:
        lo = hi = np.asarray(theta_fixed, float).copy()
    tol = tol if tol is not None else (1e-4 if relaxed else 1e-6)

    sys = policy.system
    lay = sys.layout
    N = lay.N
    eta = policy.eta
    H, f, _ = inst.cost.quadratic(lay)
    grad = H @ eta + f
    A_dyn, _ = dynamics_rows(sys)
    ops = build_block_operators(sys)
    Psi_w, Psi_e = deviation_map(policy.phi, ops)

    A_k, b_k = _known_rows(inst)
    m_k = A_k.shape[0]
    if m_k:
        g_k = A_k @ eta + tightening_margins(A_k, Psi_w, Psi_e, inst.noise) - b_k
    else:
        g_k = np.zeros(0)
    reason = None
    if np.any(g_k > tol) and not relaxed:
        reason = f"known constraint {int(np.argmax(g_k))} violated by {float(np.max(g_k)):.3g}"
    known_active = np.flatnonzero(np.abs(g_k) <= tol) if not relaxed else np.flatnonzero(g_k >= -tol)

    # unknown rows
    fam_rows = fam.rows(lay)
    all_rows, kept_groups, kept = [], [], []
    for k, per_t in enumerate(fam_rows):
        for group in per_t:
            A_g = np.array([r.a for r in group])
            m_g = tightening_margins(A_g, Psi_w, Psi_e, inst.noise)
            cand = []
            always_ok = False
            for r, mg in zip(group, m_g):
                kappa = float(r.a @ eta + mg - r.c0)
                # range of -G . theta over the box
                Gp = np.maximum(r.G, 0.0)
                Gn = np.minimum(r.G, 0.0)
                gmin = kappa - float(Gp @ hi + Gn @ lo)
                gmax = kappa - float(Gp @ lo + Gn @ hi)
                row = UnknownRow(-1, k, r.t, r.beta, r.a, kappa, r.G, gmin, gmax)
                all_rows.append(row)
                cand.append(row)
                if gmax <= -tol:
                    always_ok = True
            can_touch = [r for r in cand if r.gmin <= tol and r.gmax >= -tol]
            if always_ok and not can_touch:
                continue
            gi = len(kept_groups)
            kept_groups.append((k, group[0].t))
            for r in cand:
                kept.append(UnknownRow(gi, r.obstacle, r.t, r.beta, r.a, r.kappa, r.G, r.gmin, r.gmax))

    n_ka = known_active.size
    n_u = len(kept)
    n_nu = A_dyn.shape[0]
    n_r = 2 * N if relaxed else 0
    sizes = [("theta", d), ("lam_k", n_ka), ("lam_u", n_u), ("nu", n_nu), ("r", n_r),
             ("s", n_u), ("c", n_u)]
    idx, off = {}, 0
    for name, sz in sizes:
        idx[name] = slice(off, off + sz)
        off += sz
    nv = off
    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    lb[idx["theta"]] = lo
    ub[idx["theta"]] = hi
    lb[idx["lam_k"]] = 0.0
    ub[idx["lam_k"]] = M_lambda
    lb[idx["lam_u"]] = 0.0
    ub[idx["lam_u"]] = M_lambda
    lb[idx["r"]] = 0.0
    lb[idx["s"]] = 0.0
    ub[idx["s"]] = 1.0
    lb[idx["c"]] = 0.0
    ub[idx["c"]] = 1.0

    # stationarity
    A_eq = np.zeros((N, nv))
    A_eq[:, idx["lam_k"]] = A_k[known_active].T if n_ka else np.zeros((N, 0))
    if n_u:
        A_eq[:, idx["lam_u"]] = np.array([r.a for r in kept]).T
    A_eq[:, idx["nu"]] = A_dyn.T
    if relaxed:
        A_eq[:, idx["r"]] = np.hstack([np.eye(N), -np.eye(N)])
    b_eq = -grad

    rows, rhs = [], []
    th0 = idx["theta"].start
    s0, c0, l0 = idx["s"].start, idx["c"].start, idx["lam_u"].start
    for j, r in enumerate(kept):
        M = 2.0 * max(r.gmax, 0.0) + 1.0
        Mc = 2.0 * max(-r.gmin, 0.0) + 1.0
        # kappa - G theta <= M (1 - s) + tol
        row = np.zeros(nv)
        row[th0:th0 + d] = -r.G
        row[s0 + j] = M
        rows.append(row)
        rhs.append(M - r.kappa + tol)
        # lambda <= M_lambda c
        row = np.zeros(nv)
        row[l0 + j] = 1.0
        row[c0 + j] = -M_lambda
        rows.append(row)
        rhs.append(0.0)
        # c <= s
        row = np.zeros(nv)
        row[c0 + j] = 1.0
        row[s0 + j] = -1.0
        rows.append(row)
        rhs.append(0.0)
        # -(kappa - G theta) <= Mc (1 - c) + tol
        row = np.zeros(nv)
        row[th0:th0 + d] = r.G
        row[c0 + j] = Mc
        rows.append(row)
        rhs.append(Mc + r.kappa + tol)
        # presolve fixes
        if r.gmin > tol:
            ub[s0 + j] = 0.0
            ub[c0 + j] = 0.0
        elif r.gmax < -tol:
            ub[c0 + j] = 0.0
    for gi in range(len(kept_groups)):
        row = np.zeros(nv)
        for j, r in enumerate(kept):
            if r.group == gi:
                row[s0 + j] = -1.0
        rows.append(row)
        rhs.append(-1.0)
    ub[idx["lam_u"]] = np.where(ub[idx["c"]] == 0.0, 0.0, M_lambda)
    A_in = np.array(rows).reshape(-1, nv)
    b_in = np.array(rhs)
    binaries = tuple(range(idx["s"].start, idx["c"].stop))
    f_obj = None
    if relaxed:
        f_obj = np.zeros(nv)
        f_obj[idx["r"]] = 1.0
    prog = MathProgram(nv, None, f_obj, A_eq, b_eq, A_in, b_in, lb, ub, binaries)
    return KktProgram(prog, d, lo, hi, kept, kept_groups, known_active, g_k, grad, A_dyn,
                      A_k, eta, idx, relaxed, tol, M_lambda, reason, all_rows,
                      np.r_[np.arange(0, 4 * n_u, 4), np.arange(3, 4 * n_u, 4)].astype(int))


@dataclass
class ParamWitness:
    status: Status
    theta: np.ndarray | None = None
    lam_known: np.ndarray | None = None     # one entry per known row
    lam_unknown: np.ndarray | None = None   # one entry per kept unknown row
    nu: np.ndarray | None = None
    s: np.ndarray | None = None
    c: np.ndarray | None = None
    stationarity_slack: float = 0.0
    audit: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status == Status.OPTIMAL


def _witness(kp: KktProgram, sol: Solution) -> ParamWitness:
    if sol.status != Status.OPTIMAL and not (sol.status == Status.ITER_LIMIT and sol.x is not None):
        return ParamWitness(sol.status, info={**sol.info, "certificate": sol.certificate})
    x = sol.x
    lam_k = np.zeros(kp.A_known.shape[0])
    lam_k[kp.known_active] = x[kp.idx["lam_k"]]
    lam_u = x[kp.idx["lam_u"]]
    w = ParamWitness(sol.status, theta=x[kp.idx["theta"]].copy(), lam_known=lam_k,
                     lam_unknown=lam_u.copy(), nu=x[kp.idx["nu"]].copy(),
                     s=np.round(x[kp.idx["s"]]), c=np.round(x[kp.idx["c"]]),
                     stationarity_slack=float(np.sum(x[kp.idx["r"]])) if kp.relaxed else 0.0,
                     info=dict(sol.info))
    cap = 0.99 * kp.M_lambda
    w.audit = {
        "lambda_near_cap": bool(np.any(lam_u >= cap) or np.any(lam_k >= cap)),
    }
    return w


def infer_theta(kp: KktProgram, theta_fixed=None, settings: SolverSettings | None = None,
                objective=None) -> ParamWitness:
    """Any feasible ``(theta, lambda, nu)``; with ``theta_fixed`` a membership test.

    ``objective`` (a vector over ``theta``) turns the search into minimizing
    ``objective . theta`` over the feasible set.
    """
    if kp.infeasible_reason:
        return ParamWitness(Status.INFEASIBLE, info={"reason": kp.infeasible_reason})
    settings = settings or SolverSettings()
    prog = kp.program if theta_fixed is None else kp.fixed_theta(theta_fixed)
    if objective is not None:
        f = np.zeros(prog.n) if prog.f is None else prog.f.copy()
        f[kp.idx["theta"]] += np.asarray(objective, float)
        prog = MathProgram(prog.n, None, f, prog.A_eq, prog.b_eq, prog.A_in, prog.b_in,
                           prog.lb, prog.ub, prog.binaries)
    sol = solve_milp(prog, settings)
    if objective is None and not kp.relaxed and sol.status == Status.OPTIMAL:
        fixed = _polish(kp, prog, sol, settings)
        if fixed is not None:
            sol = fixed
    w = _witness(kp, sol)
    if theta_fixed is not None and w.theta is not None:
        w.theta = np.asarray(theta_fixed, float).copy()   # bounds pin it; drop solver round-off
    return w


def _polish(kp: KktProgram, prog: MathProgram, sol: Solution, settings: SolverSettings) -> Solution | None:
    """Re-solve with the binaries fixed and no ``tol`` slack on the switched rows.

    The MILP accepts constraint values within ``tol`` of zero, and a large
    multiplier times that slack can exceed the replay tolerance.  ``None``
    when the exact system is infeasible for these switches.
    """
    b = np.asarray(prog.binaries, dtype=int)
    lb, ub = prog.lb.copy(), prog.ub.copy()
    lb[b] = ub[b] = np.round(sol.x[b])
    b_in = prog.b_in.copy()
    b_in[kp.tol_rows] -= kp.tol
    lp = MathProgram(prog.n, None, prog.f, prog.A_eq, prog.b_eq, prog.A_in, b_in, lb, ub, ())
    pol = solve_milp(lp, settings)
    if pol.status != Status.OPTIMAL:
        return None
    pol.x[b] = lb[b]
    pol.info = {**sol.info, "polished": True}
    return pol


def replay_residuals(kp: KktProgram, w: ParamWitness) -> dict[str, float]:
    """Evaluate every KKT condition group directly at the witness.

    Primal feasibility uses, per obstacle/timestep, the best disjunct; the
    multiplier of a disjunct counts as complementary when the disjunct value
    is zero.
    """
    theta = w.theta
    res = {}
    # known rows
    lam_k = w.lam_known
    res["primal_known"] = float(np.max(kp.known_g, initial=0.0))
    res["comp_known"] = float(np.max(np.abs(lam_k * kp.known_g), initial=0.0))
    res["dual"] = float(max(np.max(-lam_k, initial=0.0), np.max(-w.lam_unknown, initial=0.0)))
    gvals = np.array([r.kappa - r.G @ theta for r in kp.rows])
    worst = 0.0
    for gi in range(len(kp.groups)):
        js = [j for j, r in enumerate(kp.rows) if r.group == gi]
        worst = max(worst, float(np.min(gvals[js])))
    res["primal_unknown"] = max(worst, 0.0)
    res["comp_unknown"] = float(np.max(np.abs(w.lam_unknown * gvals), initial=0.0))
    # a positive multiplier on a disjunct that is not the certifying one is fine
    # only if that disjunct is itself satisfied
    bad = [max(gvals[j], 0.0) for j in range(len(kp.rows)) if w.lam_unknown[j] > 1e-9]
    res["active_primal"] = float(max(bad, default=0.0))
    A_u = np.array([r.a for r in kp.rows]).reshape(len(kp.rows), kp.grad.size)
    stat = kp.grad + kp.A_known.T @ lam_k + A_u.T @ w.lam_unknown + kp.A_dyn.T @ w.nu
    res["stationarity"] = float(np.max(np.abs(stat), initial=0.0))
    return res


def theta_box_of_F(kp: KktProgram, settings: SolverSettings | None = None):
    """Componentwise ``[min, max]`` of ``theta`` over the KKT-feasible set.

    Returns ``(lower, upper, witnesses, exact)``; a component whose MILP hit a
    limit falls back to the parameter box (still a valid enclosure) and marks
    ``exact`` False.
    """
    lower = kp.theta_lower.copy()
    upper = kp.theta_upper.copy()
    witnesses = []
    exact = np.ones((kp.d, 2), dtype=bool)
    for i in range(kp.d):
        for sign, col in ((1.0, 0), (-1.0, 1)):
            obj = np.zeros(kp.d)
            obj[i] = sign
            w = infer_theta(kp, settings=settings, objective=obj)
            if w.status == Status.OPTIMAL:
                witnesses.append(w)
                if sign > 0:
                    lower[i] = w.theta[i]
                else:
                    upper[i] = w.theta[i]
            elif w.status == Status.INFEASIBLE:
                return None, None, [], True
            else:
                exact[i, col] = False
    return lower, upper, witnesses, bool(exact.all())
