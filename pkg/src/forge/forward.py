"""Robust trajectory synthesis with tube tightening and disjunctive obstacles.

Two modes:

* ``"joint"``: optimize the nominal ``(z, v)`` together with the system
  response.  The tightening margin ``r_w ||a' Psi_w||_1 + r_e ||a' Psi_e||_1``
  is convex in the response and is written with epigraph slacks.
* ``"fixed-phi"``: the response (equivalently the gain) is given, margins are
  constants and only ``(z, v)`` is optimized.

Obstacle disjunctions are handled by enumerating disjunct assignments and
solving one convex program per assignment.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .opt import MathProgram, SolverSettings, Status, solve_qp
from .problem import (BlockOperators, Layout, LtvSystem, NoiseModel, ProblemInstance,
                      build_block_operators, linearize)
from .sls import (FeedbackGain, SystemResponse, deviation_map, k_from_phi,
                  phi_from_k, verify_response)

log = logging.getLogger(__name__)

PHI_REG = 1e-6


class ForwardInfeasible(RuntimeError):
    """No enumerated assignment admits a feasible robust trajectory."""

    def __init__(self, msg, least_violated=None, violation=None):
        super().__init__(msg)
        self.least_violated = least_violated
        self.violation = violation


@dataclass(frozen=True)
class TightenedConstraint:
    a: np.ndarray
    b: float
    margin: float

    @property
    def rhs(self) -> float:
        return self.b - self.margin


def tightening_margins(A: np.ndarray, Psi_w: np.ndarray, Psi_e: np.ndarray,
                       noise: NoiseModel) -> np.ndarray:
    """Worst-case growth of ``A (x, u)`` over the noise balls, one entry per row."""
    A = np.atleast_2d(A)
    m = np.zeros(A.shape[0])
    if noise.w_radius:
        m += noise.w_radius * np.sum(np.abs(A @ Psi_w), axis=1)
    if noise.e_radius:
        m += noise.e_radius * np.sum(np.abs(A @ Psi_e), axis=1)
    return m


def tighten_halfspace(a, b, phi: SystemResponse, noise: NoiseModel,
                      ops: BlockOperators) -> TightenedConstraint:
    a = np.asarray(a, float).ravel()
    Psi_w, Psi_e = deviation_map(phi, ops)
    if a.size != Psi_w.shape[0]:
        raise ValueError(f"row has {a.size} entries, stacked layout has {Psi_w.shape[0]}")
    return TightenedConstraint(a, float(b), float(tightening_margins(a, Psi_w, Psi_e, noise)[0]))


# ---------------------------------------------------------------------------
# assignments

Assignment = tuple  # ((obstacle, t, beta), ...) in group order


def _groups(inst: ProblemInstance) -> list[tuple[int, int]]:
    T = inst.T
    return [(k, t) for k in range(len(inst.unknown.obstacles)) for t in inst.unknown.timesteps(k, T)]


def default_seed_path(inst: ProblemInstance) -> np.ndarray:
    """Straight line from the start to the goal, or the obstacle-free optimum without a goal."""
    lay = inst.layout
    pos = list(inst.unknown.position_indices)
    p0 = np.asarray(inst.system.x0, float)[pos]
    if inst.cost.goal is not None:
        g = np.asarray(inst.cost.goal, float)
        s = np.linspace(0.0, 1.0, lay.T + 1)[:, None]
        return p0 + s * (g - p0)
    sol = _nominal_unconstrained(inst)
    return inst.unknown.positions(lay, sol)


def _nominal_unconstrained(inst: ProblemInstance) -> np.ndarray:
    sys = inst.system
    if not isinstance(sys, LtvSystem):
        sys = linearize(sys, np.tile(sys.x0, (sys.T + 1, 1)), np.zeros((sys.T, sys.n_i)))
    lay = sys.layout
    H, f, _ = inst.cost.quadratic(lay)
    Aeq, beq = dynamics_rows(sys)
    prog = MathProgram(lay.N, H, f, Aeq, beq, inst.known.A, inst.known.b)
    sol = solve_qp(prog)
    if not sol.ok:
        prog = MathProgram(lay.N, H, f, Aeq, beq)
        sol = solve_qp(prog)
    return sol.x


def _segment_hits(ob, P, t, theta, samples: int = 9) -> bool:
    """Whether a seed segment ending or starting at ``t`` crosses the obstacle interior."""
    s = np.linspace(0.0, 1.0, samples)
    for a, b in ((t - 1, t), (t, t + 1)):
        if a < 0 or b >= len(P):
            continue
        for lam in s:
            if np.min(ob.margins((1 - lam) * P[a] + lam * P[b], theta)) > 1e-9:
                return True
    return False


def enumerate_disjunct_assignments(inst: ProblemInstance, seed_path=None,
                                   cap: int = 8) -> list[Assignment]:
    """Heuristic assignment first, then alternatives ordered by seed-path violation.

    The heuristic picks, per obstacle and timestep, the disjunct most
    satisfied by the seed path.  Alternatives re-route the timesteps whose
    adjacent seed segments cross an obstacle (and, separately, that window widened by one
    step each side) through one common disjunct of that obstacle.
    """
    fam = inst.unknown
    if not fam.obstacles:
        return [()]
    theta = np.asarray(inst.theta_star, float)
    P = np.asarray(seed_path if seed_path is not None else default_seed_path(inst), float)
    groups = _groups(inst)
    margins = {}
    for k, t in groups:
        margins[(k, t)] = fam.obstacles[k].margins(P[t], theta)
    heur = {g: int(np.argmin(margins[g])) for g in groups}
    options = []
    for k, ob in enumerate(fam.obstacles):
        ts = [t for kk, t in groups if kk == k]
        inside = [t for t in ts if _segment_hits(ob, P, t, theta)]
        windows = []
        if inside:
            windows.append(inside)
            wide = sorted({u for t in inside for u in (t - 1, t, t + 1) if u in ts})
            if wide != inside:
                windows.append(wide)
        opts = [None] + [(tuple((k, t) for t in w), b) for w in windows for b in range(ob.n_disjuncts)]
        options.append(opts)

    def violation(assign):
        return sum(max(0.0, margins[g][b]) for g, b in assign.items())

    cands = []
    seen = set()
    for combo in itertools.product(*options):
        a = dict(heur)
        for choice in combo:
            if choice is not None:
                window, b = choice
                for g in window:
                    a[g] = b
        key = tuple((k, t, a[(k, t)]) for k, t in groups)
        if key in seen:
            continue
        seen.add(key)
        cands.append((0 if all(c is None for c in combo) else 1, violation(a), len(cands), key))
    cands.sort(key=lambda c: (c[0], c[1], c[2]))
    return [c[3] for c in cands[:max(1, cap)]]


# ---------------------------------------------------------------------------
# program assembly


def dynamics_rows(sys: LtvSystem) -> tuple[np.ndarray, np.ndarray]:
    """``z_0 = x0`` and ``z_{t+1} - A_t z_t - B_t v_t = c_t`` on the stacked vector."""
    lay = sys.layout
    n = lay.n
    rows = np.zeros((n * (lay.T + 1), lay.N))
    rhs = np.zeros(n * (lay.T + 1))
    rows[:n, lay.x(0)] = np.eye(n)
    rhs[:n] = sys.x0
    for t in range(lay.T):
        r = slice(n * (t + 1), n * (t + 2))
        rows[r, lay.x(t + 1)] = np.eye(n)
        rows[r, lay.x(t)] = -sys.A_blocks[t]
        rows[r, lay.u(t)] = -sys.B_blocks[t]
        rhs[r] = sys.drift[t]
    return rows, rhs


def constraint_rows(inst: ProblemInstance, assignment: Assignment, theta=None):
    """Known rows followed by the assigned unknown rows at ``theta``.

    Returns ``(A, b, labels)`` where labels are ``("known", i)`` or
    ``("unknown", k, t, beta)``.
    """
    lay = inst.layout
    theta = np.asarray(inst.theta_star if theta is None else theta, float)
    A = [inst.known.A]
    b = [inst.known.b]
    labels = [("known", i) for i in range(inst.known.m)]
    if assignment:
        fam = inst.unknown
        pos = np.array(fam.position_indices)
        for k, t, beta in assignment:
            ob = fam.obstacles[k]
            a = np.zeros(lay.N)
            a[lay.x(t).start + pos] = ob.normals[beta]
            A.append(a[None, :])
            b.append(np.array([ob.offset0[beta] + ob.theta_map[beta] @ theta]))
            labels.append(("unknown", k, t, beta))
    return np.vstack(A), np.concatenate(b), labels


@dataclass
class ForwardProgram:
    program: MathProgram
    mode: str
    layout: Layout
    labels: list
    n_dyn: int
    budget_rows: np.ndarray       # index into program.A_in of each constraint's enforced row
    phi_index: dict = field(default_factory=dict)  # block name -> (rows, cols, var idx)
    rhs: np.ndarray | None = None
    margins: np.ndarray | None = None


def _phi_variables(ops: BlockOperators, offset: int):
    T, n, n_i, n_o = ops.T, ops.n, ops.n_i, ops.n_o
    rows = n * T + n_i * T
    cols = n * T + n_o * T
    rb = np.r_[np.arange(n * T) // n, np.arange(n_i * T) // n_i]
    cb = np.r_[np.arange(n * T) // n, np.arange(n_o * T) // n_o]
    mask = rb[:, None] >= cb[None, :]
    idx = -np.ones((rows, cols), dtype=int)
    r, c = np.nonzero(mask)
    idx[r, c] = offset + np.arange(r.size)
    return idx, r, c


def assemble_forward_program(inst: ProblemInstance, mode: str, assignment: Assignment,
                             phi: SystemResponse | None = None,
                             system: LtvSystem | None = None) -> ForwardProgram:
    """Convex program for one disjunct assignment.

    ``system`` overrides ``inst.system`` (used for re-linearized models).
    Variables are ``eta`` first; joint mode appends the causal entries of the
    stacked response ``[[phi_xw, phi_xe], [phi_uw, phi_ue]]`` (row-major) and
    the epigraph slacks.
    """
    if inst.theta_star is None:
        raise ValueError("forward synthesis needs theta_star on the instance")
    sys = system if system is not None else inst.system
    if not isinstance(sys, LtvSystem):
        raise TypeError("assemble_forward_program needs a linear(ized) system")
    lay = sys.layout
    N = lay.N
    H_J, f_J, _ = inst.cost.quadratic(lay)
    A_dyn, b_dyn = dynamics_rows(sys)
    A_c, b_c, labels = constraint_rows(inst, assignment)
    ops = build_block_operators(sys)
    noise = inst.noise

    if mode == "fixed-phi":
        if phi is None:
            raise ValueError("fixed-phi mode needs a system response")
        rep = verify_response(phi, ops, tol=1e-6)
        if not rep.passed:
            raise ValueError(f"system response fails the affine constraints: {rep}")
        Psi_w, Psi_e = deviation_map(phi, ops)
        m = tightening_margins(A_c, Psi_w, Psi_e, noise) if A_c.shape[0] else np.zeros(0)
        prog = MathProgram(N, H_J, f_J, A_dyn, b_dyn, A_c, b_c - m)
        return ForwardProgram(prog, mode, lay, labels, A_dyn.shape[0],
                              np.arange(A_c.shape[0]), rhs=b_c, margins=m)
    if mode != "joint":
        raise ValueError(f"unknown forward mode {mode!r}")

    T, n, n_i, n_o = ops.T, ops.n, ops.n_i, ops.n_o
    idx, pr, pc = _phi_variables(ops, N)
    n_phi = pr.size
    nxT = n * T
    ncol = nxT + n_o * T
    nrow = nxT + n_i * T
    # affine constraints on the full stacked response P (nrow x ncol)
    I = np.eye(nxT)
    L = np.hstack([I - ops.Z @ ops.calA, -ops.Z @ ops.calB])           # L P = [I, 0]
    R = np.vstack([I - ops.Z @ ops.calA, -ops.calC])                   # P R = [I; 0]
    E_rows = np.hstack([I, np.zeros((nxT, n_o * T))])
    E_cols = np.vstack([I, np.zeros((n_i * T, nxT))])
    # (L P)[i, j] = sum_k L[i, k] P[k, j]  -> coefficient of var (k, j) is L[i, k]
    eq_rows, eq_rhs = [], []
    Lrow = np.zeros((nxT * ncol, n_phi))
    for v_, (k, j) in enumerate(zip(pr, pc)):
        Lrow[j::ncol, v_] = L[:, k]  # row index i*ncol + j
    rhs1 = E_rows.ravel()
    Rrow = np.zeros((nrow * nxT, n_phi))
    for v_, (i, k) in enumerate(zip(pr, pc)):
        Rrow[i * nxT:(i + 1) * nxT, v_] = R[k, :]   # (P R)[i, j] = sum_k P[i, k] R[k, j]
    rhs2 = E_cols.ravel()
    for M_, r_ in ((Lrow, rhs1), (Rrow, rhs2)):
        keep = np.any(M_ != 0, axis=1)
        bad = (~keep) & (r_ != 0)
        if np.any(bad):
            raise RuntimeError("structurally infeasible response constraints")
        eq_rows.append(M_[keep])
        eq_rhs.append(r_[keep])
    A_phi = np.vstack(eq_rows)
    b_phi = np.concatenate(eq_rhs)

    # noise coefficients of each constraint row as an affine function of phi:
    # coef_w = Z' (P_w' a_eff) + const_w, coef_e = P_e' a_eff
    m_c = A_c.shape[0]
    slack_cols = []   # (constraint, which, column, coef_row(n_phi), const)
    radii = {"w": noise.w_radius, "e": noise.e_radius}
    for ci in range(m_c):
        a = A_c[ci]
        a_x = a[: n * (T + 1)]
        a_u = a[n * (T + 1):]
        a_eff = np.r_[a_x[:nxT], a_u].astype(float)
        aT = a_x[nxT:]
        a_eff[nxT - n:nxT] += ops.A_last.T @ aT
        a_eff[nxT + n_i * (T - 1):] += ops.B_last.T @ aT
        # D[col, var] = a_eff[row(var)] for var in column col
        D = np.zeros((ncol, n_phi))
        D[pc, np.arange(n_phi)] = a_eff[pr]
        coef_w = ops.Z.T @ D[:nxT]
        const_w = np.zeros(nxT)
        const_w[nxT - n:] = aT
        coef_e = D[nxT:]
        const_e = np.zeros(n_o * T)
        for which, coef, const in (("w", coef_w, const_w), ("e", coef_e, const_e)):
            if radii[which] == 0:
                continue
            nz = np.flatnonzero(np.any(coef != 0, axis=1) | (const != 0))
            for j in nz:
                slack_cols.append((ci, which, coef[j], const[j]))
    n_s = len(slack_cols)
    nv = N + n_phi + n_s
    A_in = np.zeros((2 * n_s + m_c, nv))
    b_in = np.zeros(2 * n_s + m_c)
    for s_i, (ci, which, coef, const) in enumerate(slack_cols):
        col = N + n_phi + s_i
        A_in[2 * s_i, N:N + n_phi] = coef
        A_in[2 * s_i, col] = -1.0
        b_in[2 * s_i] = -const
        A_in[2 * s_i + 1, N:N + n_phi] = -coef
        A_in[2 * s_i + 1, col] = -1.0
        b_in[2 * s_i + 1] = const
    budget = 2 * n_s + np.arange(m_c)
    A_in[budget, :N] = A_c
    b_in[budget] = b_c
    for s_i, (ci, which, _, _) in enumerate(slack_cols):
        A_in[budget[ci], N + n_phi + s_i] = radii[which]

    A_eq = np.zeros((A_dyn.shape[0] + A_phi.shape[0], nv))
    A_eq[:A_dyn.shape[0], :N] = A_dyn
    A_eq[A_dyn.shape[0]:, N:N + n_phi] = A_phi
    b_eq = np.r_[b_dyn, b_phi]
    H = np.zeros((nv, nv))
    H[:N, :N] = H_J
    H[N:, N:] += 2 * PHI_REG * np.eye(nv - N)
    f = np.r_[f_J, np.zeros(nv - N)]
    prog = MathProgram(nv, H, f, A_eq, b_eq, A_in, b_in)
    return ForwardProgram(prog, mode, lay, labels, A_dyn.shape[0], budget,
                          phi_index={"idx": idx, "rows": pr, "cols": pc, "offset": N},
                          rhs=b_c)


def _phi_from_solution(fp: ForwardProgram, x: np.ndarray, ops: BlockOperators) -> SystemResponse:
    T, n, n_i, n_o = ops.T, ops.n, ops.n_i, ops.n_o
    pi = fp.phi_index
    P = np.zeros((n * T + n_i * T, n * T + n_o * T))
    P[pi["rows"], pi["cols"]] = x[pi["idx"][pi["rows"], pi["cols"]]]
    nxT = n * T
    return SystemResponse(P[:nxT, :nxT], P[:nxT, nxT:], P[nxT:, :nxT], P[nxT:, nxT:], n, n_i, n_o)


# ---------------------------------------------------------------------------
# solutions


@dataclass
class ForwardSolution:
    z: np.ndarray                 # (T+1, n)
    v: np.ndarray                 # (T, n_i)
    phi: SystemResponse
    K: FeedbackGain
    lam_known: np.ndarray
    lam_unknown: np.ndarray       # aligned with ``assignment``
    nu: np.ndarray                # dynamics multipliers
    assignment: Assignment
    objective: float
    mode: str
    system: LtvSystem             # model used at the solution (linearized if nonlinear)
    margins_known: np.ndarray
    margins_unknown: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def eta(self) -> np.ndarray:
        return np.r_[self.z.ravel(), self.v.ravel()]


def _solve_assignment(inst, mode, assignment, K_fixed, settings, system):
    ops = build_block_operators(system)
    phi = None
    if mode == "fixed-phi":
        phi = phi_from_k(K_fixed, ops)
    fp = assemble_forward_program(inst, mode, assignment, phi=phi, system=system)
    sol = solve_qp(fp.program, settings)
    if not sol.ok:
        return None, fp, sol
    lay = fp.layout
    x = sol.x
    eta = x[:lay.N]
    if mode == "joint":
        phi = _phi_from_solution(fp, x, ops)
        K = k_from_phi(phi)
    else:
        K = K_fixed
    lam = sol.ineq_multipliers[fp.budget_rows]
    m_k = inst.known.m
    Psi_w, Psi_e = deviation_map(phi, ops)
    A_c, b_c, _ = constraint_rows(inst, assignment)
    margins = tightening_margins(A_c, Psi_w, Psi_e, inst.noise) if A_c.shape[0] else np.zeros(0)
    z, v = lay.split(eta)
    H_J, f_J, c_J = inst.cost.quadratic(lay)
    fs = ForwardSolution(
        z=z.copy(), v=v.copy(), phi=phi, K=K,
        lam_known=lam[:m_k], lam_unknown=lam[m_k:], nu=sol.eq_multipliers[:fp.n_dyn],
        assignment=tuple(assignment),
        objective=0.5 * float(eta @ H_J @ eta) + float(f_J @ eta) + c_J,
        mode=mode, system=system, margins_known=margins[:m_k], margins_unknown=margins[m_k:],
        info={"solver": sol.info})
    return fs, fp, sol


def solve_forward(inst: ProblemInstance, mode: str = "joint", K: FeedbackGain | None = None,
                  settings: SolverSettings | None = None, seed_path=None, max_assignments: int = 8,
                  max_linearizations: int = 20, lin_tol: float = 1e-6) -> ForwardSolution:
    """Best robust solution over the enumerated disjunct assignments.

    Ties in objective keep the earlier assignment.  Nonlinear systems are
    re-linearized about the current nominal until ``||dz||_inf <= lin_tol``.
    """
    settings = settings or SolverSettings.from_dict(inst.solver)
    if inst.theta_star is None:
        raise ValueError("forward synthesis needs theta_star on the instance")
    if mode == "fixed-phi" and K is None:
        raise ValueError("fixed-phi mode needs a feedback gain")
    assignments = enumerate_disjunct_assignments(inst, seed_path, cap=max_assignments)
    nonlinear = not isinstance(inst.system, LtvSystem)
    # the noise-free nominal program relaxes the robust one, so its optimum
    # bounds each assignment from below; visit in bound order and prune
    bounds = [_nominal_bound(inst, a, settings) for a in assignments]
    order = sorted(range(len(assignments)), key=lambda i: (bounds[i], i))
    best: ForwardSolution | None = None
    best_i = -1
    least, least_viol = None, np.inf
    tried = 0
    for i in order:
        assignment = assignments[i]
        if not np.isfinite(bounds[i]):
            if least is None:
                least = assignment
            continue
        if best is not None and bounds[i] > best.objective + 1e-9 * max(1.0, abs(best.objective)):
            break
        tried += 1
        if nonlinear:
            fs = _solve_nonlinear(inst, mode, assignment, K, settings, max_linearizations, lin_tol)
        else:
            fs, fp, sol = _solve_assignment(inst, mode, assignment, K, settings, inst.system)
            if fs is None:
                viol = float(sol.certificate.get("phase1_objective", np.inf)) if sol.certificate else np.inf
                if least is None or viol < least_viol:
                    least, least_viol = assignment, viol
        log.debug("assignment %s -> %s", assignment, "ok" if fs is not None else "infeasible")
        if fs is None:
            continue
        tol = 1e-9 * max(1.0, abs(fs.objective))
        if best is None or fs.objective < best.objective - tol or (
                abs(fs.objective - best.objective) <= tol and i < best_i):
            best, best_i = fs, i
    if best is None:
        raise ForwardInfeasible(f"all {len(assignments)} disjunct assignments are infeasible",
                                least_violated=least if least is not None else assignments[0],
                                violation=least_viol)
    best.info["assignments_enumerated"] = len(assignments)
    best.info["assignments_solved"] = tried
    return best


def _nominal_bound(inst, assignment, settings) -> float:
    sys = inst.system
    if not isinstance(sys, LtvSystem):
        return 0.0  # no cheap relaxation for nonlinear models; never prunes
    lay = sys.layout
    H, f, c = inst.cost.quadratic(lay)
    A_dyn, b_dyn = dynamics_rows(sys)
    A_c, b_c, _ = constraint_rows(inst, assignment)
    sol = solve_qp(MathProgram(lay.N, H, f, A_dyn, b_dyn, A_c, b_c), settings)
    if sol.status == Status.INFEASIBLE:
        return np.inf
    return sol.objective + c if sol.ok else -np.inf


def _solve_nonlinear(inst, mode, assignment, K, settings, max_iter, tol):
    sys = inst.system
    T = sys.T
    z = np.tile(sys.x0, (T + 1, 1))
    v = np.zeros((T, sys.n_i))
    fs = None
    for it in range(max_iter):
        lin = linearize(sys, z, v)
        fs, _, _ = _solve_assignment(inst, mode, assignment, K, settings, lin)
        if fs is None:
            return None
        # nominal of the nonlinear model under the new inputs
        z_new = sys.rollout(fs.v)
        dz = float(np.max(np.abs(z_new - z)))
        z, v = z_new, fs.v
        if dz <= tol:
            break
    # report the nonlinear-consistent nominal
    fs.z = z
    fs.info["linearizations"] = it + 1
    return fs


def check_rollout_constraints(inst: ProblemInstance, eta, theta=None, tol: float = 1e-9) -> dict:
    """Violations of known rows and obstacles by a realized trajectory."""
    theta = inst.theta_star if theta is None else theta
    known = inst.known.A @ eta - inst.known.b if inst.known.m else np.zeros(0)
    obs = inst.unknown.violations(inst.layout, eta, theta)
    return {"known": float(np.max(known, initial=-np.inf)),
            "known_violated": int(np.sum(known > tol)),
            "obstacle_violated": int(sum(1 for *_, depth in obs if depth > tol))}
