"""Dense primal active-set solver for convex QPs and LPs.

Equalities are eliminated once through an orthonormal null-space basis; the
remaining inequality-constrained problem is solved by a primal active-set
iteration whose working-set factorization ``G_W' = QR`` is updated with
Givens insert/delete operations instead of being refactored.  Zero-curvature
directions (LPs, singular reduced Hessians) are handled by moving along a
descent ray until a constraint blocks, which makes the LP case a simplex-like
vertex walk.  A feasible start comes from an elastic phase-1 LP.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .program import MathProgram, Solution, SolverSettings, Status

log = logging.getLogger(__name__)

_REFACTOR_EVERY = 60


@dataclass
class EqualityReduction:
    """``{x : A_eq x = b_eq} = {x_p + N y}`` with ``N`` orthonormal."""

    x_p: np.ndarray
    N: np.ndarray
    residual: float
    rank: int


def reduce_equalities(A_eq: np.ndarray, b_eq: np.ndarray, n: int) -> EqualityReduction:
    if A_eq.shape[0] == 0:
        return EqualityReduction(np.zeros(n), np.eye(n), 0.0, 0)
    norms = np.linalg.norm(A_eq, axis=1)
    keep = norms > 0
    resid0 = float(np.max(np.abs(b_eq[~keep]), initial=0.0))
    A = A_eq[keep] / norms[keep, None]
    b = b_eq[keep] / norms[keep]
    if A.shape[0] == 0:
        return EqualityReduction(np.zeros(n), np.eye(n), resid0, 0)
    # only columns touched by an equality need the SVD; the rest are free
    used = np.any(A != 0.0, axis=0)
    cols = np.flatnonzero(used)
    free = np.flatnonzero(~used)
    U, s, Vt = np.linalg.svd(A[:, cols], full_matrices=True)
    tol = max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0) * 10
    r = int(np.sum(s > max(tol, 1e-10)))
    y = (U[:, :r].T @ b) / s[:r]
    xc = Vt[:r].T @ y
    x_p = np.zeros(n)
    x_p[cols] = xc
    resid = max(resid0, float(np.max(np.abs(A @ x_p - b), initial=0.0)))
    Nc = Vt[r:].T
    N = np.zeros((n, Nc.shape[1] + free.size))
    N[np.ix_(cols, np.arange(Nc.shape[1]))] = Nc
    N[free, Nc.shape[1] + np.arange(free.size)] = 1.0
    return EqualityReduction(x_p, N, resid, r)


class _WorkingSet:
    """QR factorization of the transposed working-set rows."""

    def __init__(self, G: np.ndarray, n: int):
        self.G = G
        self.n = n
        self.rows: list[int] = []
        self.Q = np.eye(n)
        self.R = np.zeros((n, 0))
        self.updates = 0

    @property
    def k(self) -> int:
        return len(self.rows)

    def refactor(self):
        if self.rows:
            self.Q, self.R = sla.qr(self.G[self.rows].T, mode="full")
        else:
            self.Q, self.R = np.eye(self.n), np.zeros((self.n, 0))
        self.updates = 0

    def try_add(self, i: int, tol: float = 1e-10) -> bool:
        if self.k >= self.n:
            return False
        u = self.G[i]
        # component of u outside span of current rows
        tail = self.Q[:, self.k:].T @ u
        if np.linalg.norm(tail) <= tol * max(1.0, np.linalg.norm(u)):
            return False
        self.Q, self.R = sla.qr_insert(self.Q, self.R, u, self.k, which="col")
        self.rows.append(i)
        self._bump()
        return True

    def add(self, i: int):
        self.Q, self.R = sla.qr_insert(self.Q, self.R, self.G[i], self.k, which="col")
        self.rows.append(i)
        self._bump()

    def remove(self, pos: int):
        self.Q, self.R = sla.qr_delete(self.Q, self.R, pos, 1, which="col")
        del self.rows[pos]
        self._bump()

    def _bump(self):
        self.updates += 1
        if self.updates >= _REFACTOR_EVERY:
            self.refactor()

    def null_basis(self) -> np.ndarray:
        return self.Q[:, self.k:]

    def multipliers(self, g: np.ndarray) -> np.ndarray:
        """Solve ``G_W' lam = -g`` in the least-squares sense."""
        if not self.rows:
            return np.zeros(0)
        k = self.k
        rhs = -(self.Q[:, :k].T @ g)
        return sla.solve_triangular(self.R[:k, :k], rhs)


def _active_set(H, f, G, h, y, rows0, settings: SolverSettings, stop=None):
    """Minimize ``1/2 y'Hy + f'y`` s.t. ``Gy <= h`` from feasible ``y``.

    Returns ``(status, y, working_rows, lam_working, iterations)``.
    """
    n = y.size
    m = G.shape[0]
    ws = _WorkingSet(G, n)
    for i in rows0:
        ws.try_add(i)
    hscale = float(np.max(np.abs(H))) if H is not None and H.size else 0.0
    curv_tol = 1e-11 * max(1.0, hscale)
    at_min = False
    degenerate = 0
    it = 0
    while it < settings.max_iter:
        it += 1
        if stop is not None and stop(y):
            return Status.OPTIMAL, y, list(ws.rows), ws.multipliers(_grad(H, f, y)), it
        g = _grad(H, f, y)
        ray = False
        if at_min:
            p = np.zeros(n)
        else:
            Z = ws.null_basis()
            if Z.shape[1] == 0:
                p = np.zeros(n)
            else:
                gz = Z.T @ g
                if hscale == 0.0:
                    p = -(Z @ gz)
                    ray = True
                else:
                    Hz = Z.T @ H @ Z
                    try:
                        L = np.linalg.cholesky(Hz)
                        if np.min(np.diag(L)) ** 2 < curv_tol:
                            raise np.linalg.LinAlgError
                        pz = -sla.cho_solve((L, True), gz)
                        p = Z @ pz
                    except np.linalg.LinAlgError:
                        w, V = np.linalg.eigh(Hz)
                        null = w <= curv_tol * max(1.0, w[-1])
                        gn = V[:, null].T @ gz
                        if np.linalg.norm(gn) > settings.stat_tol * 1e-2 * max(1.0, np.linalg.norm(g)):
                            p = -(Z @ (V[:, null] @ gn))
                            ray = True
                        else:
                            pos = ~null
                            pz = -(V[:, pos] @ ((V[:, pos].T @ gz) / w[pos]))
                            p = Z @ pz
                # the projected step is numerically zero once stationary on W
                if np.max(np.abs(p)) <= 1e-13 * (1.0 + np.max(np.abs(y))):
                    p = np.zeros(n)
                    ray = False
        if not np.any(p):
            lam = ws.multipliers(g)
            gs = max(1.0, float(np.max(np.abs(g), initial=0.0)))
            if lam.size == 0 or np.min(lam) >= -settings.stat_tol * gs:
                return Status.OPTIMAL, y, list(ws.rows), lam, it
            neg = np.flatnonzero(lam < -settings.stat_tol * gs)
            if degenerate > 50:
                pos = int(min(neg, key=lambda j: ws.rows[j]))  # Bland
            else:
                pos = int(neg[np.argmin(lam[neg])])
            ws.remove(pos)
            at_min = False
            continue
        # ratio test
        Gp = G @ p
        cand = np.ones(m, dtype=bool)
        cand[ws.rows] = False
        cand &= Gp > 1e-12 * max(1.0, float(np.max(np.abs(p))))
        alpha = np.inf if ray else 1.0
        block = -1
        if np.any(cand):
            idx = np.flatnonzero(cand)
            ratios = np.maximum(h[idx] - G[idx] @ y, 0.0) / Gp[idx]
            amin = float(np.min(ratios))
            if amin < alpha:
                ties = idx[ratios <= amin + 1e-14 * max(1.0, amin)]
                block = int(ties[0]) if degenerate > 50 else int(ties[np.argmax(Gp[ties])])
                alpha = amin
        if not np.isfinite(alpha):
            return Status.UNBOUNDED, y, list(ws.rows), ws.multipliers(g), it
        y = y + alpha * p
        degenerate = degenerate + 1 if alpha * np.max(np.abs(p)) < 1e-14 else 0
        if block >= 0:
            ws.add(block)
            at_min = False
        else:
            at_min = not ray
    return Status.ITER_LIMIT, y, list(ws.rows), ws.multipliers(_grad(H, f, y)), it


def _dual_active_set(H, f, G, h, L, settings: SolverSettings):
    """Goldfarb-Idnani dual active-set method for strictly convex ``H = LL'``.

    Starts at the unconstrained minimizer and adds the most violated row each
    major iteration; the factorization of ``L^{-1} N_A`` is kept by QR updates.
    Returns ``(status, y, active_rows, lam_active, iterations, certificate)``.
    """
    n = f.size
    m = G.shape[0]
    y = -sla.cho_solve((L, True), f)
    Linv_NT = sla.solve_triangular(L, -G.T, lower=True)  # L^{-1} n_i, n_i = -G_i
    J0 = sla.solve_triangular(L, np.eye(n), lower=True).T
    Q = np.eye(n)
    R = np.zeros((n, 0))
    active: list[int] = []
    u = np.zeros(0)
    it = 0
    if m == 0:
        return Status.OPTIMAL, y, active, u, it, {}
    while it < settings.max_iter:
        s = h - G @ y
        p = int(np.argmin(s))
        if s[p] >= -settings.feas_tol * 0.1:
            return Status.OPTIMAL, y, active, u, it, {}
        up = 0.0
        while True:
            it += 1
            if it > settings.max_iter:
                return Status.ITER_LIMIT, y, active, u, it, {}
            q = len(active)
            d = Q.T @ Linv_NT[:, p]
            d2 = d[q:]
            r = sla.solve_triangular(R[:q, :q], d[:q]) if q else np.zeros(0)
            t1, l = np.inf, -1
            pos = np.flatnonzero(r > 1e-14 * max(1.0, float(np.max(np.abs(r), initial=0.0))))
            if pos.size:
                ratios = u[pos] / r[pos]
                k = int(np.argmin(ratios))
                t1, l = float(ratios[k]), int(pos[k])
            dd = float(d2 @ d2)
            sp = float(h[p] - G[p] @ y)
            if dd <= 1e-20 * max(1.0, float(Linv_NT[:, p] @ Linv_NT[:, p])):
                t2 = np.inf
                z = None
            else:
                z = J0 @ (Q[:, q:] @ d2)
                t2 = max(-sp, 0.0) / dd
            t = min(t1, t2)
            if not np.isfinite(t):
                return Status.INFEASIBLE, y, active, u, it, {
                    "reason": "dual unbounded", "row": p, "active_rows": list(active)}
            if z is not None:
                y = y + t * z
            if q:
                u = u - t * r
            up += t
            if t == t2:
                Q, R = sla.qr_insert(Q, R, Linv_NT[:, p], q, which="col")
                active.append(p)
                u = np.append(u, up)
                break
            Q, R = sla.qr_delete(Q, R, l, 1, which="col")
            del active[l]
            u = np.delete(u, l)
    return Status.ITER_LIMIT, y, active, u, it, {}


def _refine(H, f, G, h, y, rows, lam):
    """One KKT solve on the final active set to clean up round-off."""
    if not rows:
        return y, lam
    A = G[rows]
    k = len(rows)
    n = y.size
    K = np.block([[H, A.T], [A, np.zeros((k, k))]])
    rhs = np.r_[-f, h[rows]]
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return y, lam
    y2, lam2 = sol[:n], sol[n:]
    if np.min(lam2) < -1e-9 * max(1.0, np.max(np.abs(lam2))):
        return y, lam
    if np.max(G @ y2 - h, initial=0.0) > max(np.max(G @ y - h, initial=0.0), 1e-12):
        return y, lam
    return y2, lam2


def _grad(H, f, y):
    g = f.copy() if f is not None else np.zeros(y.size)
    if H is not None:
        g = g + H @ y
    return g


def _inequality_rows(prog: MathProgram):
    """Stack ``A_in``, finite lower and finite upper bounds as ``Gx <= h``."""
    n = prog.n
    lo = np.flatnonzero(np.isfinite(prog.lb))
    hi = np.flatnonzero(np.isfinite(prog.ub))
    G = np.vstack([prog.A_in, -np.eye(n)[lo], np.eye(n)[hi]]) if (lo.size or hi.size) else prog.A_in
    h = np.concatenate([prog.b_in, -prog.lb[lo], prog.ub[hi]])
    return G, h, lo, hi


def _check_psd(H: np.ndarray):
    if H is None:
        return
    if not np.allclose(H, H.T, atol=1e-10 * max(1.0, np.max(np.abs(H)))):
        raise ValueError("Hessian is not symmetric")
    shift = 1e-9 * max(1.0, float(np.max(np.abs(H))))
    try:
        np.linalg.cholesky(H + shift * np.eye(H.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise ValueError("Hessian is not positive semidefinite") from exc


def solve_qp(prog: MathProgram, settings: SolverSettings | None = None, x0=None,
             reduction: EqualityReduction | None = None, validate: bool = True) -> Solution:
    """Solve a continuous QP/LP (``prog.binaries`` are ignored).

    ``Optimal`` solutions carry multipliers for ``A_eq`` rows, ``A_in`` rows and
    both bound sides; ``Infeasible`` carries the phase-1 objective and the rows
    still violated at the phase-1 optimum.
    """
    settings = settings or SolverSettings()
    if validate:
        prog.check()
        _check_psd(prog.H)
    n = prog.n
    if np.any(prog.lb > prog.ub + settings.feas_tol):
        return Solution(Status.INFEASIBLE, certificate={"reason": "lb > ub"})
    red = reduction if reduction is not None else reduce_equalities(prog.A_eq, prog.b_eq, n)
    if red.residual > settings.feas_tol * 10:
        return Solution(Status.INFEASIBLE,
                        certificate={"reason": "inconsistent equalities", "residual": red.residual})
    G, h, lo_idx, hi_idx = _inequality_rows(prog)
    N, x_p = red.N, red.x_p
    nr = N.shape[1]
    Gr = G @ N
    hr = h - G @ x_p
    norms = np.linalg.norm(Gr, axis=1)
    live = norms > 1e-12
    if np.any(hr[~live] < -settings.feas_tol):
        bad = np.flatnonzero(~live & (hr < -settings.feas_tol))
        return Solution(Status.INFEASIBLE, certificate={"reason": "constant row violated",
                                                        "rows": bad.tolist()})
    live_idx = np.flatnonzero(live)
    Gs = Gr[live] / norms[live, None]
    hs = hr[live] / norms[live]
    Hr = N.T @ prog.H @ N if prog.H is not None else None
    fr = N.T @ ((prog.H @ x_p if prog.H is not None else 0.0) + (prog.f if prog.f is not None else 0.0)) \
        if not prog.is_feasibility else None
    if fr is not None:
        fr = np.asarray(fr, dtype=float).reshape(nr)

    y = np.zeros(nr) if x0 is None else N.T @ (np.asarray(x0, float) - x_p)
    info = {"phase1_iters": 0, "phase2_iters": 0}
    viol = float(np.max(Gs @ y - hs, initial=0.0)) if Gs.size else 0.0
    rows0: list[int] = []
    L = None
    if Hr is not None and nr:
        try:
            L = np.linalg.cholesky(Hr)
            if np.min(np.diag(L)) ** 2 < 1e-13 * max(1.0, float(np.max(np.abs(Hr)))):
                L = None
        except np.linalg.LinAlgError:
            L = None
    if viol > settings.feas_tol * 0.5 and L is None:
        # elastic phase 1: min t  s.t.  Gs y - t <= hs
        Ge = np.hstack([Gs, -np.ones((Gs.shape[0], 1))])
        Ge = np.vstack([Ge, np.r_[np.zeros(nr), -1.0]])
        he = np.r_[hs, 1.0]
        fe = np.r_[np.zeros(nr), 1.0]
        ye = np.r_[y, viol]
        act = list(np.flatnonzero(Gs @ y - hs >= viol - 1e-12)[:1])
        st, ye, rows_e, _, it1 = _active_set(None, fe, Ge, he, ye, act, settings,
                                             stop=lambda v: v[-1] <= 0.0)
        info["phase1_iters"] = it1
        t = float(ye[-1])
        y = ye[:-1]
        if st == Status.ITER_LIMIT:
            return Solution(Status.ITER_LIMIT, x=x_p + N @ y, info=info)
        # rows were normalized, so a small elastic value can still hide a large
        # violation of a row with large coefficients; judge it in raw units
        if t * float(np.max(norms[live], initial=1.0)) > settings.feas_tol:
            bad = live_idx[np.flatnonzero(Gs @ y - hs > settings.feas_tol)]
            return Solution(Status.INFEASIBLE, x=x_p + N @ y,
                            certificate={"phase1_objective": t, "violated_rows": bad.tolist()},
                            info=info)
    if L is not None:
        status, y, rows, lam_w, it2, cert = _dual_active_set(Hr, fr, Gs, hs, L, settings)
        info["dual_iters"] = it2
        if status == Status.INFEASIBLE:
            cert = dict(cert)
            cert["row"] = int(live_idx[cert["row"]])
            cert["active_rows"] = [int(live_idx[r]) for r in cert["active_rows"]]
            return Solution(Status.INFEASIBLE, x=x_p + N @ y, certificate=cert, info=info)
        if status == Status.OPTIMAL:
            y, lam_w = _refine(Hr, fr, Gs, hs, y, rows, lam_w)
        x = x_p + N @ y
        lam = np.zeros(G.shape[0])
        if rows:
            lam[live_idx[rows]] = lam_w / norms[live_idx[rows]]
        lam = np.maximum(lam, 0.0)
    elif prog.is_feasibility:
        x = x_p + N @ y
        lam = np.zeros(G.shape[0])
        status = Status.OPTIMAL
    else:
        if Gs.size:
            rows0 = list(np.flatnonzero(Gs @ y - hs >= -1e-9))
        status, y, rows, lam_w, it2 = _active_set(Hr, fr, Gs, hs, y, rows0, settings)
        info["phase2_iters"] = it2
        x = x_p + N @ y
        lam = np.zeros(G.shape[0])
        if rows:
            lam[live_idx[rows]] = lam_w / norms[live_idx[rows]]
        lam = np.maximum(lam, 0.0)
    m_in = prog.A_in.shape[0]
    lam_in = lam[:m_in]
    lo_mult = np.zeros(n)
    hi_mult = np.zeros(n)
    lo_mult[lo_idx] = lam[m_in:m_in + lo_idx.size]
    hi_mult[hi_idx] = lam[m_in + lo_idx.size:]
    nu = np.zeros(prog.A_eq.shape[0])
    if prog.A_eq.shape[0] and not prog.is_feasibility:
        g = _grad(prog.H, prog.f, x) + prog.A_in.T @ lam_in - lo_mult + hi_mult
        nu = np.linalg.lstsq(prog.A_eq.T, -g, rcond=None)[0]
    sol = Solution(status, x=x, eq_multipliers=nu, ineq_multipliers=lam_in,
                   lower_multipliers=lo_mult, upper_multipliers=hi_mult,
                   objective=prog.objective(x) if not prog.is_feasibility else 0.0, info=info)
    return sol
