"""Recover the feedback gain and the nominal trajectory from demonstrations.

Every demonstration obeys ``u = v + K (y - C z)`` on the first ``T`` blocks,
so differences between consecutive demonstrations satisfy ``dU = K dY`` and
the nominal solves a square linear system once ``K`` is known.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..demos import DemoSet
from ..problem import BlockOperators, LtvSystem, build_block_operators, linearize
from ..sls import FeedbackGain, SystemResponse, block_mask, phi_from_k

log = logging.getLogger(__name__)


class RecoveryError(RuntimeError):
    pass


@dataclass(frozen=True)
class DifferenceMatrices:
    U: np.ndarray   # (n_i T, D-1)
    Y: np.ndarray   # (n_o T, D-1)


def _stacks(demos, T: int) -> tuple[np.ndarray, np.ndarray]:
    U = np.column_stack([d.u[:T].ravel() for d in demos])
    Y = np.column_stack([d.y[:T].ravel() for d in demos])
    return U, Y


def stack_differences(demos: DemoSet | list, T: int | None = None) -> DifferenceMatrices:
    """Columns ``demo_{j+1} - demo_j`` using outputs ``y_0 .. y_{T-1}``."""
    demos = list(demos)
    if len(demos) < 2:
        raise ValueError("need at least two demonstrations to form differences")
    T = demos[0].u.shape[0] if T is None else T
    U, Y = _stacks(demos, T)
    return DifferenceMatrices(np.diff(U, axis=1), np.diff(Y, axis=1))


def recover_gain(diff: DifferenceMatrices, n_i: int, n_o: int,
                 rank_tol: float | None = None) -> tuple[FeedbackGain, dict]:
    """Least-squares gain ``U pinv(Y)`` projected onto the causal blocks."""
    Y = diff.Y
    Y_pinv = np.linalg.pinv(Y, rcond=1e-12)
    K_raw = diff.U @ Y_pinv
    mask = block_mask(K_raw.shape[0], K_raw.shape[1], n_i, n_o)
    proj = float(np.max(np.abs(K_raw[~mask]), initial=0.0))
    K = FeedbackGain.causal_part(K_raw, n_i, n_o)
    sv = np.linalg.svd(Y, compute_uv=False) if Y.size else np.zeros(0)
    tol = rank_tol if rank_tol is not None else max(Y.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > tol)) if sv.size else 0
    rich = rank == Y.shape[0]
    if not rich:
        log.warning("difference matrix has rank %d < %d; gain is not identifiable", rank, Y.shape[0])
    diag = {
        "rank": rank,
        "required_rank": Y.shape[0],
        "rich": rich,
        "projection": proj,
        "residual": float(np.linalg.norm(diff.U - K.K @ Y)),
        "Y_pinv_norm": float(np.linalg.norm(Y_pinv, 2)) if Y.size else 0.0,
    }
    return K, diag


def gamma_matrix(K: FeedbackGain, ops: BlockOperators) -> np.ndarray:
    """``[[I - ZA, -ZB], [-K C, I]]`` acting on ``(z_0..z_{T-1}, v)``."""
    nT = ops.n * ops.T
    return np.block([[np.eye(nT) - ops.Z @ ops.calA, -ops.Z @ ops.calB],
                     [-K.K @ ops.calC, np.eye(ops.n_i * ops.T)]])


def _gamma_rhs_state(system: LtvSystem, ops: BlockOperators) -> np.ndarray:
    """Right-hand side of the nominal dynamics rows: ``x0`` then the offsets ``c_0..c_{T-2}``."""
    r = np.zeros(ops.n * ops.T)
    r[:ops.n] = system.x0
    r[ops.n:] = ops.drift[: ops.n * (ops.T - 1)]
    return r


def recover_nominal(demos, K: FeedbackGain, system: LtvSystem,
                    ops: BlockOperators | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Solve ``Gamma (z, v) = (x0-part, u_d - K y_d)`` per demonstration and average.

    Returns ``(z (T+1, n), v (T, n_i), Gamma, cond(Gamma))``; ``z_T`` is the
    one-step continuation of the recovered nominal.
    """
    demos = list(demos)
    if not demos:
        raise ValueError("no demonstrations")
    ops = ops or build_block_operators(system)
    T, n, n_i = ops.T, ops.n, ops.n_i
    G = gamma_matrix(K, ops)
    cond = float(np.linalg.cond(G))
    if not np.isfinite(cond) or cond > 1e12:
        raise RecoveryError(f"nominal recovery matrix is singular (cond {cond:.3g}); "
                            "the demonstrations or gain violate the richness/regularity assumption")
    U, Y = _stacks(demos, T)
    top = np.repeat(_gamma_rhs_state(system, ops)[:, None], len(demos), axis=1)
    rhs = np.vstack([top, U - K.K @ Y])
    sols = np.linalg.solve(G, rhs)
    sol = sols.mean(axis=1)
    z = np.zeros((T + 1, n))
    z[:T] = sol[: n * T].reshape(T, n)
    v = sol[n * T:].reshape(T, n_i)
    z[T] = system.step(T - 1, z[T - 1], v[T - 1])
    return z, v, G, cond


def nominal_fit_residual(demos, K: FeedbackGain, system, z, v) -> float:
    """Root-mean-square over demonstrations of ``||u_d - v - K (y_d - C z)||``."""
    T = system.T
    Cz = np.concatenate([system.C_blocks[t] @ z[t] for t in range(T)])
    U, Y = _stacks(demos, T)
    R = U - v.ravel()[:, None] - K.K @ (Y - Cz[:, None])
    return float(np.sqrt(np.mean(np.sum(R * R, axis=0))))


def recover_nominal_nonlinear(demos, K: FeedbackGain, system, v_init=None,
                              max_iter: int = 50, step_tol: float = 1e-7
                              ) -> tuple[np.ndarray, np.ndarray, dict]:
    """Gauss-Newton single shooting for the nominal of a nonlinear model.

    Minimizes ``sum_d ||u_d - v - K (y_d - C z(v))||^2`` where ``z(v)`` is the
    noise-free rollout from ``x0``.  The sum equals ``D`` times the squared
    residual of the averaged data plus a constant, so the averaged residual
    is used.
    """
    demos = list(demos)
    if not demos:
        raise ValueError("no demonstrations")
    T, n, n_i = system.T, system.n, system.n_i
    n_o = system.C_blocks[0].shape[0]
    U, Y = _stacks(demos, T)
    u_bar = U.mean(axis=1)
    y_bar = Y.mean(axis=1)
    Km = K.K
    C = system.C_blocks

    if v_init is None:
        # feedback-free guess: the averaged inputs
        v = u_bar.reshape(T, n_i).copy()
    else:
        v = np.asarray(v_init, float).reshape(T, n_i).copy()

    def residual(v):
        z = system.rollout(v)
        Cz = np.concatenate([C[t] @ z[t] for t in range(T)])
        return u_bar - v.ravel() - Km @ (y_bar - Cz), z

    def jacobian(v, z):
        # dz_t / dv, forward sensitivities
        S = np.zeros((n, n_i * T))
        dCz = np.zeros((n_o * T, n_i * T))
        for t in range(T):
            dCz[t * n_o:(t + 1) * n_o] = C[t] @ S
            A, B = system.jacobians(t, z[t], v[t])
            S = A @ S
            S[:, t * n_i:(t + 1) * n_i] += B
        return -np.eye(n_i * T) + Km @ dCz

    r, z = residual(v)
    cost = 0.5 * float(r @ r)
    fails = 0
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        J = jacobian(v, z)
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        alpha = 1.0
        while True:
            v_new = v + alpha * step.reshape(T, n_i)
            r_new, z_new = residual(v_new)
            c_new = 0.5 * float(r_new @ r_new)
            if np.isfinite(c_new) and c_new <= cost:
                break
            alpha *= 0.5
            if alpha < 1e-8:
                break
        if not (np.isfinite(c_new) and c_new <= cost):
            fails += 1
            if fails >= 5:
                raise RecoveryError(f"Gauss-Newton diverged after {it} iterations (cost {cost:.3g})")
            continue
        fails = 0
        v, r, z, cost = v_new, r_new, z_new, c_new
        if alpha * np.max(np.abs(step), initial=0.0) <= step_tol:
            converged = True
            break
    info = {"iterations": it, "converged": converged, "cost": cost,
            "fit_residual": nominal_fit_residual(demos, K, system, z, v)}
    return z, v, info


@dataclass
class RecoveredPolicy:
    K: FeedbackGain
    phi: SystemResponse
    z: np.ndarray               # (T+1, n)
    v: np.ndarray               # (T, n_i)
    gamma: np.ndarray
    system: LtvSystem           # model (linearized about the recovered nominal if nonlinear)
    diagnostics: dict = field(default_factory=dict)

    @property
    def eta(self) -> np.ndarray:
        return np.r_[self.z.ravel(), self.v.ravel()]


def recover_policy(demos, system) -> RecoveredPolicy:
    """Gain, nominal and response from demonstrations of ``system``."""
    demos = list(demos)
    T = system.T
    n_i = demos[0].u.shape[1]
    n_o = demos[0].y.shape[1]
    K, diag = recover_gain(stack_differences(demos, T), n_i, n_o)
    if isinstance(system, LtvSystem):
        ops = build_block_operators(system)
        z, v, G, cond = recover_nominal(demos, K, system, ops)
        lin = system
        diag["fit_residual"] = nominal_fit_residual(demos, K, system, z, v)
    else:
        z, v, info = recover_nominal_nonlinear(demos, K, system)
        lin = linearize(system, z, v)
        ops = build_block_operators(lin)
        G = gamma_matrix(K, ops)
        cond = float(np.linalg.cond(G))
        diag.update(info)
    diag["gamma_cond"] = cond
    phi = phi_from_k(K, ops)
    return RecoveredPolicy(K, phi, z, v, G, lin, diag)
