"""Error bounds for recovery from corrupted demonstrations, and the noise sweep.

With clean difference matrix ``Y``, true gain ``K*`` and
``Gamma = [[I - ZA, -ZB], [-K* C, I]]``:

    rho1 = sqrt(D-1) ||pinv(Y)||      rho2 = sqrt(D-1) ||Gamma|| ||C||
    rho3 = sqrt(D-1) ||Gamma|| ||pinv(Y)||   rho4 = ||Gamma|| ||K*||

    ||dK||        <= rho1 (||K~|| + 1) eps
    ||(dz; dv)||  <= (rho2 ||(z~; v~)|| + rho3 ||y~_1|| (||K~|| + 1) + rho4) eps

All norms are spectral / Euclidean and every stack covers the first ``T``
blocks.  ``eps`` is the largest per-demonstration corruption norm actually
realized, the tightest value the bounds admit.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..demos import DemoSet, perturb
from ..opt import SolverSettings, Status
from ..problem import ProblemInstance, build_block_operators
from .kkt import build_kkt_program, infer_theta
from .recovery import RecoveredPolicy, RecoveryError, gamma_matrix, recover_policy, stack_differences

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("epsilon", "trial", "err_z", "err_v", "err_K", "err_theta_active", "bound_K", "bound_zv")


@dataclass
class SensitivityReport:
    rho1: float
    rho2: float
    rho3: float
    rho4: float
    gamma_norm: float
    epsilon: float          # realized corruption level
    err_K: float
    err_z: float
    err_v: float
    err_zv: float
    bound_K: float
    bound_zv: float

    @property
    def passed_K(self) -> bool:
        return self.err_K <= self.bound_K * (1 + 1e-9) + 1e-12

    @property
    def passed_zv(self) -> bool:
        return self.err_zv <= self.bound_zv * (1 + 1e-9) + 1e-12

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(passed_K=self.passed_K, passed_zv=self.passed_zv)
        return d


def realized_epsilon(demos: DemoSet, T: int) -> float:
    """``max_d max(||du_d||, ||dy_d||)`` over the first ``T`` blocks."""
    if not demos.corrupted:
        return 0.0
    eps = 0.0
    for a, b in zip(demos.demos, demos.clean):
        eps = max(eps, float(np.linalg.norm(a.u[:T] - b.u[:T])), float(np.linalg.norm(a.y[:T] - b.y[:T])))
    return eps


def sensitivity_bounds(demos: DemoSet, K_true, z_true, v_true, policy: RecoveredPolicy,
                       system) -> SensitivityReport:
    """Evaluate both bounds and the empirical errors of ``policy``.

    ``demos`` must carry its clean copies (``perturb`` keeps them); an
    uncorrupted set gives ``eps = 0``.
    """
    if K_true is None or z_true is None or v_true is None:
        raise ValueError("sensitivity bounds need the true gain and nominal")
    T = system.T
    clean = demos.clean if demos.corrupted else demos.demos
    if clean is None:
        raise ValueError("corrupted demonstrations carry no clean copies")
    D = len(clean)
    ops = build_block_operators(system)
    Y = stack_differences(clean, T).Y
    Yp = np.linalg.norm(np.linalg.pinv(Y, rcond=1e-12), 2)
    G = np.linalg.norm(gamma_matrix(K_true, ops), 2)
    nC = np.linalg.norm(ops.calC, 2)
    nKs = np.linalg.norm(K_true.K, 2)
    sq = np.sqrt(D - 1)
    rho1, rho2, rho3, rho4 = sq * Yp, sq * G * nC, sq * G * Yp, G * nKs
    eps = realized_epsilon(demos, T)

    z_true = np.asarray(z_true, float)
    v_true = np.asarray(v_true, float)
    dz = (policy.z[:T] - z_true[:T]).ravel()
    dv = (policy.v - v_true).ravel()
    nKt = np.linalg.norm(policy.K.K, 2)
    zv = np.linalg.norm(np.r_[policy.z[:T].ravel(), policy.v.ravel()])
    y1 = np.linalg.norm(demos.demos[0].y[:T])
    return SensitivityReport(
        rho1=float(rho1), rho2=float(rho2), rho3=float(rho3), rho4=float(rho4), gamma_norm=float(G),
        epsilon=eps,
        err_K=float(np.linalg.norm(policy.K.K - K_true.K, 2)),
        err_z=float(np.linalg.norm(dz)), err_v=float(np.linalg.norm(dv)),
        err_zv=float(np.linalg.norm(np.r_[dz, dv])),
        bound_K=float(rho1 * (nKt + 1) * eps),
        bound_zv=float((rho2 * zv + rho3 * y1 * (nKt + 1) + rho4) * eps),
    )


def touched_components(inst: ProblemInstance, assignment, lam_unknown, tol: float = 1e-7) -> np.ndarray:
    """Parameter indices appearing in a disjunct whose multiplier is positive."""
    comps = set()
    for (k, t, b), lam in zip(assignment, lam_unknown):
        if lam > tol:
            comps.update(np.flatnonzero(inst.unknown.obstacles[k].theta_map[b]).tolist())
    return np.array(sorted(comps), dtype=int)


def theta_error(inst: ProblemInstance, policy: RecoveredPolicy, components,
                settings: SolverSettings | None = None) -> float:
    """Largest error over ``components`` of a relaxed-KKT witness; NaN if none exists."""
    if len(components) == 0:
        return 0.0
    kp = build_kkt_program(policy, inst, relaxed=True)
    w = infer_theta(kp, settings=settings)
    if w.status != Status.OPTIMAL:
        return float("nan")
    return float(np.max(np.abs(w.theta[components] - np.asarray(inst.theta_star)[components])))


def run_noise_sweep(inst: ProblemInstance, demos: DemoSet, K_true, z_true, v_true, epsilons,
                    trials: int, seed: int = 0, components=None, settings: SolverSettings | None = None,
                    with_theta: bool = True) -> list[dict]:
    """One row per ``(epsilon, trial)``, in that order.

    Trial ``r`` at level index ``i`` corrupts the clean demonstrations with
    the stream keyed by ``(seed, i, r)``, so rows are reproducible one by one.
    """
    system = inst.system
    rows = []
    for i, eps in enumerate(epsilons):
        for r in range(trials):
            cd = perturb(demos, float(eps), seed=[seed, i, r]) if eps > 0 else demos
            try:
                pol = recover_policy(cd.demos, system)
            except RecoveryError as exc:
                log.warning("trial %d at epsilon %g: %s", r, eps, exc)
                rows.append({"epsilon": float(eps), "trial": r, **{c: float("nan") for c in SWEEP_COLUMNS[2:]}})
                continue
            rep = sensitivity_bounds(cd, K_true, z_true, v_true, pol, system)
            et = float("nan")
            if with_theta and components is not None:
                et = theta_error(inst, pol, components, settings)
            rows.append({"epsilon": float(eps), "trial": r, "err_z": rep.err_z, "err_v": rep.err_v,
                         "err_K": rep.err_K, "err_theta_active": et,
                         "bound_K": rep.bound_K, "bound_zv": rep.bound_zv})
    return rows
