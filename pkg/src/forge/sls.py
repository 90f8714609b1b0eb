"""System-response algebra for causal output-error feedback.

Conventions (``T`` steps, blocks indexed ``t = 0..T-1``):

* ``K``      ``(n_i T, n_o T)``, block ``(t, tau)`` maps the output error at
  ``tau`` to the input correction at ``t``; blocks with ``tau > t`` vanish.
* ``phi_xw`` ``(n T, n T)``, ``phi_xe`` ``(n T, n_o T)``,
  ``phi_uw`` ``(n_i T, n T)``, ``phi_ue`` ``(n_i T, n_o T)``.
  The ``w`` columns act on the stacked disturbance whose block ``t`` is the
  state perturbation entering ``x_t`` (zero for ``t = 0``), i.e. ``Z w``.

``deviation_map`` extends these to the full stacked vector
``(x_0..x_T, u_0..u_{T-1})`` as a function of ``(w_0..w_{T-1}, e_0..e_{T-1})``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import BlockOperators


def block_mask(rows: int, cols: int, rb: int, cb: int, strict: bool = False) -> np.ndarray:
    """Boolean mask of entries in block-lower-triangular position."""
    ri = np.arange(rows) // rb
    ci = np.arange(cols) // cb
    return ri[:, None] > ci[None, :] if strict else ri[:, None] >= ci[None, :]


def upper_block_max(M: np.ndarray, rb: int, cb: int) -> float:
    mask = ~block_mask(M.shape[0], M.shape[1], rb, cb)
    return float(np.max(np.abs(M[mask]), initial=0.0))


@dataclass(frozen=True)
class FeedbackGain:
    K: np.ndarray
    n_i: int
    n_o: int

    def __post_init__(self):
        K = np.array(self.K, dtype=float)
        if K.shape[0] % self.n_i or K.shape[1] % self.n_o or K.shape[0] // self.n_i != K.shape[1] // self.n_o:
            raise ValueError(f"gain shape {K.shape} does not fit blocks ({self.n_i}, {self.n_o})")
        bad = upper_block_max(K, self.n_i, self.n_o)
        if bad != 0.0:
            raise ValueError(f"gain is not causal: upper block entry of magnitude {bad:.3g}")
        K.setflags(write=False)
        object.__setattr__(self, "K", K)

    @property
    def T(self) -> int:
        return self.K.shape[0] // self.n_i

    def block(self, t: int, tau: int) -> np.ndarray:
        return self.K[t * self.n_i:(t + 1) * self.n_i, tau * self.n_o:(tau + 1) * self.n_o]

    @classmethod
    def causal_part(cls, K, n_i: int, n_o: int) -> "FeedbackGain":
        """Zero the upper blocks of an arbitrary matrix and wrap it."""
        K = np.array(K, dtype=float)
        K[~block_mask(K.shape[0], K.shape[1], n_i, n_o)] = 0.0
        return cls(K, n_i, n_o)

    @classmethod
    def zeros(cls, T: int, n_i: int, n_o: int) -> "FeedbackGain":
        return cls(np.zeros((n_i * T, n_o * T)), n_i, n_o)


@dataclass(frozen=True)
class SystemResponse:
    phi_xw: np.ndarray
    phi_xe: np.ndarray
    phi_uw: np.ndarray
    phi_ue: np.ndarray
    n: int
    n_i: int
    n_o: int

    @property
    def T(self) -> int:
        return self.phi_xw.shape[0] // self.n

    def blocks(self) -> dict[str, np.ndarray]:
        return {"phi_xw": self.phi_xw, "phi_xe": self.phi_xe,
                "phi_uw": self.phi_uw, "phi_ue": self.phi_ue}

    def stacked(self) -> np.ndarray:
        return np.block([[self.phi_xw, self.phi_xe], [self.phi_uw, self.phi_ue]])


def lower_block_solve(M: np.ndarray, R: np.ndarray, n: int, unit: bool = False) -> np.ndarray:
    """Solve ``M X = R`` for block lower-triangular ``M`` by forward substitution.

    With ``unit=True`` the diagonal blocks are taken to be identities.
    """
    T = M.shape[0] // n
    X = np.zeros((M.shape[1], R.shape[1]))
    for t in range(T):
        rows = slice(t * n, (t + 1) * n)
        rhs = R[rows] - M[rows, : t * n] @ X[: t * n]
        if unit:
            X[rows] = rhs
        else:
            D = M[rows, rows]
            try:
                cond = np.linalg.cond(D)
            except np.linalg.LinAlgError:
                cond = np.inf
            if not np.isfinite(cond) or cond > 1e12:
                raise np.linalg.LinAlgError(f"diagonal block {t} is singular (cond {cond:.3g})")
            X[rows] = np.linalg.solve(D, rhs)
    return X


def phi_from_k(K: FeedbackGain, ops: BlockOperators) -> SystemResponse:
    T, n = ops.T, ops.n
    Kc = K.K
    M = np.eye(n * T) - ops.Z @ (ops.calA + ops.calB @ Kc @ ops.calC)
    if upper_block_max(M - np.eye(n * T), n, n) != 0.0 or not np.allclose(
            np.diag(M), 1.0):
        raise RuntimeError("closed-loop matrix is not unit block lower-triangular")
    Minv = lower_block_solve(M, np.eye(n * T), n, unit=True)
    ZB = ops.Z @ ops.calB
    phi_xw = Minv
    phi_xe = Minv @ ZB @ Kc
    phi_uw = Kc @ ops.calC @ Minv
    phi_ue = Kc @ ops.calC @ phi_xe + Kc
    return SystemResponse(phi_xw, phi_xe, phi_uw, phi_ue, n, ops.n_i, ops.n_o)


def k_from_phi(phi: SystemResponse) -> FeedbackGain:
    """``K = phi_ue - phi_uw phi_xw^{-1} phi_xe``, with ``phi_xw`` inverted blockwise."""
    n, n_i, n_o = phi.n, phi.n_i, phi.n_o
    try:
        X = lower_block_solve(phi.phi_xw, phi.phi_xe, n)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"phi_xw is singular: {exc}") from exc
    K = phi.phi_ue - phi.phi_uw @ X
    scale = max(1.0, float(np.max(np.abs(K), initial=0.0)))
    if upper_block_max(K, n_i, n_o) <= 1e-9 * scale:
        return FeedbackGain.causal_part(K, n_i, n_o)
    return FeedbackGain(K, n_i, n_o)  # raises with the offending magnitude


@dataclass(frozen=True)
class ResidualReport:
    affine_rows: float     # [I - ZA, -ZB] phi = [I, 0]
    affine_cols: float     # phi [I - ZA; -C] = [I; 0]
    upper_blocks: float    # largest entry above the block diagonal
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.affine_rows, self.affine_cols, self.upper_blocks) <= self.tol


def verify_response(phi: SystemResponse, ops: BlockOperators, tol: float = 1e-8) -> ResidualReport:
    T, n, n_i, n_o = ops.T, ops.n, ops.n_i, ops.n_o
    I = np.eye(n * T)
    P = phi.stacked()
    left = np.hstack([I - ops.Z @ ops.calA, -ops.Z @ ops.calB])
    rhs_rows = np.hstack([I, np.zeros((n * T, n_o * T))])
    right = np.vstack([I - ops.Z @ ops.calA, -ops.calC])
    rhs_cols = np.vstack([I, np.zeros((n_i * T, n * T))])
    r1 = float(np.max(np.abs(left @ P - rhs_rows)))
    r2 = float(np.max(np.abs(P @ right - rhs_cols)))
    up = max(upper_block_max(phi.phi_xw, n, n), upper_block_max(phi.phi_xe, n, n_o),
             upper_block_max(phi.phi_uw, n_i, n), upper_block_max(phi.phi_ue, n_i, n_o))
    return ResidualReport(r1, r2, up, tol)


def deviation_map(phi: SystemResponse, ops: BlockOperators) -> tuple[np.ndarray, np.ndarray]:
    """``(Psi_w, Psi_e)`` with ``(x - z, u - v) = Psi_w w + Psi_e e`` on the stacked layout.

    ``w = (w_0..w_{T-1})`` is the process noise (``w_t`` enters ``x_{t+1}``) and
    ``e = (e_0..e_{T-1})`` the output noise; ``e_T`` never reaches the inputs.
    """
    T, n, n_i = ops.T, ops.n, ops.n_i
    nx = n * T
    Xw = phi.phi_xw @ ops.Z
    Uw = phi.phi_uw @ ops.Z
    Xe, Ue = phi.phi_xe, phi.phi_ue
    last = slice(nx - n, nx)
    lastu = slice(n_i * (T - 1), n_i * T)
    xTw = ops.A_last @ Xw[last] + ops.B_last @ Uw[lastu]
    xTw[:, nx - n:] += np.eye(n)
    xTe = ops.A_last @ Xe[last] + ops.B_last @ Ue[lastu]
    Psi_w = np.vstack([Xw, xTw, Uw])
    Psi_e = np.vstack([Xe, xTe, Ue])
    return Psi_w, Psi_e
