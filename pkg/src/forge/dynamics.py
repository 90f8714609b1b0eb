"""Small library of vehicle models and a PD output-feedback gain."""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm

from .problem import LtvSystem, NonlinearSystem


def _output_matrix(n: int, output: str) -> np.ndarray:
    if output == "state":
        return np.eye(n)
    if output == "position":
        C = np.zeros((2, n))
        C[0, 0] = C[1, 1] = 1.0
        return C
    raise ValueError(f"unknown output kind {output!r}")


def double_integrator_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    """State ``(p_x, p_y, v_x, v_y)``, input ``(a_x, a_y)``, forward Euler in velocity."""
    A = np.eye(4)
    A[0, 2] = A[1, 3] = dt
    B = np.zeros((4, 2))
    B[0, 0] = B[1, 1] = 0.5 * dt * dt
    B[2, 0] = B[3, 1] = dt
    return A, B


def double_integrator(T: int, dt: float = 0.1, x0=(0.0, 0.0, 0.0, 0.0),
                      output: str = "state") -> LtvSystem:
    A, B = double_integrator_matrices(dt)
    return LtvSystem.time_invariant(A, B, _output_matrix(4, output), np.asarray(x0, float), T)


def unicycle(T: int, dt: float = 0.1, x0=(0.0, 0.0, 0.0, 0.0),
             output: str = "state") -> NonlinearSystem:
    """State ``(p_x, p_y, heading, speed)``, input ``(turn rate, acceleration)``."""

    def f(t, x, u):
        px, py, psi, s = x
        return np.array([px + s * np.cos(psi) * dt,
                         py + s * np.sin(psi) * dt,
                         psi + u[0] * dt,
                         s + u[1] * dt])

    def jac(t, x, u):
        _, _, psi, s = x
        A = np.eye(4)
        A[0, 2] = -s * np.sin(psi) * dt
        A[0, 3] = np.cos(psi) * dt
        A[1, 2] = s * np.cos(psi) * dt
        A[1, 3] = np.sin(psi) * dt
        B = np.zeros((4, 2))
        B[2, 0] = B[3, 1] = dt
        return A, B

    C = _output_matrix(4, output)
    return NonlinearSystem(f, [C] * (T + 1), np.asarray(x0, float), T, 2, jacobian_fn=jac,
                           name="unicycle")


def pd_gain(T: int, kp: float, kd: float, output: str = "state") -> np.ndarray:
    """Memoryless PD feedback ``u_t = -(kp * dp_t + kd * dv_t)`` on the output error.

    With position-only outputs the derivative term uses the backward
    difference of consecutive output errors.  Returns the stacked gain
    ``(2T, n_o T)`` (block lower-triangular by construction).
    """
    if output == "state":
        n_o = 4
        blk = np.zeros((2, 4))
        blk[0, 0] = blk[1, 1] = -kp
        blk[0, 2] = blk[1, 3] = -kd
        K = np.zeros((2 * T, n_o * T))
        for t in range(T):
            K[2 * t:2 * t + 2, n_o * t:n_o * t + n_o] = blk
        return K
    if output == "position":
        n_o = 2
        K = np.zeros((2 * T, n_o * T))
        for t in range(T):
            K[2 * t:2 * t + 2, 2 * t:2 * t + 2] = -(kp + kd) * np.eye(2)
            if t > 0:
                K[2 * t:2 * t + 2, 2 * (t - 1):2 * t] = kd * np.eye(2)
        return K
    raise ValueError(f"unknown output kind {output!r}")


def quadcopter_hover_matrices(dt: float, mass: float = 1.0, inertia=(0.01, 0.01, 0.02),
                              g: float = 9.81) -> tuple[np.ndarray, np.ndarray]:
    """Hover linearization, zero-order hold.

    State ``(p_x, p_y, p_z, roll, pitch, yaw, v_x, v_y, v_z, w_x, w_y, w_z)``,
    input ``(thrust - m g, tau_x, tau_y, tau_z)``.
    """
    Ac = np.zeros((12, 12))
    Ac[0:3, 6:9] = np.eye(3)
    Ac[3:6, 9:12] = np.eye(3)
    Ac[6, 4] = g
    Ac[7, 3] = -g
    Bc = np.zeros((12, 4))
    Bc[8, 0] = 1.0 / mass
    Bc[9:12, 1:4] = np.diag(1.0 / np.asarray(inertia, float))
    M = np.zeros((16, 16))
    M[:12, :12] = Ac
    M[:12, 12:] = Bc
    E = expm(M * dt)
    return E[:12, :12], E[:12, 12:]


def quadcopter_hover(T: int, dt: float = 0.1, x0=None, output: str = "position", **params) -> LtvSystem:
    """Linearized quadcopter; ``output`` is ``"state"`` or ``"position"`` (planar ``p_x, p_y``)."""
    A, B = quadcopter_hover_matrices(dt, **params)
    x0 = np.zeros(12) if x0 is None else np.asarray(x0, float)
    return LtvSystem.time_invariant(A, B, _output_matrix(12, output), x0, T)
