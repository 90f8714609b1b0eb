"""Problem data: dynamics, noise, costs, constraint families and block operators.

Every stacked vector in this package uses the layout

    eta = (x_0, ..., x_T, u_0, ..., u_{T-1})

of length ``n (T + 1) + n_i T``.  The SLS block operators only cover the
first ``T`` state blocks (``x_0 .. x_{T-1}``); see :mod:`forge.sls`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Layout:
    """Index bookkeeping for the stacked ``(x, u)`` vector."""

    T: int
    n: int
    n_i: int

    @property
    def N(self) -> int:
        return self.n * (self.T + 1) + self.n_i * self.T

    @property
    def n_x(self) -> int:
        return self.n * (self.T + 1)

    def x(self, t: int) -> slice:
        return slice(t * self.n, (t + 1) * self.n)

    def u(self, t: int) -> slice:
        off = self.n_x
        return slice(off + t * self.n_i, off + (t + 1) * self.n_i)

    def split(self, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(states (T+1, n), inputs (T, n_i))``."""
        eta = np.asarray(eta, dtype=float)
        return (eta[: self.n_x].reshape(self.T + 1, self.n),
                eta[self.n_x:].reshape(self.T, self.n_i))

    def join(self, states, inputs) -> np.ndarray:
        return np.concatenate([np.asarray(states, float).ravel(), np.asarray(inputs, float).ravel()])


# ---------------------------------------------------------------------------
# dynamics


@dataclass(frozen=True)
class LtvSystem:
    """``x_{t+1} = A_t x_t + B_t u_t + c_t + w_t``, ``y_t = C_t x_t + e_t``.

    ``drift`` (the affine offsets ``c_t``) defaults to zero; it only appears
    when an affine or nonlinear model is linearized.
    """

    A_blocks: tuple
    B_blocks: tuple
    C_blocks: tuple
    x0: np.ndarray
    drift: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "A_blocks", tuple(_frozen(a) for a in self.A_blocks))
        object.__setattr__(self, "B_blocks", tuple(_frozen(b) for b in self.B_blocks))
        object.__setattr__(self, "C_blocks", tuple(_frozen(c) for c in self.C_blocks))
        object.__setattr__(self, "x0", _frozen(np.ravel(self.x0)))
        if self.drift is None:
            n = self.x0.size
            object.__setattr__(self, "drift", tuple(_frozen(np.zeros(n)) for _ in self.A_blocks))
        else:
            object.__setattr__(self, "drift", tuple(_frozen(np.ravel(c)) for c in self.drift))

    @property
    def T(self) -> int:
        return len(self.A_blocks)

    @property
    def n(self) -> int:
        return self.x0.size

    @property
    def n_i(self) -> int:
        return self.B_blocks[0].shape[1] if self.B_blocks and self.B_blocks[0].ndim == 2 else 0

    @property
    def n_o(self) -> int:
        return self.C_blocks[0].shape[0] if self.C_blocks and self.C_blocks[0].ndim == 2 else 0

    @property
    def layout(self) -> Layout:
        return Layout(self.T, self.n, self.n_i)

    def step(self, t: int, x, u) -> np.ndarray:
        return self.A_blocks[t] @ x + self.B_blocks[t] @ u + self.drift[t]

    def output(self, t: int, x) -> np.ndarray:
        return self.C_blocks[t] @ x

    def rollout(self, inputs, w=None) -> np.ndarray:
        """States ``(T+1, n)`` from inputs ``(T, n_i)`` and optional process noise."""
        inputs = np.asarray(inputs, float).reshape(self.T, self.n_i)
        xs = np.zeros((self.T + 1, self.n))
        xs[0] = self.x0
        for t in range(self.T):
            xs[t + 1] = self.step(t, xs[t], inputs[t])
            if w is not None:
                xs[t + 1] += w[t]
        return xs

    @classmethod
    def time_invariant(cls, A, B, C, x0, T: int) -> "LtvSystem":
        return cls([A] * T, [B] * T, [C] * (T + 1), x0)


@dataclass(frozen=True)
class NonlinearSystem:
    """``x_{t+1} = f(t, x_t, u_t) + w_t`` with linear outputs ``y_t = C_t x_t + e_t``."""

    dynamics_fn: Callable
    C_blocks: tuple
    x0: np.ndarray
    T: int
    n_i: int
    jacobian_fn: Callable | None = None
    name: str = "nonlinear"

    def __post_init__(self):
        object.__setattr__(self, "C_blocks", tuple(_frozen(c) for c in self.C_blocks))
        object.__setattr__(self, "x0", _frozen(np.ravel(self.x0)))

    @property
    def n(self) -> int:
        return self.x0.size

    @property
    def n_o(self) -> int:
        return self.C_blocks[0].shape[0]

    @property
    def layout(self) -> Layout:
        return Layout(self.T, self.n, self.n_i)

    def step(self, t: int, x, u) -> np.ndarray:
        return np.asarray(self.dynamics_fn(t, np.asarray(x, float), np.asarray(u, float)), float)

    def output(self, t: int, x) -> np.ndarray:
        return self.C_blocks[t] @ x

    def rollout(self, inputs, w=None) -> np.ndarray:
        inputs = np.asarray(inputs, float).reshape(self.T, self.n_i)
        xs = np.zeros((self.T + 1, self.n))
        xs[0] = self.x0
        for t in range(self.T):
            xs[t + 1] = self.step(t, xs[t], inputs[t])
            if w is not None:
                xs[t + 1] += w[t]
        return xs

    def jacobians(self, t: int, x, u) -> tuple[np.ndarray, np.ndarray]:
        if self.jacobian_fn is not None:
            A, B = self.jacobian_fn(t, np.asarray(x, float), np.asarray(u, float))
            return np.asarray(A, float), np.asarray(B, float)
        return finite_difference_jacobians(self.dynamics_fn, t, x, u)


def finite_difference_jacobians(fn, t, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with step ``1e-6 max(1, |x_i|)`` per coordinate."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    n, m = x.size, u.size
    f0 = np.asarray(fn(t, x, u), float)
    A = np.zeros((f0.size, n))
    B = np.zeros((f0.size, m))
    for i in range(n):
        h = 1e-6 * max(1.0, abs(x[i]))
        dx = np.zeros(n)
        dx[i] = h
        A[:, i] = (np.asarray(fn(t, x + dx, u)) - np.asarray(fn(t, x - dx, u))) / (2 * h)
    for i in range(m):
        h = 1e-6 * max(1.0, abs(u[i]))
        du = np.zeros(m)
        du[i] = h
        B[:, i] = (np.asarray(fn(t, x, u + du)) - np.asarray(fn(t, x, u - du))) / (2 * h)
    return A, B


def linearize(system, states, inputs) -> LtvSystem:
    """Jacobian linearization about a reference trajectory.

    ``states`` has ``T+1`` rows (only the first ``T`` are used as linearization
    points) and ``inputs`` has ``T`` rows.  The affine offsets are kept, so an
    affine system is reproduced exactly.
    """
    if isinstance(system, LtvSystem):
        return system
    T = system.T
    states = np.asarray(states, float)
    inputs = np.asarray(inputs, float)
    if states.shape[0] not in (T, T + 1) or inputs.shape[0] != T:
        raise ValueError(f"reference trajectory lengths {states.shape[0]}, {inputs.shape[0]} "
                         f"do not match horizon {T}")
    As, Bs, cs = [], [], []
    for t in range(T):
        A, B = system.jacobians(t, states[t], inputs[t])
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError(f"non-finite Jacobian at timestep {t}")
        f = system.step(t, states[t], inputs[t])
        As.append(A)
        Bs.append(B)
        cs.append(f - A @ states[t] - B @ inputs[t])
    return LtvSystem(As, Bs, system.C_blocks, system.x0, drift=cs)


@dataclass(frozen=True)
class BlockOperators:
    """Block-diagonal ``calA``, ``calB``, ``calC`` over ``t = 0..T-1`` and the downshift ``Z``."""

    calA: np.ndarray
    calB: np.ndarray
    calC: np.ndarray
    Z: np.ndarray
    T: int
    n: int
    n_i: int
    n_o: int
    A_last: np.ndarray
    B_last: np.ndarray
    drift: np.ndarray  # stacked c_0..c_{T-1}


def block_diag_blocks(blocks: Sequence[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def downshift(T: int, n: int) -> np.ndarray:
    """Identity blocks on the first block subdiagonal."""
    return np.kron(np.eye(T, k=-1), np.eye(n))


def build_block_operators(system: LtvSystem) -> BlockOperators:
    report = _system_violations(system)
    if report:
        raise ValueError("invalid system: " + "; ".join(report))
    T, n = system.T, system.n
    return BlockOperators(
        calA=block_diag_blocks(system.A_blocks),
        calB=block_diag_blocks(system.B_blocks),
        calC=block_diag_blocks(system.C_blocks[:T]),
        Z=downshift(T, n),
        T=T, n=n, n_i=system.n_i, n_o=system.n_o,
        A_last=np.array(system.A_blocks[-1]),
        B_last=np.array(system.B_blocks[-1]),
        drift=np.concatenate(system.drift),
    )


# ---------------------------------------------------------------------------
# noise, cost, constraints


@dataclass(frozen=True)
class NoiseModel:
    """Infinity-norm balls of radius ``w_radius`` (process) and ``e_radius`` (output)."""

    w_radius: float = 0.0
    e_radius: float = 0.0


@dataclass(frozen=True)
class CostSpec:
    """Quadratic cost on the stacked vector, written with positions ``p_t``.

    ``J1``: ``sum_t ||p_{t+1} - p_t||^2 - p_{x,t}``;
    ``J2``: ``sum_t ||p_{t+1} - p_t||^2 - p_{x,t} - p_{y,t}``;
    ``J3``: ``sum_t ||p_{t+1} - p_t||^2 + ||p_t - p_T||^2 / T`` where ``p_T`` is the
    final position, or ``goal`` when one is given;
    ``custom``: ``1/2 eta'Q eta + q'eta``.
    Sums run over ``t = 0..T-1``.  Every kind adds
    ``input_weight * sum ||u_t||^2`` so the problem stays strictly convex in
    the inputs.
    """

    kind: str = "J1"
    position_indices: tuple = (0, 1)
    goal: np.ndarray | None = None
    Q: np.ndarray | None = None
    q: np.ndarray | None = None
    input_weight: float = 1e-3

    def quadratic(self, layout: Layout) -> tuple[np.ndarray, np.ndarray, float]:
        """``(H, f, c)`` with ``J(eta) = 1/2 eta'H eta + f'eta + c``."""
        T, n = layout.T, layout.n
        N = layout.N
        H = np.zeros((N, N))
        f = np.zeros(N)
        const = 0.0
        k = len(self.position_indices)
        P = np.zeros((k, n))
        P[np.arange(k), list(self.position_indices)] = 1.0

        def sel(t):
            S = np.zeros((k, N))
            S[:, layout.x(t)] = P
            return S

        if self.kind in ("J1", "J2", "J3"):
            for t in range(T):
                D = sel(t + 1) - sel(t)
                H += 2.0 * D.T @ D
        if self.kind in ("J1", "J2"):
            n_lin = 1 if self.kind == "J1" else 2
            for t in range(T):
                for j in range(n_lin):
                    f[layout.x(t).start + self.position_indices[j]] -= 1.0
        elif self.kind == "J3":
            for t in range(T):
                if self.goal is None:
                    D = sel(t) - sel(T)
                    H += (2.0 / T) * D.T @ D
                else:
                    g = np.asarray(self.goal, float)
                    S = sel(t)
                    H += (2.0 / T) * S.T @ S
                    f -= (2.0 / T) * S.T @ g
                    const += float(g @ g) / T
        elif self.kind == "custom":
            if self.Q is not None:
                H += np.asarray(self.Q, float)
            if self.q is not None:
                f += np.asarray(self.q, float)
        else:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        for t in range(T):
            H[layout.u(t), layout.u(t)] += 2.0 * self.input_weight * np.eye(layout.n_i)
        return H, f, const

    def value(self, layout: Layout, eta) -> float:
        H, f, c = self.quadratic(layout)
        eta = np.asarray(eta, float)
        return 0.5 * float(eta @ H @ eta) + float(f @ eta) + c


@dataclass(frozen=True)
class KnownConstraints:
    """Rows ``a' eta <= b`` known to the learner."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "b", _frozen(np.ravel(self.b)))

    @classmethod
    def empty(cls, N: int) -> "KnownConstraints":
        return cls(np.zeros((0, N)), np.zeros(0))

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def __add__(self, other: "KnownConstraints") -> "KnownConstraints":
        return KnownConstraints(np.vstack([self.A, other.A]), np.r_[self.b, other.b])


def input_box(layout: Layout, lower, upper, timesteps=None) -> KnownConstraints:
    """``lower <= u_t <= upper`` for the given timesteps (default all)."""
    ts = range(layout.T) if timesteps is None else timesteps
    lower = np.broadcast_to(np.asarray(lower, float), (layout.n_i,))
    upper = np.broadcast_to(np.asarray(upper, float), (layout.n_i,))
    rows, rhs = [], []
    for t in ts:
        for i in range(layout.n_i):
            idx = layout.u(t).start + i
            if np.isfinite(upper[i]):
                a = np.zeros(layout.N)
                a[idx] = 1.0
                rows.append(a)
                rhs.append(upper[i])
            if np.isfinite(lower[i]):
                a = np.zeros(layout.N)
                a[idx] = -1.0
                rows.append(a)
                rhs.append(-lower[i])
    return KnownConstraints(np.array(rows).reshape(-1, layout.N), np.array(rhs))


def state_box(layout: Layout, indices, lower, upper, timesteps=None) -> KnownConstraints:
    """``lower_j <= x_t[indices_j] <= upper_j`` (default timesteps ``1..T``)."""
    ts = range(1, layout.T + 1) if timesteps is None else timesteps
    k = len(indices)
    lower = np.broadcast_to(np.asarray(lower, float), (k,))
    upper = np.broadcast_to(np.asarray(upper, float), (k,))
    rows, rhs = [], []
    for t in ts:
        for j, i in enumerate(indices):
            idx = layout.x(t).start + i
            if np.isfinite(upper[j]):
                a = np.zeros(layout.N)
                a[idx] = 1.0
                rows.append(a)
                rhs.append(upper[j])
            if np.isfinite(lower[j]):
                a = np.zeros(layout.N)
                a[idx] = -1.0
                rows.append(a)
                rhs.append(-lower[j])
    return KnownConstraints(np.array(rows).reshape(-1, layout.N), np.array(rhs))


@dataclass(frozen=True)
class Obstacle:
    """A region ``{p : normals[b] . p >= offset_b(theta) for all b}`` in position space.

    Staying out of it means satisfying at least one disjunct
    ``normals[b] . p <= offset0[b] + theta_map[b] . theta``.
    """

    normals: np.ndarray      # (n_disjuncts, n_pos)
    offset0: np.ndarray      # (n_disjuncts,)
    theta_map: np.ndarray    # (n_disjuncts, d)
    timesteps: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "normals", _frozen(np.atleast_2d(self.normals)))
        object.__setattr__(self, "offset0", _frozen(np.ravel(self.offset0)))
        object.__setattr__(self, "theta_map", _frozen(np.atleast_2d(self.theta_map)))
        if self.timesteps is not None:
            object.__setattr__(self, "timesteps", tuple(int(t) for t in self.timesteps))

    @property
    def n_disjuncts(self) -> int:
        return self.normals.shape[0]

    def offsets(self, theta) -> np.ndarray:
        return self.offset0 + self.theta_map @ np.asarray(theta, float)

    def margins(self, p, theta) -> np.ndarray:
        """Disjunct values ``g_b = n_b . p - offset_b(theta)``; the point is outside iff ``min g_b <= 0``."""
        return self.normals @ np.asarray(p, float) - self.offsets(theta)


def box_obstacle(d: int = 4, theta_indices=(0, 1, 2, 3), timesteps=None) -> Obstacle:
    """Axis-aligned box ``[th_a, th_b] x [th_c, th_d]`` in the plane.

    Disjunct order: ``p_x <= th_a``, ``p_x >= th_b``, ``p_y <= th_c``, ``p_y >= th_d``.
    """
    ia, ib, ic, id_ = theta_indices
    normals = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    G = np.zeros((4, d))
    G[0, ia] = 1.0
    G[1, ib] = -1.0
    G[2, ic] = 1.0
    G[3, id_] = -1.0
    return Obstacle(normals, np.zeros(4), G, timesteps)


@dataclass(frozen=True)
class DisjunctRow:
    """One disjunct at one timestep, lifted to the stacked vector: ``a . eta <= c0 + G . theta``."""

    obstacle: int
    t: int
    beta: int
    a: np.ndarray
    c0: float
    G: np.ndarray


@dataclass(frozen=True)
class ParametricConstraintFamily:
    """Unknown constraints: every obstacle must be avoided at its timesteps."""

    param_dim: int
    param_lower: np.ndarray
    param_upper: np.ndarray
    obstacles: tuple = ()
    position_indices: tuple = (0, 1)

    def __post_init__(self):
        object.__setattr__(self, "param_lower", _frozen(np.ravel(self.param_lower)))
        object.__setattr__(self, "param_upper", _frozen(np.ravel(self.param_upper)))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "position_indices", tuple(int(i) for i in self.position_indices))

    def timesteps(self, k: int, T: int) -> tuple:
        ob = self.obstacles[k]
        return tuple(range(1, T + 1)) if ob.timesteps is None else ob.timesteps

    def rows(self, layout: Layout) -> list[list[list[DisjunctRow]]]:
        """``rows[k][j][beta]`` for obstacle ``k`` at its ``j``-th timestep."""
        out = []
        for k, ob in enumerate(self.obstacles):
            per_t = []
            for t in self.timesteps(k, layout.T):
                group = []
                for b in range(ob.n_disjuncts):
                    a = np.zeros(layout.N)
                    a[layout.x(t).start + np.array(self.position_indices)] = ob.normals[b]
                    group.append(DisjunctRow(k, t, b, a, float(ob.offset0[b]), np.array(ob.theta_map[b])))
                per_t.append(group)
            out.append(per_t)
        return out

    def positions(self, layout: Layout, eta) -> np.ndarray:
        states, _ = layout.split(eta)
        return states[:, list(self.position_indices)]

    def violations(self, layout: Layout, eta, theta) -> list[tuple[int, int, float]]:
        """``(obstacle, t, depth)`` for every timestep whose position is strictly inside."""
        P = self.positions(layout, eta)
        out = []
        for k, ob in enumerate(self.obstacles):
            for t in self.timesteps(k, layout.T):
                depth = float(np.min(ob.margins(P[t], theta)))
                if depth > 0:
                    out.append((k, t, depth))
        return out


@dataclass(frozen=True)
class ProblemInstance:
    system: object
    noise: NoiseModel
    cost: CostSpec
    known: KnownConstraints
    unknown: ParametricConstraintFamily
    theta_star: np.ndarray | None = None
    name: str = "problem"
    solver: dict = field(default_factory=dict)

    @property
    def layout(self) -> Layout:
        return self.system.layout

    @property
    def T(self) -> int:
        return self.system.T


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def raise_if_invalid(self) -> None:
        if self.violations:
            raise ValueError("invalid problem instance: " + "; ".join(self.violations))


def _system_violations(sys) -> list[str]:
    out = []
    T = sys.T
    if T < 1:
        out.append("system.T: horizon must be at least 1")
        return out
    n = sys.x0.size
    if not np.all(np.isfinite(sys.x0)):
        out.append("system.x0: non-finite entries")
    if len(sys.C_blocks) != T + 1:
        out.append(f"system.C_blocks: expected {T + 1} blocks, got {len(sys.C_blocks)}")
    n_o = sys.C_blocks[0].shape[0] if sys.C_blocks and sys.C_blocks[0].ndim == 2 else None
    for t, C in enumerate(sys.C_blocks):
        if C.ndim != 2 or C.shape[1] != n or C.shape[0] != n_o:
            out.append(f"system.C_blocks[{t}]: shape {C.shape}, expected ({n_o}, {n})")
        elif not np.all(np.isfinite(C)):
            out.append(f"system.C_blocks[{t}]: non-finite entries")
    if isinstance(sys, LtvSystem):
        n_i = sys.n_i
        if len(sys.B_blocks) != T:
            out.append(f"system.B_blocks: expected {T} blocks, got {len(sys.B_blocks)}")
        for t, A in enumerate(sys.A_blocks):
            if A.shape != (n, n):
                out.append(f"system.A_blocks[{t}]: shape {A.shape}, expected ({n}, {n})")
            elif not np.all(np.isfinite(A)):
                out.append(f"system.A_blocks[{t}]: non-finite entries")
        for t, B in enumerate(sys.B_blocks):
            if B.ndim != 2 or B.shape != (n, n_i):
                out.append(f"system.B_blocks[{t}]: shape {B.shape}, expected ({n}, {n_i})")
            elif not np.all(np.isfinite(B)):
                out.append(f"system.B_blocks[{t}]: non-finite entries")
        if len(sys.drift) != T or any(c.shape != (n,) for c in sys.drift):
            out.append("system.drift: expected T vectors of length n")
    return out


def validate_instance(inst: ProblemInstance) -> ValidationReport:
    """Collect every dimension or invariant violation; never raises."""
    v = _system_violations(inst.system)
    if v:
        return ValidationReport(v)
    lay = inst.layout
    if inst.noise.w_radius < 0 or not np.isfinite(inst.noise.w_radius):
        v.append("noise.w_radius: must be a finite nonnegative number")
    if inst.noise.e_radius < 0 or not np.isfinite(inst.noise.e_radius):
        v.append("noise.e_radius: must be a finite nonnegative number")
    c = inst.cost
    if c.kind not in ("J1", "J2", "J3", "custom"):
        v.append(f"cost.kind: unknown kind {c.kind!r}")
    if any(not 0 <= i < lay.n for i in c.position_indices):
        v.append("cost.position_indices: out of range")
    if c.goal is not None and np.size(c.goal) != len(c.position_indices):
        v.append("cost.goal: needs one entry per position coordinate")
    if c.kind == "J2" and len(c.position_indices) < 2:
        v.append("cost.position_indices: J2 needs x and y coordinates")
    if c.kind == "custom" and c.Q is not None:
        Q = np.asarray(c.Q, float)
        if Q.shape != (lay.N, lay.N):
            v.append(f"cost.Q: shape {Q.shape}, expected ({lay.N}, {lay.N})")
        elif not np.allclose(Q, Q.T, atol=1e-10):
            v.append("cost.Q: not symmetric")
        elif np.min(np.linalg.eigvalsh(Q)) < -1e-9 * max(1.0, np.max(np.abs(Q))):
            v.append("cost.Q: not positive semidefinite")
    if c.input_weight < 0:
        v.append("cost.input_weight: must be nonnegative")
    kn = inst.known
    if kn.A.shape[1] != lay.N and kn.m:
        v.append(f"known.A: {kn.A.shape[1]} columns, expected {lay.N}")
    elif kn.b.size != kn.m:
        v.append("known.b: length does not match row count")
    else:
        for i in range(kn.m):
            if not np.any(kn.A[i]):
                v.append(f"known.A[{i}]: zero row")
    u = inst.unknown
    d = u.param_dim
    if u.param_lower.size != d or u.param_upper.size != d:
        v.append("unknown.param_box: bounds must have param_dim entries")
    else:
        if np.any(u.param_lower > u.param_upper):
            v.append("unknown.param_box: lower bound exceeds upper bound")
        if not (np.all(np.isfinite(u.param_lower)) and np.all(np.isfinite(u.param_upper))):
            v.append("unknown.param_box: must be bounded")
    if any(not 0 <= i < lay.n for i in u.position_indices):
        v.append("unknown.position_indices: out of range")
    for k, ob in enumerate(u.obstacles):
        if ob.normals.shape[1] != len(u.position_indices):
            v.append(f"unknown.obstacles[{k}].normals: expected {len(u.position_indices)} columns")
        if ob.offset0.size != ob.n_disjuncts or ob.theta_map.shape != (ob.n_disjuncts, d):
            v.append(f"unknown.obstacles[{k}]: offset/theta map shape mismatch")
        if ob.timesteps is not None and any(not 0 <= t <= lay.T for t in ob.timesteps):
            v.append(f"unknown.obstacles[{k}].timesteps: outside 0..T")
        for b in range(ob.n_disjuncts):
            if not np.any(ob.normals[b]):
                v.append(f"unknown.obstacles[{k}].normals[{b}]: zero row")
    if inst.theta_star is not None:
        th = np.ravel(inst.theta_star)
        if th.size != d:
            v.append(f"theta_star: {th.size} entries, expected {d}")
    return ValidationReport(v)
