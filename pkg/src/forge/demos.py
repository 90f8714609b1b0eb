"""Closed-loop rollouts and transmission-error corruption.

All randomness comes from ``numpy.random.Generator`` streams spawned from a
single root seed, one stream per rollout, so any execution order produces the
same data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .sls import FeedbackGain

UNIFORM = "uniform"
VERTEX = "vertex"


@dataclass(frozen=True)
class NoiseSequence:
    w: np.ndarray   # (T, n)
    e: np.ndarray   # (T+1, n_o)


def sample_noise(noise, T: int, n: int, n_o: int, strategy: str = UNIFORM,
                 rng: np.random.Generator | None = None) -> NoiseSequence:
    rng = rng if rng is not None else np.random.default_rng()
    if strategy == UNIFORM:
        w = rng.uniform(-noise.w_radius, noise.w_radius, (T, n))
        e = rng.uniform(-noise.e_radius, noise.e_radius, (T + 1, n_o))
    elif strategy == VERTEX:
        w = noise.w_radius * rng.choice([-1.0, 1.0], (T, n))
        e = noise.e_radius * rng.choice([-1.0, 1.0], (T + 1, n_o))
    else:
        raise ValueError(f"unknown noise strategy {strategy!r}")
    return NoiseSequence(w + 0.0, e + 0.0)


@dataclass(frozen=True)
class Demonstration:
    u: np.ndarray            # (T, n_i)
    y: np.ndarray            # (T+1, n_o)
    x: np.ndarray | None = None  # hidden states (T+1, n), for test oracles only

    @property
    def u_stack(self) -> np.ndarray:
        return self.u.ravel()

    def y_stack(self, T: int | None = None) -> np.ndarray:
        """First ``T`` outputs stacked (all ``T+1`` when ``T`` is None)."""
        return (self.y if T is None else self.y[:T]).ravel()


@dataclass(frozen=True)
class DemoSet:
    demos: tuple
    corrupted: bool = False
    epsilon: float = 0.0
    rng_seed: int | None = None
    strategy: str = UNIFORM
    clean: tuple | None = None   # uncorrupted demos when ``corrupted``
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.demos)

    def __iter__(self):
        return iter(self.demos)


def rollout(system, z, v, K: FeedbackGain, noise_seq: NoiseSequence,
            C_blocks=None) -> Demonstration:
    """``u_t = v_t + sum_{tau<=t} K_{t,tau} (y_tau - C_tau z_tau)`` closed around ``system``."""
    T = system.T
    C = system.C_blocks if C_blocks is None else C_blocks
    z = np.asarray(z, float).reshape(T + 1, -1)
    v = np.asarray(v, float).reshape(T, -1)
    n_i, n_o = v.shape[1], C[0].shape[0]
    Km = K.K
    x = np.zeros((T + 1, system.n))
    y = np.zeros((T + 1, n_o))
    u = np.zeros((T, n_i))
    err = np.zeros(T * n_o)
    x[0] = system.x0
    for t in range(T + 1):
        y[t] = C[t] @ x[t] + noise_seq.e[t]
        if t == T:
            break
        err[t * n_o:(t + 1) * n_o] = y[t] - C[t] @ z[t]
        u[t] = v[t] + Km[t * n_i:(t + 1) * n_i, :(t + 1) * n_o] @ err[:(t + 1) * n_o]
        x[t + 1] = system.step(t, x[t], u[t]) + noise_seq.w[t]
        if not np.all(np.isfinite(x[t + 1])):
            raise FloatingPointError(f"non-finite state at t={t + 1}")
    return Demonstration(u, y, x)


def _streams(seed, count: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(count)]


def generate_demoset(z, v, K: FeedbackGain, system, noise, D: int, strategy: str = UNIFORM,
                     seed: int = 0) -> DemoSet:
    """``D`` independent rollouts around one nominal ``(z, v)`` and gain ``K``."""
    if D < 1:
        raise ValueError("need at least one demonstration")
    demos = []
    for rng in _streams(seed, D):
        seq = sample_noise(noise, system.T, system.n, system.C_blocks[0].shape[0], strategy, rng)
        demos.append(rollout(system, z, v, K, seq))
    return DemoSet(tuple(demos), rng_seed=seed, strategy=strategy)


def perturb(demos: DemoSet, epsilon: float, seed: int = 0) -> DemoSet:
    """Add i.i.d. uniform ``[-epsilon, epsilon]`` errors to every transmitted ``u`` and ``y``.

    ``seed`` is an int or a sequence of ints (e.g. ``(root, level, trial)``).
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if epsilon == 0:
        return demos
    base = demos.clean if demos.corrupted else demos.demos
    out = []
    for d, rng in zip(base, _streams([*np.ravel(seed).tolist(), 1], len(base))):
        du = rng.uniform(-epsilon, epsilon, d.u.shape)
        dy = rng.uniform(-epsilon, epsilon, d.y.shape)
        out.append(Demonstration(d.u + du, d.y + dy, d.x))
    return replace(demos, demos=tuple(out), corrupted=True, epsilon=float(epsilon),
                   clean=tuple(base), meta={**demos.meta, "perturb_seed": seed})
