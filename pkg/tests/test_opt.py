import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from forge.opt import (HighsBackend, MathProgram, SolverSettings, Status, kkt_residuals,
                       make_backend, reduce_equalities, solve_milp, solve_qp)


def dual_projected_gradient(H, f, A, b, iters=100000, tol=1e-12):
    """Accelerated projected gradient on the dual of a strictly convex QP.

    ``min 1/2 x'Hx + f'x  s.t.  Ax <= b``; the dual variables only need
    ``lambda >= 0``, so projection is a clip.
    """
    Hinv = np.linalg.inv(H)
    M = A @ Hinv @ A.T
    L = max(np.linalg.eigvalsh(M)[-1], 1e-12)
    lam = np.zeros(A.shape[0])
    y = lam.copy()
    t = 1.0
    for _ in range(iters):
        x = -Hinv @ (f + A.T @ y)
        grad = A @ x - b          # gradient of the (concave) dual, ascent direction
        lam_new = np.maximum(y + grad / L, 0.0)
        if np.max(np.abs(lam_new - lam)) <= tol:
            lam = lam_new
            break
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = lam_new + (t - 1) / t_new * (lam_new - lam)
        lam, t = lam_new, t_new
    return -Hinv @ (f + A.T @ lam)


def random_qp(rng, n, m):
    R = rng.standard_normal((n, n))
    H = R @ R.T + 0.5 * np.eye(n)
    f = rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    x_feas = rng.standard_normal(n)
    b = A @ x_feas + rng.uniform(0.0, 1.0, m)
    return H, f, A, b


def test_qp_matches_dual_gradient_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, m = rng.integers(2, 6), rng.integers(1, 8)
        H, f, A, b = random_qp(rng, n, m)
        sol = solve_qp(MathProgram(n, H, f, None, None, A, b))
        assert sol.status == Status.OPTIMAL
        ref = dual_projected_gradient(H, f, A, b)
        assert np.max(np.abs(sol.x - ref)) <= 1e-6


def test_qp_kkt_residuals_and_complementarity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        H, f, A, _ = random_qp(rng, 4, 6)
        d = rng.uniform(-0.3, 0.3, 4)
        x_feas = 0.075 + d - d.mean()            # inside the box, sums to 0.3
        b = A @ x_feas + rng.uniform(0.0, 1.0, 6)
        lb, ub = -np.ones(4), np.ones(4)
        prog = MathProgram(4, H, f, np.ones((1, 4)), np.array([0.3]), A, b, lb, ub)
        sol = solve_qp(prog)
        assert sol.status == Status.OPTIMAL
        res = kkt_residuals(prog, sol)
        assert max(res.values()) <= 1e-6, res


def test_lp_vertex_matches_highs():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n, m = 4, 7
        A = rng.standard_normal((m, n))
        b = A @ rng.standard_normal(n) + 1.0
        c = rng.standard_normal(n)
        prog = MathProgram(n, None, c, None, None, A, b, -5 * np.ones(n), 5 * np.ones(n))
        ours = solve_qp(prog)
        ref = linprog(c, A_ub=A, b_ub=b, bounds=[(-5, 5)] * n)
        assert ours.status == Status.OPTIMAL
        assert ours.objective == pytest.approx(ref.fun, abs=1e-7)


def test_infeasible_and_unbounded():
    infeas = MathProgram(1, None, np.array([1.0]), None, None, np.array([[1.0], [-1.0]]), np.array([0.0, -1.0]))
    assert solve_qp(infeas).status == Status.INFEASIBLE
    unb = MathProgram(1, None, np.array([-1.0]), None, None, np.array([[-1.0]]), np.array([0.0]))
    assert solve_qp(unb).status == Status.UNBOUNDED


def test_large_coefficient_rows_not_violated():
    # lambda <= 1000 c with c fixed at zero must force lambda to zero exactly
    prog = MathProgram(2, None, None, np.array([[1.0, 0.0]]), np.array([2e-4]),
                       np.array([[1.0, -1000.0]]), np.array([0.0]),
                       np.array([-1.0, 0.0]), np.array([1.0, 0.0]))
    assert solve_qp(prog).status == Status.INFEASIBLE


def test_equality_reduction_spans_solutions():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((2, 5))
    b = rng.standard_normal(2)
    red = reduce_equalities(A, b, 5)
    assert red.rank == 2
    assert np.allclose(A @ red.x_p, b)
    assert np.allclose(A @ red.N, 0.0)
    assert np.allclose(red.N.T @ red.N, np.eye(3))


def enumerate_milp(c, A, b, lb, ub, bins):
    """Best objective over all binary assignments, each an LP solved by HiGHS."""
    best = np.inf
    for combo in itertools.product((0.0, 1.0), repeat=len(bins)):
        lo, hi = lb.copy(), ub.copy()
        lo[list(bins)] = combo
        hi[list(bins)] = combo
        r = linprog(c, A_ub=A, b_ub=b, bounds=list(zip(lo, hi)), method="highs")
        if r.status == 0:
            best = min(best, r.fun)
    return best


def random_milp(rng, n_bin, n_cont, m):
    n = n_bin + n_cont
    A = rng.standard_normal((m, n))
    b = rng.uniform(-0.5, 1.5, m)
    c = rng.standard_normal(n)
    lb = np.r_[np.zeros(n_bin), -2 * np.ones(n_cont)]
    ub = np.r_[np.ones(n_bin), 2 * np.ones(n_cont)]
    return c, A, b, lb, ub, tuple(range(n_bin))


def test_milp_matches_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(30):
        c, A, b, lb, ub, bins = random_milp(rng, int(rng.integers(1, 7)), 2, 5)
        ref = enumerate_milp(c, A, b, lb, ub, bins)
        sol = solve_milp(MathProgram(len(c), None, c, None, None, A, b, lb, ub, bins))
        if np.isinf(ref):
            assert sol.status == Status.INFEASIBLE
        else:
            assert sol.status == Status.OPTIMAL
            assert sol.objective == pytest.approx(ref, abs=1e-6)
            assert np.all(np.isin(sol.x[list(bins)], (0.0, 1.0)))


def test_milp_twelve_binaries():
    rng = np.random.default_rng(5)
    c, A, b, lb, ub, bins = random_milp(rng, 12, 1, 6)
    ref = enumerate_milp(c, A, b, lb, ub, bins)
    sol = solve_milp(MathProgram(len(c), None, c, None, None, A, b, lb, ub, bins))
    assert sol.status == Status.OPTIMAL
    assert sol.objective == pytest.approx(ref, abs=1e-6)


def test_milp_node_limit_reports_iter_limit():
    rng = np.random.default_rng(6)
    c, A, b, lb, ub, bins = random_milp(rng, 10, 1, 6)
    sol = solve_milp(MathProgram(len(c), None, c, None, None, A, b, lb, ub, bins),
                     SolverSettings(max_nodes=2))
    assert sol.status in (Status.ITER_LIMIT, Status.OPTIMAL)
    if sol.status == Status.OPTIMAL:
        # only possible when the root relaxation was already integral
        assert sol.info["nodes"] <= 2


def test_highs_backend_agrees():
    rng = np.random.default_rng(7)
    for _ in range(10):
        c, A, b, lb, ub, bins = random_milp(rng, 4, 2, 5)
        prog = MathProgram(len(c), None, c, None, None, A, b, lb, ub, bins)
        ours = make_backend("builtin").solve(prog)
        ref = HighsBackend().solve(prog)
        assert ours.status == ref.status
        if ref.status == Status.OPTIMAL:
            assert ours.objective == pytest.approx(ref.objective, abs=1e-6)


def test_non_psd_hessian_rejected():
    H = np.array([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ValueError):
        solve_qp(MathProgram(2, H, np.zeros(2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_qp_solution_is_kkt_point(seed):
    rng = np.random.default_rng(seed)
    H, f, A, b = random_qp(rng, 3, 4)
    prog = MathProgram(3, H, f, None, None, A, b)
    sol = solve_qp(prog)
    assert sol.status == Status.OPTIMAL
    res = kkt_residuals(prog, sol)
    assert res["ineq"] <= 1e-7 and res["stationarity"] <= 1e-6 and res["complementarity"] <= 1e-6


def test_equality_only_qp():
    H = np.diag([2.0, 1.0, 4.0])
    f = np.array([1.0, -1.0, 0.5])
    A = np.array([[1.0, 1.0, 1.0]])
    sol = solve_qp(MathProgram(3, H, f, A, np.array([1.0])))
    KKT = np.block([[H, A.T], [A, np.zeros((1, 1))]])
    ref = np.linalg.solve(KKT, np.r_[-f, 1.0])
    assert sol.status == Status.OPTIMAL
    assert np.allclose(sol.x, ref[:3]) and np.allclose(sol.eq_multipliers, ref[3:])
