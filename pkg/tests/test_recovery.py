import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forge.demos import NoiseSequence, generate_demoset, perturb, rollout, sample_noise
from forge.dynamics import double_integrator, pd_gain, unicycle
from forge.inverse.recovery import (DifferenceMatrices, gamma_matrix, recover_gain, recover_nominal,
                                    recover_nominal_nonlinear, recover_policy, stack_differences)
from forge.problem import LtvSystem, NoiseModel, build_block_operators
from forge.sls import FeedbackGain

from conftest import random_gain, random_ltv


def _nominal(sys, rng, scale=0.5):
    v = scale * rng.standard_normal((sys.T, sys.n_i))
    return sys.rollout(v), v


def _rel(a, b):
    return np.linalg.norm(a - b) / (1 + np.linalg.norm(b))


# ----------------------------------------------------------------- demos

def test_demos_are_reproducible_and_seed_sensitive():
    rng = np.random.default_rng(0)
    sys = double_integrator(5, 0.5)
    z, v = _nominal(sys, rng)
    K = FeedbackGain(pd_gain(5, 0.5, 0.8), 2, 4)
    a = generate_demoset(z, v, K, sys, NoiseModel(0.1, 0.05), 10, seed=3)
    b = generate_demoset(z, v, K, sys, NoiseModel(0.1, 0.05), 10, seed=3)
    c = generate_demoset(z, v, K, sys, NoiseModel(0.1, 0.05), 10, seed=4)
    assert all(np.array_equal(x.u, y.u) and np.array_equal(x.y, y.y) for x, y in zip(a, b))
    assert not np.array_equal(a.demos[0].u, c.demos[0].u)


def test_scalar_rollout_by_hand():
    # x+ = x + u + w, y = x, u_1 = 0.5 y_1; w_0 = 0.1 gives x_1 = 0.1, u_1 = 0.05, x_2 = 0.15
    one = np.eye(1)
    sys = LtvSystem([one, one], [one, one], [one] * 3, np.zeros(1))
    K = FeedbackGain(np.array([[0.0, 0.0], [0.0, 0.5]]), 1, 1)
    d = rollout(sys, np.zeros((3, 1)), np.zeros((2, 1)), K,
                NoiseSequence(np.array([[0.1], [0.0]]), np.zeros((3, 1))))
    assert np.allclose(d.x.ravel(), [0.0, 0.1, 0.15]) and np.allclose(d.u.ravel(), [0.0, 0.05])


def test_noise_respects_radii():
    rng = np.random.default_rng(1)
    nm = NoiseModel(0.3, 0.1)
    s = sample_noise(nm, 6, 4, 2, "uniform", rng)
    assert np.max(np.abs(s.w)) <= 0.3 and np.max(np.abs(s.e)) <= 0.1
    s = sample_noise(nm, 6, 4, 2, "vertex", rng)
    assert np.allclose(np.abs(s.w), 0.3) and np.allclose(np.abs(s.e), 0.1)
    with pytest.raises(ValueError):
        sample_noise(nm, 6, 4, 2, "gaussian", rng)


def test_noise_free_rollout_follows_nominal():
    rng = np.random.default_rng(2)
    sys = random_ltv(rng, 3, 2, 2, 4)
    z, v = _nominal(sys, rng)
    d = rollout(sys, z, v, random_gain(rng, 4, 2, 2), NoiseSequence(np.zeros((4, 3)), np.zeros((5, 2))))
    assert np.allclose(d.x, z) and np.allclose(d.u, v)


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-4, 1.0), st.integers(0, 1000))
def test_perturb_is_bounded_and_keeps_clean(eps, seed):
    rng = np.random.default_rng(seed)
    sys = double_integrator(3, 0.5)
    z, v = _nominal(sys, rng)
    ds = generate_demoset(z, v, FeedbackGain.zeros(3, 2, 4), sys, NoiseModel(0.1, 0.1), 4, seed=seed)
    cd = perturb(ds, eps, seed)
    assert cd.corrupted and cd.clean == ds.demos
    for a, b in zip(cd.demos, ds.demos):
        assert np.max(np.abs(a.u - b.u)) <= eps and np.max(np.abs(a.y - b.y)) <= eps
    # re-perturbing starts from the clean data, never compounds
    again = perturb(cd, eps, seed)
    assert all(np.array_equal(a.u, b.u) for a, b in zip(again.demos, cd.demos))


# -------------------------------------------------------------- recovery

def test_hand_two_step_gain():
    # n_i = n_o = 1, T = 2: u_0 = k00 e_0, u_1 = k10 e_0 + k11 e_1
    K = np.array([[0.5, 0.0], [-0.2, 0.3]])
    Y = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])
    U = K @ Y
    Kh, diag = recover_gain(DifferenceMatrices(U, Y), 1, 1)
    assert np.allclose(Kh.K, K, atol=1e-12)
    assert diag["rich"] and diag["rank"] == 2


def test_exact_recovery_state_feedback():
    rng = np.random.default_rng(3)
    sys = double_integrator(10, 0.2)
    z, v = _nominal(sys, rng)
    K = FeedbackGain(pd_gain(10, 0.8, 1.2), 2, 4)
    ds = generate_demoset(z, v, K, sys, NoiseModel(0.1, 0.05), 50, seed=1)
    pol = recover_policy(ds.demos, sys)
    assert pol.diagnostics["rich"]
    assert _rel(pol.K.K, K.K) <= 1e-6
    assert np.max(np.abs(pol.z[:10] - z[:10])) <= 1e-6
    assert np.max(np.abs(pol.v - v)) <= 1e-6


def test_random_ltv_output_feedback_recovery():
    rng = np.random.default_rng(4)
    T, n, n_i, n_o = 4, 3, 2, 2
    sys = random_ltv(rng, n, n_i, n_o, T, scale=0.3)
    z, v = _nominal(sys, rng)
    K = random_gain(rng, T, n_i, n_o, 0.3)
    ds = generate_demoset(z, v, K, sys, NoiseModel(0.2, 0.2), 3 * n_o * T, seed=2)
    pol = recover_policy(ds.demos, sys)
    assert _rel(pol.K.K, K.K) <= 1e-8
    assert np.max(np.abs(pol.v - v)) <= 1e-8


def test_identical_demos_are_flagged():
    rng = np.random.default_rng(5)
    sys = double_integrator(4, 0.5)
    z, v = _nominal(sys, rng)
    K = FeedbackGain(pd_gain(4, 0.5, 0.5), 2, 4)
    ds = generate_demoset(z, v, K, sys, NoiseModel(0.0, 0.0), 6, seed=0)
    _, diag = recover_gain(stack_differences(ds.demos, 4), 2, 4)
    assert diag["rank"] == 0 and not diag["rich"]


def test_fixed_start_without_output_noise_hides_first_block():
    # y_0 = C x0 in every demo, so the difference rows of y_0 vanish
    rng = np.random.default_rng(6)
    sys = double_integrator(4, 0.5, output="position")
    z, v = _nominal(sys, rng)
    K = FeedbackGain(pd_gain(4, 0.5, 0.5, "position"), 2, 2)
    ds = generate_demoset(z, v, K, sys, NoiseModel(0.2, 0.0), 40, seed=0)
    diff = stack_differences(ds.demos, 4)
    assert np.allclose(diff.Y[:2], 0.0)
    _, diag = recover_gain(diff, 2, 2)
    assert diag["rank"] == 2 * 4 - 2 and not diag["rich"]


def test_nominal_matrix_is_unit_lower_for_causal_gains():
    # the Schur complement of Gamma is unit block lower-triangular, so Gamma never degenerates
    rng = np.random.default_rng(8)
    sys = random_ltv(rng, 2, 1, 1, 5)
    G = gamma_matrix(random_gain(rng, 5, 1, 1, 50.0), build_block_operators(sys))
    assert np.linalg.det(G) == pytest.approx(1.0, rel=1e-6)
    with pytest.raises(ValueError):
        recover_nominal([], FeedbackGain.zeros(5, 1, 1), sys)


def test_too_few_demos_rejected():
    with pytest.raises(ValueError):
        stack_differences([object()])


def test_unicycle_nominal_by_gauss_newton():
    T = 8
    sys = unicycle(T, 0.2, x0=(0.0, 0.0, 0.1, 1.0))
    rng = np.random.default_rng(7)
    v = 0.3 * rng.standard_normal((T, 2))
    z = sys.rollout(v)
    K = FeedbackGain(pd_gain(T, 0.4, 0.6), 2, 4)
    ds = generate_demoset(z, v, K, sys, NoiseModel(0.01, 0.01), 60, seed=3)
    zh, vh, info = recover_nominal_nonlinear(ds.demos, K, sys)
    assert info["converged"]
    assert info["fit_residual"] <= 1e-6
    assert np.max(np.abs(vh - v)) <= 1e-3
    pol = recover_policy(ds.demos, sys)
    assert isinstance(pol.system, LtvSystem)
