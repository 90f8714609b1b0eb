import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forge.demos import NoiseSequence, rollout
from forge.problem import LtvSystem, build_block_operators
from forge.sls import FeedbackGain, deviation_map, k_from_phi, phi_from_k, verify_response

from conftest import random_gain, random_ltv


def _instance(seed):
    rng = np.random.default_rng(seed)
    n, n_i, n_o = (int(v) for v in rng.integers(1, 5, 3))
    T = int(rng.integers(1, 9))
    sys = random_ltv(rng, n, n_i, n_o, T)
    return rng, sys, random_gain(rng, T, n_i, n_o)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_round_trip_recovers_gain(seed):
    _, sys, K = _instance(seed)
    ops = build_block_operators(sys)
    phi = phi_from_k(K, ops)
    assert verify_response(phi, ops, tol=1e-9).passed
    K2 = k_from_phi(phi)
    assert np.linalg.norm(K2.K - K.K) <= 1e-9 * max(1.0, np.linalg.norm(K.K))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_deviation_map_matches_simulation(seed):
    rng, sys, K = _instance(seed)
    T, n, n_i, n_o = sys.T, sys.n, sys.n_i, sys.n_o
    ops = build_block_operators(sys)
    Psi_w, Psi_e = deviation_map(phi_from_k(K, ops), ops)
    v = rng.standard_normal((T, n_i))
    z = sys.rollout(v)
    seq = NoiseSequence(rng.uniform(-1, 1, (T, n)), rng.uniform(-1, 1, (T + 1, n_o)))
    d = rollout(sys, z, v, K, seq)
    dev = np.r_[(d.x - z).ravel(), (d.u - v).ravel()]
    pred = Psi_w @ seq.w.ravel() + Psi_e @ seq.e[:T].ravel()
    assert np.max(np.abs(dev - pred)) <= 1e-8 * max(1.0, np.max(np.abs(dev)))


def test_zero_gain_response_is_open_loop():
    rng = np.random.default_rng(0)
    sys = random_ltv(rng, 3, 2, 2, 4)
    ops = build_block_operators(sys)
    phi = phi_from_k(FeedbackGain.zeros(4, 2, 2), ops)
    assert np.allclose(phi.phi_ue, 0.0) and np.allclose(phi.phi_uw, 0.0)
    assert np.allclose(phi.phi_xe, 0.0)
    # phi_xw is (I - ZA)^{-1}: block (2, 0) is A_1 A_0
    n = 3
    assert np.allclose(phi.phi_xw[2 * n:3 * n, :n], sys.A_blocks[1] @ sys.A_blocks[0])


def test_non_causal_gain_rejected():
    K = np.zeros((4, 4))
    K[0, 3] = 1.0
    with pytest.raises(ValueError, match="not causal"):
        FeedbackGain(K, 2, 2)


def test_verify_response_detects_tampering():
    rng = np.random.default_rng(1)
    sys = random_ltv(rng, 2, 1, 1, 3)
    ops = build_block_operators(sys)
    phi = phi_from_k(random_gain(rng, 3, 1, 1), ops)
    bad = type(phi)(phi.phi_xw + 1e-3, phi.phi_xe, phi.phi_uw, phi.phi_ue, phi.n, phi.n_i, phi.n_o)
    assert not verify_response(bad, ops).passed


def test_scalar_hand_example():
    # x+ = a x + b u + w, y = x + e, u_0 = k y_0: x_1 - z_1 = w_0 + b k e_0 when x_0 is exact
    a, b, k = 0.9, 2.0, -0.3
    sys = LtvSystem([np.array([[a]])], [np.array([[b]])], [np.eye(1)] * 2, np.zeros(1))
    ops = build_block_operators(sys)
    Psi_w, Psi_e = deviation_map(phi_from_k(FeedbackGain(np.array([[k]]), 1, 1), ops), ops)
    # rows: x_0, x_1, u_0
    assert np.allclose(Psi_w.ravel(), [0.0, 1.0, 0.0])
    assert np.allclose(Psi_e.ravel(), [0.0, b * k, k])
