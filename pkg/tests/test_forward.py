import copy
import itertools

import numpy as np
import pytest

from forge import io
from forge.demos import rollout, sample_noise
from forge.dynamics import double_integrator, pd_gain
from forge.forward import (ForwardInfeasible, check_rollout_constraints, dynamics_rows,
                           enumerate_disjunct_assignments, solve_forward, tighten_halfspace,
                           tightening_margins)
from forge.problem import (CostSpec, KnownConstraints, NoiseModel, ParametricConstraintFamily,
                           ProblemInstance, build_block_operators, input_box, state_box)
from forge.sls import FeedbackGain, deviation_map, phi_from_k, verify_response

from conftest import random_gain, random_ltv


def _course(cfg, **over):
    cfg = copy.deepcopy(cfg)
    for k, v in over.items():
        cfg[k] = v
    return io.build_instance(cfg)


@pytest.fixture(scope="module")
def course(course_cfg):
    inst = io.build_instance(course_cfg)
    K = io.build_gain(course_cfg["synthesis"]["gain"], inst.system)
    return inst, K, solve_forward(inst, "fixed-phi", K)


def test_margin_equals_worst_vertex():
    rng = np.random.default_rng(0)
    sys = random_ltv(rng, 2, 1, 1, 2)
    ops = build_block_operators(sys)
    phi = phi_from_k(random_gain(rng, 2, 1, 1), ops)
    Psi_w, Psi_e = deviation_map(phi, ops)
    a = rng.standard_normal(Psi_w.shape[0])
    nm = NoiseModel(0.3, 0.1)
    worst = max(a @ (Psi_w @ (0.3 * np.array(sw)) + Psi_e @ (0.1 * np.array(se)))
                for sw in itertools.product((-1, 1), repeat=Psi_w.shape[1])
                for se in itertools.product((-1, 1), repeat=Psi_e.shape[1]))
    assert tightening_margins(a, Psi_w, Psi_e, nm)[0] == pytest.approx(worst, rel=1e-12)
    tc = tighten_halfspace(a, 2.0, phi, nm, ops)
    assert tc.rhs == pytest.approx(2.0 - worst)


def test_unconstrained_forward_matches_linear_kkt():
    sys = double_integrator(4, 0.5)
    lay = sys.layout
    inst = ProblemInstance(sys, NoiseModel(), CostSpec("J1"), KnownConstraints.empty(lay.N),
                           ParametricConstraintFamily(0, np.zeros(0), np.zeros(0)), theta_star=np.zeros(0))
    fs = solve_forward(inst, "fixed-phi", FeedbackGain.zeros(4, 2, 4))
    H, f, _ = inst.cost.quadratic(lay)
    A, b = dynamics_rows(sys)
    m = A.shape[0]
    KKT = np.block([[H, A.T], [A, np.zeros((m, m))]])
    ref = np.linalg.solve(KKT, np.r_[-f, b])[:lay.N]
    assert np.max(np.abs(fs.eta - ref)) <= 1e-8


def test_fixed_phi_solution_is_robust(course):
    inst, K, fs = course
    ops = build_block_operators(inst.system)
    assert verify_response(fs.phi, ops, tol=1e-9).passed
    assert np.array_equal(fs.K.K, K.K)
    rng = np.random.default_rng(1)
    for r in range(300):
        seq = sample_noise(inst.noise, inst.T, inst.system.n, inst.system.n_o,
                           "vertex" if r % 2 else "uniform", rng)
        d = rollout(inst.system, fs.z, fs.v, fs.K, seq)
        rep = check_rollout_constraints(inst, np.r_[d.x.ravel(), d.u.ravel()])
        assert rep["known_violated"] == 0 and rep["obstacle_violated"] == 0


def test_nominal_respects_tightened_rows(course):
    inst, _, fs = course
    slack = inst.known.b - inst.known.A @ fs.eta
    assert np.all(slack >= fs.margins_known - 1e-8)
    P = inst.unknown.positions(inst.layout, fs.eta)
    ob = inst.unknown.obstacles[0]
    for (k, t, b), m in zip(fs.assignment, fs.margins_unknown):
        g = ob.margins(P[t], inst.theta_star)[b]
        assert g <= -m + 1e-8
    # complementary slackness on the assigned rows
    for (k, t, b), lam, m in zip(fs.assignment, fs.lam_unknown, fs.margins_unknown):
        g = ob.margins(P[t], inst.theta_star)[b] + m
        assert abs(lam * g) <= 1e-6


def test_noise_can_only_raise_the_objective(course_cfg, course):
    inst, K, fs = course
    quiet = _course(course_cfg, noise={"w_radius": 0.0, "e_radius": 0.0})
    assert solve_forward(quiet, "fixed-phi", K).objective <= fs.objective + 1e-9


def test_assignments_start_with_heuristic_and_are_unique(course):
    inst, _, fs = course
    assigns = enumerate_disjunct_assignments(inst, cap=8)
    assert 1 <= len(assigns) <= 8
    assert len(set(assigns)) == len(assigns)
    groups = [(k, t) for k, t, _ in assigns[0]]
    assert groups == [(0, t) for t in range(1, inst.T + 1)]
    assert fs.assignment in assigns


def test_unreachable_known_constraint_raises():
    sys = double_integrator(3, 0.5)
    lay = sys.layout
    known = input_box(lay, -0.1, 0.1) + state_box(lay, [0], 100.0, np.inf, timesteps=[3])
    inst = ProblemInstance(sys, NoiseModel(), CostSpec("J1"), known,
                           ParametricConstraintFamily(0, np.zeros(0), np.zeros(0)), theta_star=np.zeros(0))
    with pytest.raises(ForwardInfeasible):
        solve_forward(inst, "fixed-phi", FeedbackGain(pd_gain(3, 0.5, 0.5), 2, 4))


def test_fixed_phi_needs_gain(course):
    inst, _, _ = course
    with pytest.raises(ValueError):
        solve_forward(inst, "fixed-phi", None)


def test_joint_mode_is_robust(course_cfg):
    inst = _course(course_cfg, noise={"w_radius": 0.05, "e_radius": 0.02})
    fs = solve_forward(inst, "joint")
    ops = build_block_operators(inst.system)
    assert verify_response(fs.phi, ops, tol=1e-8).passed
    rng = np.random.default_rng(2)
    for r in range(100):
        seq = sample_noise(inst.noise, inst.T, inst.system.n, inst.system.n_o,
                           "vertex" if r % 2 else "uniform", rng)
        d = rollout(inst.system, fs.z, fs.v, fs.K, seq)
        rep = check_rollout_constraints(inst, np.r_[d.x.ravel(), d.u.ravel()])
        assert rep["known_violated"] == 0 and rep["obstacle_violated"] == 0
