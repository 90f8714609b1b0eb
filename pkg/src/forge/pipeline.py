"""The five stages wired together, with optional self-checks per stage.

``run_experiment`` executes forward synthesis, demonstration generation,
recovery, parameter inference and then grid classification or the noise
sweep, writing one artifact per stage plus ``manifest.json``.
"""

from __future__ import annotations

import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, io
from .demos import VERTEX, NoiseSequence, generate_demoset, perturb, rollout, sample_noise
from .forward import ForwardSolution, check_rollout_constraints, solve_forward
from .inverse.classify import SAFE, UNSAFE, GridSpec, cell_meets_obstacle, classify_grid, offset_ranges
from .inverse.kkt import build_kkt_program, infer_theta, replay_residuals
from .inverse.recovery import RecoveredPolicy, gamma_matrix, recover_policy
from .inverse.sensitivity import SWEEP_COLUMNS, run_noise_sweep, touched_components
from .opt import SolverSettings
from .problem import LtvSystem, ProblemInstance, build_block_operators, linearize
from .sls import deviation_map, verify_response

log = logging.getLogger(__name__)

GRID_COLUMNS = ("cell_i", "cell_j", "verdict")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class CheckResult:
    stage: str
    name: str
    passed: bool
    detail: str = ""


def _require(checks: list, stage: str, name: str, passed: bool, detail: str = "") -> None:
    checks.append(CheckResult(stage, name, bool(passed), detail))
    if not passed:
        raise StageError(stage, f"check {name!r} failed ({detail})")


# ---------------------------------------------------------------------------
# stages


def forward_stage(inst: ProblemInstance, syn: dict, settings: SolverSettings) -> ForwardSolution:
    mode = syn.get("mode", "joint")
    K = io.build_gain(syn.get("gain"), inst.system) if mode == "fixed-phi" else None
    seed_path = syn.get("seed_path")
    return solve_forward(inst, mode, K=K, settings=settings,
                         seed_path=None if seed_path is None else np.asarray(seed_path, float),
                         max_assignments=int(syn.get("max_assignments", 8)))


def robustness_audit(inst: ProblemInstance, fs: ForwardSolution, samples: int = 200, seed: int = 0) -> dict:
    """Closed-loop rollouts under uniform noise and under each row's worst noise vertex.

    The worst vertex of a row ``a`` sets every noise entry to the radius
    times the sign of its coefficient in ``a Psi``, which maximizes the
    row's value over the noise box.
    """
    system = inst.system
    lin = fs.system
    n, n_o, T = system.n, system.C_blocks[0].shape[0], system.T
    Psi_w, Psi_e = deviation_map(fs.phi, build_block_operators(lin))
    rows = [inst.known.A[i] for i in range(inst.known.m)]
    fam_rows = inst.unknown.rows(inst.layout)
    for k, t, b in fs.assignment:
        grp = fam_rows[k][list(inst.unknown.timesteps(k, T)).index(t)]
        rows.append(grp[b].a)
    seqs = []
    for a in rows:
        w = inst.noise.w_radius * np.sign(a @ Psi_w).reshape(T, n)
        e = np.zeros((T + 1, n_o))
        e[:T] = inst.noise.e_radius * np.sign(a @ Psi_e).reshape(T, n_o)
        seqs.append(NoiseSequence(w, e))
    rng = np.random.default_rng(seed)
    for i in range(samples):
        seqs.append(sample_noise(inst.noise, T, n, n_o, VERTEX if i % 2 else "uniform", rng))
    bad, worst = 0, -np.inf
    for seq in seqs:
        d = rollout(system, fs.z, fs.v, fs.K, seq)
        eta = np.r_[d.x.ravel(), d.u.ravel()]
        res = check_rollout_constraints(inst, eta)
        worst = max(worst, res["known"])
        bad += int(res["known_violated"] > 0 or res["obstacle_violated"] > 0)
    return {"rollouts": len(seqs), "violations": bad, "worst_known": worst}


def demos_stage(inst: ProblemInstance, fs: ForwardSolution, dc: dict, seed: int):
    ds = generate_demoset(fs.z, fs.v, fs.K, inst.system, inst.noise, int(dc.get("count", 100)),
                          dc.get("strategy", "uniform"), seed)
    eps = float(dc.get("epsilon", 0.0))
    return perturb(ds, eps, seed) if eps > 0 else ds


def policy_from_dict(d: dict, system) -> RecoveredPolicy:
    K = io.FeedbackGain(np.asarray(d["K"]["K"], float), int(d["K"]["n_i"]), int(d["K"]["n_o"]))
    z = np.asarray(d["z"], float)
    v = np.asarray(d["v"], float)
    lin = system if isinstance(system, LtvSystem) else linearize(system, z, v)
    ops = build_block_operators(lin)
    return RecoveredPolicy(K, io.phi_from_dict(d["phi"]), z, v, gamma_matrix(K, ops), lin,
                           dict(d.get("diagnostics", {})))


def infer_stage(inst: ProblemInstance, pol: RecoveredPolicy, ic: dict, settings: SolverSettings,
                theta_fixed=None):
    kp = build_kkt_program(pol, inst, M_lambda=float(ic.get("M_lambda", 1e3)),
                           relaxed=bool(ic.get("relaxed", False)))
    w = infer_theta(kp, theta_fixed=theta_fixed, settings=settings)
    res = replay_residuals(kp, w) if w.feasible else None
    return kp, w, res


def grid_from_config(cc: dict) -> GridSpec:
    g = cc.get("grid", [50, 50])
    if isinstance(g, str):
        g = [int(s) for s in g.lower().split("x")]
    return GridSpec(int(g[0]), int(g[1]), tuple(float(v) for v in cc["window"]))


def grid_errors(inst: ProblemInstance, gc) -> int:
    """Cells whose verdict contradicts the true parameter."""
    theta = inst.theta_star
    bad = 0
    for i, j, cell in gc.grid.cells():
        v = gc.verdicts[i, j]
        if v == SAFE and any(cell_meets_obstacle(ob, theta, cell) for ob in inst.unknown.obstacles):
            bad += 1
        elif v == UNSAFE:
            corners = [(cell[0], cell[2]), (cell[1], cell[2]), (cell[0], cell[3]), (cell[1], cell[3])]
            if not any(all(np.min(ob.margins(p, theta)) >= 0 for p in corners) for ob in inst.unknown.obstacles):
                bad += 1
    return bad


# ---------------------------------------------------------------------------
# full run


@dataclass
class RunResult:
    manifest: dict
    checks: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)


def versions() -> dict:
    return {"forge": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run_experiment(cfg: dict, out_dir, seed: int | None = None, jobs: int = 1, check: bool = False,
                   stages=None) -> RunResult:
    """Run the configured stages and write their artifacts into ``out_dir``.

    Raises ``StageError`` naming the failing stage; the manifest written so
    far stays on disk with ``failed_stage`` set.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    stages = list(stages or cfg.get("stages", ["forward", "demos", "recover", "infer", "classify"]))
    manifest = {"name": cfg.get("name", "problem"), "config_hash": io.content_hash(cfg), "seed": seed,
                "versions": versions(), "stages": stages, "files": {}, "failed_stage": None}
    result = RunResult(manifest)
    checks = result.checks
    settings = SolverSettings.from_dict(cfg.get("solver"))

    def emit(stage, name, writer):
        path = writer(out / name)
        manifest["files"][stage] = {"path": name, "sha256": io.file_hash(path)}

    stage = "config"
    try:
        inst = io.build_instance(cfg)
        io.write_json(out / "problem.json", cfg)

        stage = "forward"
        fs = forward_stage(inst, cfg.get("synthesis", {}), settings)
        sol = io.solution_to_dict(fs)
        emit(stage, "solution.json", lambda p: io.write_json(p, sol))
        result.artifacts["solution"] = fs
        if check:
            rep = verify_response(fs.phi, build_block_operators(fs.system))
            _require(checks, stage, "system-response identities", rep.passed,
                     f"residuals {rep.affine_rows:.2e}, {rep.affine_cols:.2e}")
            audit = robustness_audit(inst, fs, seed=seed)
            _require(checks, stage, "robust rollouts", audit["violations"] == 0,
                     f"{audit['violations']} of {audit['rollouts']} rollouts violate a constraint")

        stage = "demos"
        dc = cfg.get("demos", {})
        ds = demos_stage(inst, fs, dc, seed)
        emit(stage, "demos.json", lambda p: io.write_json(p, io.demos_to_dict(ds, io.content_hash(sol))))
        result.artifacts["demos"] = ds

        stage = "recover"
        pol = recover_policy(ds.demos, inst.system)
        emit(stage, "policy.json", lambda p: io.write_json(p, io.policy_to_dict(pol)))
        result.artifacts["policy"] = pol
        if check and not ds.corrupted:
            _require(checks, stage, "rich data", pol.diagnostics["rich"],
                     f"rank {pol.diagnostics['rank']} of {pol.diagnostics['required_rank']}")
            eK = np.linalg.norm(pol.K.K - fs.K.K) / (1 + np.linalg.norm(fs.K.K))
            ez = max(np.max(np.abs(pol.z - fs.z)), np.max(np.abs(pol.v - fs.v)))
            tol = 1e-6 if isinstance(inst.system, LtvSystem) else 1e-3
            _require(checks, stage, "exact recovery", eK <= 1e-6 and ez <= tol,
                     f"gain error {eK:.2e}, nominal error {ez:.2e}")

        if "infer" in stages or "classify" in stages:
            stage = "infer"
            ic = cfg.get("infer", {})
            kp, w, res = infer_stage(inst, pol, ic, settings)
            extra = {}
            if inst.theta_star is not None:
                member = infer_theta(kp, theta_fixed=inst.theta_star, settings=settings)
                extra["theta_star_member"] = member.status
                if check:
                    _require(checks, stage, "true parameter is KKT-compatible", member.feasible,
                             f"status {member.status.value}")
            emit(stage, "witness.json", lambda p: io.write_json(p, io.witness_to_dict(w, res, extra)))
            result.artifacts["witness"] = w
            if check:
                _require(checks, stage, "witness found", w.feasible, f"status {w.status.value}")
                worst = max(res.values()) if res else np.inf
                _require(checks, stage, "witness replays", worst <= 1e-6 or kp.relaxed,
                         f"largest residual {worst:.2e}")

        if "classify" in stages:
            stage = "classify"
            grid = grid_from_config(cfg.get("classify", {"window": [-1, 1, -1, 1]}))
            ranges = offset_ranges(kp, inst.unknown.obstacles, settings) if not kp.infeasible_reason else None
            gc = classify_grid(kp, inst.unknown.obstacles, grid, settings, jobs=jobs, ranges=ranges)
            emit(stage, "grid.csv", lambda p: io.write_csv(p, GRID_COLUMNS, gc.rows()))
            summary = {"safe": gc.count(SAFE), "unsafe": gc.count(UNSAFE),
                       "unknown": gc.count("Unknown"), "milps": gc.milps,
                       "flags": {f"{i},{j}": list(f) for (i, j), f in sorted(gc.flags.items())},
                       "offset_lower": None if ranges is None else ranges.lower,
                       "offset_upper": None if ranges is None else ranges.upper}
            emit("classify-summary", "classification.json", lambda p: io.write_json(p, summary))
            result.artifacts["grid"] = gc
            if check and inst.theta_star is not None:
                bad = grid_errors(inst, gc)
                _require(checks, stage, "verdicts agree with the true obstacle", bad == 0,
                         f"{bad} contradicting cells")

        if "sweep" in stages:
            stage = "sweep"
            sc = cfg.get("sweep", {})
            clean = ds if not ds.corrupted else generate_demoset(
                fs.z, fs.v, fs.K, inst.system, inst.noise, len(ds), ds.strategy, seed)
            comps = touched_components(inst, fs.assignment, fs.lam_unknown)
            rows = run_noise_sweep(inst, clean, fs.K, fs.z, fs.v, sc.get("epsilons", [0.0]),
                                   int(sc.get("trials", 20)), seed=seed, components=comps,
                                   settings=settings, with_theta=bool(sc.get("theta", True)))
            emit(stage, "sweep.csv", lambda p: io.write_csv(p, SWEEP_COLUMNS, rows))
            result.artifacts["sweep"] = rows
            if check:
                bad = [r for r in rows if r["epsilon"] > 0 and not (
                    r["err_K"] <= r["bound_K"] and np.hypot(r["err_z"], r["err_v"]) <= r["bound_zv"])]
                _require(checks, stage, "sensitivity bounds", not bad, f"{len(bad)} trials exceed a bound")
    except StageError:
        manifest["failed_stage"] = stage
        io.write_json(out / "manifest.json", manifest)
        raise
    except Exception as exc:
        manifest["failed_stage"] = stage
        io.write_json(out / "manifest.json", manifest)
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    manifest["checks"] = [c.__dict__ for c in checks]
    io.write_json(out / "manifest.json", manifest)
    return result
