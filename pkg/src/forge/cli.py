"""Command-line entry point: ``forge <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io, pipeline
from .demos import generate_demoset, perturb
from .forward import ForwardInfeasible
from .inverse.classify import classify_grid, offset_ranges
from .inverse.kkt import build_kkt_program
from .inverse.recovery import recover_policy
from .inverse.sensitivity import SWEEP_COLUMNS, run_noise_sweep, touched_components
from .opt import SolverSettings
from .problem import build_block_operators
from .sls import FeedbackGain, phi_from_k

log = logging.getLogger("forge")


def _floats(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s.strip()]


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="problem/run config JSON or a preset name")
    common.add_argument("--seed", type=int, default=None, help="root RNG seed (overrides the config)")
    common.add_argument("--out-dir", default=".", help="directory for artifacts")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for grid classification")
    common.add_argument("--check", action="store_true", help="run the stage self-checks and fail loudly")

    p = argparse.ArgumentParser(prog="forge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forward", parents=[common], help="robust forward synthesis")
    f.add_argument("--mode", choices=["joint", "fixed-phi"], default=None)
    f.add_argument("--gain", help="gain JSON ({'K': ..} or {'type': 'pd', ..})")
    f.add_argument("--out", default="solution.json")

    d = sub.add_parser("demos", parents=[common], help="closed-loop demonstrations")
    d.add_argument("--solution", default="solution.json")
    d.add_argument("--count", type=int, default=None)
    d.add_argument("--epsilon", type=float, default=None)
    d.add_argument("--strategy", choices=["uniform", "vertex"], default=None)
    d.add_argument("--out", default="demos.json")

    r = sub.add_parser("recover", parents=[common], help="recover gain and nominal")
    r.add_argument("--demos", default="demos.json")
    r.add_argument("--out", default="policy.json")

    i = sub.add_parser("infer", parents=[common], help="KKT parameter inference")
    i.add_argument("--policy", default="policy.json")
    i.add_argument("--theta-fixed", type=_floats, default=None, help="comma-separated parameter values")
    i.add_argument("--relaxed", action="store_true")
    i.add_argument("--out", default="witness.json")

    c = sub.add_parser("classify", parents=[common], help="guaranteed safe/unsafe grid")
    c.add_argument("--policy", default="policy.json")
    c.add_argument("--grid", default=None, help="e.g. 50x50")
    c.add_argument("--window", type=_floats, default=None, help="x0,x1,y0,y1")
    c.add_argument("--out", default="grid.csv")

    s = sub.add_parser("sweep", parents=[common], help="transmission-error sweep")
    s.add_argument("--epsilons", type=_floats, default=None)
    s.add_argument("--trials", type=int, default=None)
    s.add_argument("--no-theta", action="store_true", help="skip the parameter-error column")
    s.add_argument("--out", default="sweep.csv")

    ru = sub.add_parser("run", parents=[common], help="all stages of a config or preset")
    ru.add_argument("--preset", choices=io.PRESETS, default=None)

    ph = sub.add_parser("phi", parents=[common], help="dump the system response of a gain")
    ph.add_argument("--gain", required=True)
    ph.add_argument("--out", default="phi.json")
    return p


def _path(args, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() or p.exists() else Path(args.out_dir) / p


def _config(args) -> dict:
    if not args.config:
        raise io.ConfigError("--config is required for this subcommand")
    return io.load_config(args.config)


def _seed(args, cfg: dict) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _settings(cfg: dict) -> SolverSettings:
    return SolverSettings.from_dict(cfg.get("solver"))


def _cmd_forward(args):
    cfg = _config(args)
    inst = io.build_instance(cfg)
    syn = dict(cfg.get("synthesis", {}))
    if args.mode:
        syn["mode"] = args.mode
    if args.gain:
        syn["gain"] = io.read_json(args.gain)
    fs = pipeline.forward_stage(inst, syn, _settings(cfg))
    if args.check:
        audit = pipeline.robustness_audit(inst, fs, seed=_seed(args, cfg))
        if audit["violations"]:
            raise pipeline.StageError("forward", f"{audit['violations']} rollouts violate a constraint")
    io.write_json(_path(args, args.out), io.solution_to_dict(fs))


def _gain_from_solution(sol: dict) -> FeedbackGain:
    k = sol["K"]
    return FeedbackGain(np.asarray(k["K"], float), int(k["n_i"]), int(k["n_o"]))


def _cmd_demos(args):
    cfg = _config(args)
    inst = io.build_instance(cfg)
    sol = io.read_json(_path(args, args.solution))
    dc = dict(cfg.get("demos", {}))
    seed = _seed(args, cfg)
    count = args.count if args.count is not None else int(dc.get("count", 100))
    strategy = args.strategy or dc.get("strategy", "uniform")
    eps = args.epsilon if args.epsilon is not None else float(dc.get("epsilon", 0.0))
    ds = generate_demoset(np.asarray(sol["z"]), np.asarray(sol["v"]), _gain_from_solution(sol),
                          inst.system, inst.noise, count, strategy, seed)
    if eps > 0:
        ds = perturb(ds, eps, seed)
    io.write_json(_path(args, args.out), io.demos_to_dict(ds, io.content_hash(sol)))


def _cmd_recover(args):
    cfg = _config(args)
    inst = io.build_instance(cfg)
    ds = io.demos_from_dict(io.read_json(_path(args, args.demos)))
    pol = recover_policy(ds.demos, inst.system)
    if args.check and not pol.diagnostics["rich"]:
        raise pipeline.StageError("recover", "demonstrations are not rich enough to identify the gain")
    io.write_json(_path(args, args.out), io.policy_to_dict(pol))


def _load_policy(args, inst):
    return pipeline.policy_from_dict(io.read_json(_path(args, args.policy)), inst.system)


def _cmd_infer(args):
    cfg = _config(args)
    inst = io.build_instance(cfg)
    pol = _load_policy(args, inst)
    ic = dict(cfg.get("infer", {}))
    if args.relaxed:
        ic["relaxed"] = True
    kp, w, res = pipeline.infer_stage(inst, pol, ic, _settings(cfg), theta_fixed=args.theta_fixed)
    if args.check and not w.feasible:
        raise pipeline.StageError("infer", f"no KKT-compatible parameter ({w.status.value})")
    io.write_json(_path(args, args.out), io.witness_to_dict(w, res))
    if not w.feasible:
        log.warning("inference status: %s", w.status.value)


def _cmd_classify(args):
    cfg = _config(args)
    inst = io.build_instance(cfg)
    pol = _load_policy(args, inst)
    settings = _settings(cfg)
    cc = dict(cfg.get("classify", {}))
    if args.grid:
        cc["grid"] = args.grid
    if args.window:
        cc["window"] = args.window
    if "window" not in cc:
        raise io.ConfigError("classification needs --window x0,x1,y0,y1")
    grid = pipeline.grid_from_config(cc)
    kp = build_kkt_program(pol, inst, M_lambda=float(cfg.get("infer", {}).get("M_lambda", 1e3)))
    ranges = None if kp.infeasible_reason else offset_ranges(kp, inst.unknown.obstacles, settings)
    gc = classify_grid(kp, inst.unknown.obstacles, grid, settings, jobs=args.jobs, ranges=ranges)
    if args.check and inst.theta_star is not None:
        bad = pipeline.grid_errors(inst, gc)
        if bad:
            raise pipeline.StageError("classify", f"{bad} cells contradict the true obstacle")
    io.write_csv(_path(args, args.out), pipeline.GRID_COLUMNS, gc.rows())


def _cmd_sweep(args):
    cfg = _config(args)
    inst = io.build_instance(cfg)
    settings = _settings(cfg)
    seed = _seed(args, cfg)
    sc = dict(cfg.get("sweep", {}))
    eps = args.epsilons if args.epsilons is not None else sc.get("epsilons", [0.0])
    trials = args.trials if args.trials is not None else int(sc.get("trials", 20))
    fs = pipeline.forward_stage(inst, cfg.get("synthesis", {}), settings)
    dc = cfg.get("demos", {})
    clean = generate_demoset(fs.z, fs.v, fs.K, inst.system, inst.noise, int(dc.get("count", 100)),
                             dc.get("strategy", "uniform"), seed)
    comps = touched_components(inst, fs.assignment, fs.lam_unknown)
    rows = run_noise_sweep(inst, clean, fs.K, fs.z, fs.v, eps, trials, seed=seed, components=comps,
                           settings=settings, with_theta=not args.no_theta)
    if args.check:
        bad = [r for r in rows if r["epsilon"] > 0 and not (
            r["err_K"] <= r["bound_K"] and np.hypot(r["err_z"], r["err_v"]) <= r["bound_zv"])]
        if bad:
            raise pipeline.StageError("sweep", f"{len(bad)} trials exceed a bound")
    io.write_csv(_path(args, args.out), SWEEP_COLUMNS, rows)


def _cmd_run(args):
    source = args.config or args.preset
    if source is None:
        raise io.ConfigError("run needs --config or --preset")
    cfg = io.load_config(source)
    res = pipeline.run_experiment(cfg, args.out_dir, seed=args.seed, jobs=args.jobs, check=args.check)
    for stage, entry in res.manifest["files"].items():
        print(f"{stage}: {Path(args.out_dir) / entry['path']}")


def _cmd_phi(args):
    cfg = _config(args)
    inst = io.build_instance(cfg)
    K = io.build_gain(io.read_json(args.gain), inst.system)
    phi = phi_from_k(K, build_block_operators(inst.system))
    io.write_json(_path(args, args.out), io.phi_to_dict(phi))


COMMANDS = {"forward": _cmd_forward, "demos": _cmd_demos, "recover": _cmd_recover, "infer": _cmd_infer,
            "classify": _cmd_classify, "sweep": _cmd_sweep, "run": _cmd_run, "phi": _cmd_phi}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FORGE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.command](args)
    except pipeline.StageError as exc:
        print(f"forge: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return 1
    except (io.ConfigError, ForwardInfeasible, FileNotFoundError, ValueError) as exc:
        print(f"forge {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
