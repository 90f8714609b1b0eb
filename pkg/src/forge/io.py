"""JSON problem configs and run artifacts.

A problem config looks like::

    {"spec_version": 1,
     "system": {"model": "double_integrator", "T": 6, "dt": 0.5, "x0": [0, 0, 0, 0], "output": "state"},
     "noise": {"w_radius": 0.05, "e_radius": 0.02},
     "cost": {"kind": "J1"},
     "known": [{"type": "input_box", "lower": -2, "upper": 2}],
     "unknown": {"param_lower": [...], "param_upper": [...],
                 "obstacles": [{"type": "box", "theta_indices": [0, 1, 2, 3]}]},
     "theta_star": [1, 2, -1, 0.3]}

Run presets add ``seed``, ``solver``, ``synthesis``, ``demos``, ``infer``,
``classify`` and ``sweep`` sections.  Matrices are row-major nested lists.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .demos import DemoSet, Demonstration
from .dynamics import double_integrator, pd_gain, quadcopter_hover, unicycle
from .forward import ForwardSolution
from .problem import (
    CostSpec,
    KnownConstraints,
    LtvSystem,
    NoiseModel,
    Obstacle,
    ParametricConstraintFamily,
    ProblemInstance,
    box_obstacle,
    input_box,
    state_box,
)
from .sls import FeedbackGain, SystemResponse

SPEC_VERSION = 1
PRESETS = ("fig2-sls", "fig3-fixed-gain", "fig4-sweep")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# plain JSON helpers


def _clean(obj):
    """Arrays to lists, numpy scalars to Python, NaN/inf to ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def content_hash(obj) -> str:
    return hashlib.sha256(dumps(obj).encode()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            vals = [r[c] for c in columns] if isinstance(r, dict) else list(r)
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in vals])
    return path


def _cell(text: str):
    try:
        v = float(text)
    except ValueError:
        return text
    return int(v) if text.lstrip("-").isdigit() else v


def read_csv(path) -> list[dict]:
    """Rows as dicts, numeric cells parsed back to ``int`` / ``float``."""
    with open(path, newline="") as fh:
        return [{k: _cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# configs


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return Path(str(resources.files("forge") / "presets" / f"{name}.json"))


def load_config(source) -> dict:
    """A config dict from a dict, a JSON path or a preset name."""
    if isinstance(source, dict):
        cfg = json.loads(json.dumps(source))
    else:
        p = Path(source)
        if not p.exists() and str(source) in PRESETS:
            p = preset_path(str(source))
        if not p.exists():
            raise ConfigError(f"config file {source} does not exist")
        cfg = read_json(p)
    version = cfg.get("spec_version", SPEC_VERSION)
    if version != SPEC_VERSION:
        raise ConfigError(f"unsupported spec_version {version}")
    for key in ("system", "noise", "cost", "unknown"):
        if key not in cfg:
            raise ConfigError(f"config lacks the {key!r} section")
    return cfg


def _mats(value, T: int, name: str) -> list[np.ndarray]:
    arr = np.asarray(value, float)
    if arr.ndim == 2:
        return [arr] * T
    if arr.ndim == 3 and arr.shape[0] == T:
        return list(arr)
    raise ConfigError(f"{name} must be one matrix or a list of {T} matrices")


def build_system(sc: dict):
    model = sc.get("model", "double_integrator")
    T = int(sc["T"])
    dt = float(sc.get("dt", 0.1))
    output = sc.get("output", "state")
    if model == "double_integrator":
        return double_integrator(T, dt, sc.get("x0", (0.0,) * 4), output)
    if model == "unicycle":
        return unicycle(T, dt, sc.get("x0", (0.0,) * 4), output)
    if model == "quadcopter_hover":
        return quadcopter_hover(T, dt, sc.get("x0"), output, **sc.get("params", {}))
    if model == "ltv":
        A = _mats(sc["A"], T, "A")
        B = _mats(sc["B"], T, "B")
        C = _mats(sc["C"], T + 1, "C")
        drift = None if sc.get("drift") is None else [np.asarray(c, float) for c in sc["drift"]]
        return LtvSystem(A, B, C, np.asarray(sc["x0"], float), drift)
    raise ConfigError(f"unknown system model {model!r}")


def build_cost(cc: dict, layout) -> CostSpec:
    kind = cc.get("kind", "J1")
    pos = tuple(cc.get("position_indices", (0, 1)))
    weight = float(cc.get("input_weight", 1e-3))
    goal = None if cc.get("goal") is None else np.asarray(cc["goal"], float)
    Q = q = None
    if kind == "track":
        # weight * sum_t ||p_t - r_t||^2 over the listed timesteps
        N = layout.N
        Q = np.zeros((N, N))
        q = np.zeros(N)
        w = float(cc.get("weight", 1.0))
        for t, ref in cc["refs"].items():
            S = np.zeros((len(pos), N))
            S[np.arange(len(pos)), layout.x(int(t)).start + np.array(pos)] = 1.0
            Q += 2.0 * w * S.T @ S
            q -= 2.0 * w * S.T @ np.asarray(ref, float)
        kind = "custom"
    elif kind == "custom":
        Q = None if cc.get("Q") is None else np.asarray(cc["Q"], float)
        q = None if cc.get("q") is None else np.asarray(cc["q"], float)
    return CostSpec(kind, pos, goal, Q, q, weight)


def build_known(entries, layout) -> KnownConstraints:
    known = KnownConstraints.empty(layout.N)
    for e in entries or []:
        typ = e.get("type")
        ts = e.get("timesteps")
        if typ == "input_box":
            known = known + input_box(layout, e["lower"], e["upper"], ts)
        elif typ == "state_box":
            known = known + state_box(layout, e["indices"], e["lower"], e["upper"], ts)
        elif typ == "halfspace":
            known = known + KnownConstraints(np.atleast_2d(np.asarray(e["A"], float)),
                                             np.ravel(np.asarray(e["b"], float)))
        else:
            raise ConfigError(f"unknown known-constraint type {typ!r}")
    return known


def build_unknown(uc: dict) -> ParametricConstraintFamily:
    lo = np.asarray(uc["param_lower"], float)
    hi = np.asarray(uc["param_upper"], float)
    d = lo.size
    obstacles = []
    for o in uc.get("obstacles", []):
        ts = o.get("timesteps")
        if o.get("type", "box") == "box":
            obstacles.append(box_obstacle(d, tuple(o.get("theta_indices", (0, 1, 2, 3))), ts))
        elif o["type"] == "polytope":
            obstacles.append(Obstacle(np.asarray(o["normals"], float), np.asarray(o["offset0"], float),
                                      np.asarray(o["theta_map"], float), ts))
        else:
            raise ConfigError(f"unknown obstacle type {o['type']!r}")
    return ParametricConstraintFamily(d, lo, hi, tuple(obstacles),
                                      tuple(uc.get("position_indices", (0, 1))))


def build_instance(cfg: dict) -> ProblemInstance:
    system = build_system(cfg["system"])
    lay = system.layout
    nc = cfg["noise"]
    theta = cfg.get("theta_star")
    return ProblemInstance(
        system=system,
        noise=NoiseModel(float(nc.get("w_radius", 0.0)), float(nc.get("e_radius", 0.0))),
        cost=build_cost(cfg["cost"], lay),
        known=build_known(cfg.get("known"), lay),
        unknown=build_unknown(cfg["unknown"]),
        theta_star=None if theta is None else np.asarray(theta, float),
        name=cfg.get("name", "problem"),
        solver=dict(cfg.get("solver", {})),
    )


def build_gain(gc: dict | None, system) -> FeedbackGain | None:
    """Gain from ``{"type": "pd", "kp":, "kd":}``, ``{"K": [[...]]}`` or ``None``."""
    if gc is None:
        return None
    n_i = system.layout.n_i
    n_o = system.C_blocks[0].shape[0]
    if gc.get("type") == "pd":
        output = "state" if n_o == system.n else "position"
        return FeedbackGain(pd_gain(system.T, float(gc["kp"]), float(gc["kd"]), output), n_i, n_o)
    if "K" in gc:
        return FeedbackGain(np.asarray(gc["K"], float), int(gc.get("n_i", n_i)), int(gc.get("n_o", n_o)))
    raise ConfigError("gain needs either type 'pd' or a matrix 'K'")


# ---------------------------------------------------------------------------
# artifacts


def phi_to_dict(phi: SystemResponse) -> dict:
    return {"n": phi.n, "n_i": phi.n_i, "n_o": phi.n_o, **phi.blocks()}


def phi_from_dict(d: dict) -> SystemResponse:
    return SystemResponse(*(np.asarray(d[k], float) for k in ("phi_xw", "phi_xe", "phi_uw", "phi_ue")),
                          int(d["n"]), int(d["n_i"]), int(d["n_o"]))


def gain_to_dict(K: FeedbackGain) -> dict:
    return {"K": K.K, "n_i": K.n_i, "n_o": K.n_o}


def solution_to_dict(fs: ForwardSolution) -> dict:
    return {
        "z": fs.z, "v": fs.v, "K": gain_to_dict(fs.K), "phi": phi_to_dict(fs.phi),
        "assignment": [list(a) for a in fs.assignment], "objective": fs.objective, "mode": fs.mode,
        "lam_known": fs.lam_known, "lam_unknown": fs.lam_unknown,
        "margins_known": fs.margins_known, "margins_unknown": fs.margins_unknown,
    }


def demos_to_dict(ds: DemoSet, solution_hash: str | None = None) -> dict:
    return {
        "demos": [{"u": d.u, "y": d.y} for d in ds.demos],
        "seed": ds.rng_seed, "strategy": ds.strategy, "epsilon": ds.epsilon,
        "corrupted": ds.corrupted, "solution_hash": solution_hash,
    }


def demos_from_dict(d: dict) -> DemoSet:
    demos = tuple(Demonstration(np.asarray(x["u"], float), np.asarray(x["y"], float)) for x in d["demos"])
    return DemoSet(demos, corrupted=bool(d.get("corrupted", False)), epsilon=float(d.get("epsilon", 0.0)),
                   rng_seed=d.get("seed"), strategy=d.get("strategy", "uniform"),
                   meta={"solution_hash": d.get("solution_hash")})


def policy_to_dict(pol) -> dict:
    return {"K": gain_to_dict(pol.K), "z": pol.z, "v": pol.v, "phi": phi_to_dict(pol.phi),
            "diagnostics": pol.diagnostics}


def witness_to_dict(w, residuals: dict | None = None, extra: dict | None = None) -> dict:
    out = {"status": w.status, "theta": w.theta, "lambda_known": w.lam_known,
           "lambda_unknown": w.lam_unknown, "nu": w.nu, "stationarity_slack": w.stationarity_slack,
           "audit": w.audit}
    if residuals is not None:
        out["replay_residuals"] = residuals
    if extra:
        out.update(extra)
    return out
