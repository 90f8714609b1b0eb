import pytest

from forge import io
from forge.pipeline import StageError, run_experiment


def test_run_writes_artifacts_and_manifest(small_cfg, tmp_path):
    small_cfg["stages"] = ["forward", "demos", "recover", "infer", "classify", "sweep"]
    res = run_experiment(small_cfg, tmp_path, check=True)
    man = io.read_json(tmp_path / "manifest.json")
    assert man["failed_stage"] is None and man["seed"] == small_cfg["seed"]
    assert all(c["passed"] for c in man["checks"])
    for stage, entry in man["files"].items():
        assert io.file_hash(tmp_path / entry["path"]) == entry["sha256"], stage
    grid = io.read_csv(tmp_path / "grid.csv")
    assert len(grid) == 16 and set(grid[0]) == {"cell_i", "cell_j", "verdict"}
    assert len(io.read_csv(tmp_path / "sweep.csv")) == 4
    assert res.artifacts["witness"].feasible


def test_reruns_are_byte_identical(small_cfg, tmp_path):
    small_cfg["stages"] = ["forward", "demos", "recover", "infer"]
    a = run_experiment(small_cfg, tmp_path / "a").manifest["files"]
    b = run_experiment(small_cfg, tmp_path / "b").manifest["files"]
    assert a == b
    c = run_experiment(small_cfg, tmp_path / "c", seed=99).manifest["files"]
    assert c["demos"]["sha256"] != a["demos"]["sha256"]


def test_failure_names_the_stage(small_cfg, tmp_path):
    # the final position is unreachable under the input box
    small_cfg["known"].append({"type": "state_box", "indices": [0], "lower": 100.0, "upper": 200.0,
                               "timesteps": [4]})
    with pytest.raises(StageError) as err:
        run_experiment(small_cfg, tmp_path)
    assert err.value.stage == "forward"
    assert io.read_json(tmp_path / "manifest.json")["failed_stage"] == "forward"
