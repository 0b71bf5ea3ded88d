import json
import shutil

import numpy as np
import pytest

from chainwork.cli import main
from chainwork.io import read_trajectory

from conftest import scene_path


@pytest.fixture
def scene_file(tmp_path):
    def get(name):
        dst = tmp_path / f"{name}.json"
        shutil.copy(scene_path(name), dst)
        return str(dst)
    return get


def test_simulate_csv(tmp_path, scene_file):
    out = tmp_path / "o"
    assert main(["simulate", "--scene", scene_file("freefall"), "--out", str(out), "--steps", "20", "--every", "5"]) == 0
    t = read_trajectory(out / "trajectory.csv")
    assert t.steps.tolist() == [0, 5, 10, 15, 20] and t.n_particles == 256
    s = json.loads((out / "summary.json").read_text())
    assert s["command"] == "simulate" and s["steps"] == 20 and s["config"]["config"]["steps"] == 20
    assert s["momentum_drift_rel"] <= 1e-12 and len(s["momentum_history"]) == 21
    assert {"version", "backend", "threads", "precision", "warnings", "total_mass"} <= set(s)


def test_simulate_binary_f32(tmp_path, scene_file):
    out = tmp_path / "o"
    assert main(["simulate", "--scene", scene_file("freefall"), "--out", str(out), "--steps", "3",
                 "--format", "bin", "--precision", "f32"]) == 0
    t = read_trajectory(out / "trajectory.bin")
    assert t.x.dtype == np.float32 and t.n_frames == 4


def test_gradcheck(tmp_path, scene_file):
    out = tmp_path / "o"
    assert main(["gradcheck", "--scene", scene_file("freefall"), "--out", str(out), "--steps", "5",
                 "--coords", "3", "--h", "1e-4"]) == 0
    rep = json.loads((out / "gradcheck.json").read_text())
    assert rep["n_checked"] == 3 and rep["parameters"] == "initial_velocity"
    assert (out / "gradients.csv").exists() and (out / "gradient_summary.json").exists()
    assert main(["gradcheck", "--scene", scene_file("freefall"), "--out", str(out), "--precision", "f32"]) == 2


def test_optimize(tmp_path, scene_file):
    out = tmp_path / "o"
    assert main(["optimize", "--scene", scene_file("finger"), "--out", str(out), "--steps", "30",
                 "--iterations", "2", "--lr", "0.05"]) == 0
    rows = (out / "history.csv").read_text().splitlines()
    assert rows[0] == "iteration,loss,grad_norm,wall_time,status" and len(rows) == 4
    params = json.loads((out / "best_params.json").read_text())["params"]
    assert set(params) == {"W", "b"}
    assert json.loads((out / "summary.json").read_text())["optimizer"]["learning_rate"] == 0.05


def test_identify_and_codesign(tmp_path, scene_file):
    out = tmp_path / "i"
    assert main(["identify", "--scene", scene_file("billiards"), "--out", str(out), "--steps", "20",
                 "--groups", "1", "--true-scales", "1.0", "--iterations", "1"]) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["groups"] == [1] and len(s["scales"]) == 1
    out = tmp_path / "c"
    assert main(["codesign", "--scene", scene_file("arm"), "--out", str(out), "--steps", "20",
                 "--iterations", "1"]) == 0
    m = json.loads((out / "summary.json").read_text())["metrics"]
    assert set(m) == {"codesign", "fixed"} and "violation" in m["codesign"]
    assert (out / "best_params_codesign.json").exists()


def test_render_from_scene_and_traj(tmp_path, scene_file):
    out = tmp_path / "r"
    assert main(["render", "--scene", scene_file("freefall"), "--out", str(out), "--steps", "4", "--every", "2",
                 "--size", "32", "32"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["frame_000000.ppm", "frame_000002.ppm", "frame_000004.ppm"]
    bad = tmp_path / "bad.csv"
    bad.write_text("nope\n")
    assert main(["render", "--traj", str(bad), "--out", str(out)]) == 1
    assert main(["render", "--traj", str(tmp_path / "missing.csv"), "--out", str(out)]) == 2


def test_bench_command(tmp_path, monkeypatch):
    import chainwork.bench as bench

    monkeypatch.setattr(bench, "run_bench", lambda **kw: {
        "particles": 1, "threads": 1, "precision": "f32", "forward_ms_per_step": 1.0,
        "forward_particle_steps_per_s": 1.0, "backward_ms_per_step": 2.0, "backward_forward_ratio": 2.0,
        "checks": {"backward_ratio": {"value": 2.0, "limit": 3.0, "pass": True}}})
    assert main(["bench", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "bench.json").read_text())["backward_forward_ratio"] == 2.0


@pytest.mark.parametrize("argv,code", [
    (["simulate", "--scene", "nope.json"], 2),
    (["simulate"], 2),
    (["frobnicate"], 2),
    (["simulate", "--scene", "{scene}", "--dt", "-1"], 2),
    (["simulate", "--scene", "{scene}", "--threads", "0"], 2),
    (["gradcheck", "--scene", "{scene}", "--params", "controller"], 2),
    (["simulate", "--scene", "{scene}", "--steps", "3000"], 1),
])
def test_exit_codes(tmp_path, scene_file, argv, code, capsys):
    argv = [a.replace("{scene}", scene_file("freefall")) for a in argv] + ["--out", str(tmp_path / "o")] \
        if argv[0] in ("simulate", "gradcheck") and len(argv) > 1 else argv
    assert main(argv) == code
    if code:
        assert capsys.readouterr().err


def test_malformed_scene(tmp_path):
    p = tmp_path / "s.json"
    p.write_text('{"shapes": [}')
    assert main(["simulate", "--scene", str(p), "--out", str(tmp_path)]) == 2


def test_version(capsys):
    assert main(["--version"]) == 0
    assert "chainwork" in capsys.readouterr().out


def test_packaged_scene_name(tmp_path):
    out = tmp_path / "o"
    assert main(["simulate", "--scene", "freefall", "--out", str(out), "--steps", "3"]) == 0
    assert read_trajectory(out / "trajectory.csv").n_particles == 256
    assert main(["simulate", "--scene", "no_such_scene", "--out", str(out)]) == 2
