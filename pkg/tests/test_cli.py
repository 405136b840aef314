import json
from types import SimpleNamespace

import numpy as np
import pytest

import cli
from cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from crowdsim.scenario import load_scenario
from experiments.cases import MEMORIES, grid_spec
from ppum.gridmap import uniform_grid
from ppum.memory import LayerKind, MemoryLayer


def _simulate(out, seed=7):
    return main(["simulate", "--scenario", "case1_corridor", "--seed", str(seed), "--duration", "5", "--out", str(out)])


def test_simulate_is_reproducible(tmp_path):
    assert _simulate(tmp_path / "a") == EXIT_OK
    assert _simulate(tmp_path / "b") == EXIT_OK
    name = "case1_corridor_seed7"
    a = (tmp_path / "a" / f"{name}_trajectory.csv").read_text()
    assert a == (tmp_path / "b" / f"{name}_trajectory.csv").read_text()
    assert (tmp_path / "a" / f"{name}_truth.safetensors").exists()
    assert (tmp_path / "a" / f"{name}_truth.pgm").exists()


def test_simulate_reports_scenario_activations(tmp_path, capsys):
    code = main(["simulate", "--scenario", "case3_corridor", "--seed", "2", "--duration", "5", "--out", str(tmp_path)])
    assert code == EXIT_OK
    events = (tmp_path / "case3_corridor_seed2_events.txt").read_text().splitlines()
    assert events == ["attractor 0 activated at t=0.0s"]
    assert "attractor 0 activated at t=0.0s" in capsys.readouterr().out


def test_simulate_schedules_random_activations(tmp_path):
    # the activation length exceeds the run, so every window opens at t=0
    args = ["simulate", "--scenario", "case3_corridor", "--seed", "2", "--duration", "5", "--out", str(tmp_path)]
    assert main(args + ["--activations", "3"]) == EXIT_OK
    events = (tmp_path / "case3_corridor_seed2_events.txt").read_text().splitlines()
    assert events == ["attractor 0 activated at t=0.0s"] * 3

    assert main(args + ["--activations", "0"]) == EXIT_OK
    assert (tmp_path / "case3_corridor_seed2_events.txt").read_text() == ""


def test_schema_error_exit_code(tmp_path, capsys):
    scenario = {
        "name": "broken",
        "map_size": 20.0,
        "gates": [{"name": "west", "position": [0.0, 10.0]}],
        "flows": [{"name": "lost", "entry": "west", "exit": "east", "period": 10.0}],
        "robot": {"start": [1.0, 10.0], "goal": [19.0, 10.0]},
    }
    path = tmp_path / "broken.json"
    path.write_text(json.dumps(scenario, indent=2))
    assert main(["simulate", "--scenario", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "unknown gate 'east' in flow 'lost'" in err
    assert "broken.json:" in err


def test_runtime_error_exit_code(tmp_path):
    code = main(["evaluate", "--scenario", "case1_corridor", "--truth", str(tmp_path / "missing.safetensors"), "--out", str(tmp_path)])
    assert code == EXIT_RUNTIME


def test_plan_and_evaluate_on_saved_grid(tmp_path, capsys):
    assert _simulate(tmp_path) == EXIT_OK
    truth = str(tmp_path / "case1_corridor_seed7_truth.safetensors")
    code = main(["plan", "--scenario", "case1_corridor", "--seed", "7", "--grid", truth, "--method", "A*", "CG1", "--out", str(tmp_path)])
    assert code == EXIT_OK
    path_file = tmp_path / "case1_corridor_seed7_Astar_path.json"
    payload = json.loads(path_file.read_text())
    assert payload["valid_path"][0] == [1.0, 10.0]
    assert (tmp_path / "case1_corridor_seed7_CG1_path.json").exists()

    capsys.readouterr()
    code = main(
        ["evaluate", "--scenario", "case1_corridor", "--truth", truth, "--grid", truth, "--path", str(path_file), "--agents", "10", "--out", str(tmp_path)]
    )
    assert code == EXIT_OK
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert result["rmse"] == 0.0
    assert result["travel_time"] > 0.0


@pytest.mark.slow
def test_fuse_writes_layers(tmp_path):
    code = main(["fuse", "--scenario", "case1_corridor", "--time", "60", "--out", str(tmp_path)])
    assert code == EXIT_OK
    for memory in ("OLM", "PUM", "PPUM"):
        assert (tmp_path / f"case1_corridor_seed7_{memory}.safetensors").exists()
    assert (tmp_path / "case1_corridor_olm.json").exists()


@pytest.mark.slow
def test_reproduce_case1_report(tmp_path):
    code = main(["reproduce", "--case", "1", "--reps", "2", "--seed", "3", "--out", str(tmp_path)])
    assert code == EXIT_OK
    report = json.loads((tmp_path / "case1_report.json").read_text())
    assert set(report["variants"]) == {"case1_corridor", "case1_corridor_transient"}
    assert len(report["seeds"]) == 2
    assert report["fingerprints"]["case1_corridor"]


@pytest.mark.parametrize("flags, expected", [([], "PPUM"), (["--memory", "OLM"], "OLM")])
def test_plan_defaults_to_fused_memory(tmp_path, monkeypatch, flags, expected):
    config = load_scenario("case1_corridor")
    spec = grid_spec(config)
    layers = {name: MemoryLayer(uniform_grid(spec), np.ones((spec.resolution,) * 2, dtype=bool), LayerKind.FM) for name in MEMORIES}
    used = {}

    def fake_plan(start, goal, fm, obstacles, params, rng_seed=None):
        used["grid"] = fm.grid
        return SimpleNamespace(reached=True)

    monkeypatch.setattr(cli, "_olm_model", lambda config, args: None)
    monkeypatch.setattr(cli, "memory_at", lambda config, olm, t, seed: (None, layers))
    monkeypatch.setattr(cli, "plan", fake_plan)
    monkeypatch.setattr(cli, "path_to_json", lambda result, out: out)
    code = main(["plan", "--scenario", "case1_corridor", "--method", "RHO", "--out", str(tmp_path), *flags])
    assert code == EXIT_OK
    assert used["grid"] is layers[expected].grid
