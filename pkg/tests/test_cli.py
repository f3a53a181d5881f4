import json

import pytest

from database import read_csv, read_json
from main import build_parser, main

SMALL = {
    "discretization": {"K": 12},
    "continuation": {"scan_points": 256},
    "particle": {"N": 64, "steps": 20, "init": "constant", "min_dwell": 5},
    "stability": {"nus": [0.0, 5.0]},
    "ift": {"nu": 10.0, "samples": 3},
}


def _config(tmp_path, payload=SMALL):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return str(path)


def test_command_is_required():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_unknown_key_exits_with_code_two(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["trace", "--config", _config(tmp_path, {"model": {"nope": 1}}), "--out", str(out)])
    assert code == 2
    error = read_json(str(out / "error.json"))
    assert error["error"] == "ConfigError"
    assert error["key"] == "model.nope"
    assert error["meta"]["config_hash"] is None
    assert "model.nope" in capsys.readouterr().err


def test_invalid_model_exits_with_code_two(tmp_path):
    out = tmp_path / "out"
    assert main(["stability", "--config", _config(tmp_path, {"model": {"A": [[1, 0], [0, 1]]}}), "--out", str(out)]) == 2
    error = read_json(str(out / "error.json"))
    assert error["error"] == "NonHyperbolic"
    assert error["meta"]["config_hash"] == read_json(str(out / "run_config.json"))["meta"]["config_hash"]


def test_simulate_is_reproducible(tmp_path):
    config = _config(tmp_path)
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["simulate", "--config", config, "--out", str(first), "--seed", "3", "-q"]) == 0
    assert main(["simulate", "--config", config, "--out", str(second), "--seed", "3", "--threads", "2", "-q"]) == 0
    assert (first / "trajectory_constant.csv").read_text() == (second / "trajectory_constant.csv").read_text()
    summary = read_json(str(first / "simulate.json"))
    assert summary["runs"]["constant"]["steps"] == 20
    assert read_json(str(first / "run_config.json"))["config"]["seed"] == 3


def test_stability_writes_a_report_per_fixed_point(tmp_path):
    out = tmp_path / "out"
    assert main(["stability", "--config", _config(tmp_path), "--out", str(out), "-q"]) == 0
    frame = read_csv(str(out / "stability.csv"))
    assert set(frame["nu"]) == {0.0, 5.0}
    assert set(frame["classification"]) <= {"physical", "unstable", "marginal"}
    assert len(read_json(str(out / "stability.json"))["reports"]) == len(frame)


def test_ift_certify(tmp_path):
    out = tmp_path / "out"
    assert main(["ift-certify", "--config", _config(tmp_path), "--out", str(out), "-q"]) == 0
    certificate = read_json(str(out / "certificate.json"))
    assert certificate["certificate"]["contraction"] <= 0.5
    assert certificate["corrector"]["contraction"] <= 0.5
    assert certificate["meta"]["config_hash"]


def test_trace_without_coupling_strength(tmp_path):
    payload = {
        "model": {"mu": 0.0},
        "discretization": {"K": 12},
        "continuation": {"nu_max": 2.0, "classify": False, "oracle_nus": [1.0]},
    }
    out = tmp_path / "out"
    assert main(["trace", "--config", _config(tmp_path, payload), "--out", str(out), "-q"]) == 0
    branch = read_csv(str(out / "branch.csv"))
    assert branch["omega"].to_numpy() == pytest.approx(1.0)
    assert branch["nu"].iloc[-1] == 2.0
    assert len(read_csv(str(out / "folds.csv"))) == 0
    summary = read_json(str(out / "branch.json"))
    assert summary["folds"] == []
    assert summary["solution_counts"] == {"1": {"solutions": 1, "physical": 1}}


def test_defaults_file_is_written_and_read(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "out"
    assert main(["trace", "--config", _config(tmp_path, {"model": {"nope": 1}}), "--out", str(out)]) == 2
    defaults = json.loads((tmp_path / "default_config.json").read_text())
    assert defaults["seed"] == 0

    (tmp_path / "default_config.json").write_text(json.dumps({"particle": {"N": 32}}))
    assert main(["simulate", "--config", _config(tmp_path), "--out", str(out), "-q"]) == 0
    assert read_json(str(out / "run_config.json"))["config"]["particle"]["N"] == 64

    assert read_json(str(out / "run_config.json"))["config"]["particle"]["record_every"] == 1

    (tmp_path / "default_config.json").write_text(json.dumps({"particle": {"record_every": 2}}))
    assert main(["simulate", "--config", _config(tmp_path), "--out", str(out), "-q"]) == 0
    assert len(read_csv(str(out / "trajectory_constant.csv"))) == 10


def test_simulate_without_stable_state_starts_from_constant(tmp_path):
    payload = {**SMALL, "particle": {"N": 64, "steps": 20, "init": "basins", "min_dwell": 5, "nu": 150.0}}
    out = tmp_path / "out"
    assert main(["simulate", "--config", _config(tmp_path, payload), "--out", str(out), "-q"]) == 0
    summary = read_json(str(out / "simulate.json"))
    assert summary["stable_omegas"] == []
    assert summary["init"] == "constant"
    assert list(summary["runs"]) == ["constant"]
    assert (out / "trajectory_constant.csv").exists()
