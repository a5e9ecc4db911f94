import json
import sys
import os

import pandas as pd

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from app import main
from possync.errors import NumericalFailure

SMALL = {
    "duration": 6.0,
    "warmup": 50,
    "replications": 1,
    "modes": ["pos_clock-ekf-doa_toa", "pos_sync-ekf-doa_toa"],
    "fusion": {"init": "truth"},
}


def _write_config(tmp_path, data):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(data))
    return str(path)


def test_schema_command(capsys):
    # Test that the schema command prints the JSON schema
    assert main(["schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    assert "trajectory" in schema["properties"]


def test_validate_command(tmp_path, capsys):
    # Test that a valid config passes validation
    config = _write_config(tmp_path, SMALL)
    assert main(["--log-dir", str(tmp_path / "logs"), "validate", "--config", config]) == 0
    assert "is valid" in capsys.readouterr().out


def test_invalid_config_exit_code(tmp_path, capsys):
    # Test that a schema violation exits with code 2 and names the field
    config = _write_config(tmp_path, {"trajectory": {"kind": "boat"}})
    assert main(["--log-dir", str(tmp_path / "logs"), "validate", "--config", config]) == 2
    assert "trajectory.kind" in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path):
    # Test that a missing config file exits with code 2
    assert main(["--log-dir", str(tmp_path / "logs"), "validate", "--config", str(tmp_path / "none.json")]) == 2


def test_bad_mode_override_exit_code(tmp_path):
    # Test that an unknown --modes value is a configuration error
    config = _write_config(tmp_path, SMALL)
    args = ["--log-dir", str(tmp_path / "logs"), "run", "--config", config, "--out", str(tmp_path / "out"), "--modes", "fast"]
    assert main(args) == 2


def test_run_command(tmp_path, capsys):
    # Test that run writes the results directory and prints one line per mode
    config = _write_config(tmp_path, SMALL)
    out = tmp_path / "out"
    assert main(["--log-dir", str(tmp_path / "logs"), "run", "--config", config, "--out", str(out), "--seed", "4"]) == 0
    for name in ("epochs.csv", "summary.json", "config_echo.json", "metrics.prom"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["modes"]) == set(SMALL["modes"])
    echo = json.loads((out / "config_echo.json").read_text())
    assert echo["config"]["seed"] == 4
    printed = capsys.readouterr().out
    assert "INFO: pos_clock-ekf-doa_toa: rmse_3d=" in printed
    assert (tmp_path / "logs" / "possync.log").exists()


def test_truth_command(tmp_path):
    # Test that truth writes one CSV per replication
    config = _write_config(tmp_path, SMALL)
    out = tmp_path / "truth"
    args = ["--log-dir", str(tmp_path / "logs"), "truth", "--config", config, "--out", str(out), "--replications", "2"]
    assert main(args) == 0
    for r in range(2):
        frame = pd.read_csv(out / f"truth_rep{r:03d}.csv")
        assert len(frame) == 60 * 2
        assert {"x", "y", "z", "rho_un", "theta", "phi", "tau"} <= set(frame.columns)


def test_zero_n_jobs_is_a_config_error(tmp_path, capsys):
    # Test that n_jobs 0 is rejected in the file and on the command line with exit code 2
    config = _write_config(tmp_path, {**SMALL, "n_jobs": 0})
    assert main(["--log-dir", str(tmp_path / "logs"), "validate", "--config", config]) == 2
    assert "n_jobs" in capsys.readouterr().err
    config = _write_config(tmp_path, SMALL)
    args = ["--log-dir", str(tmp_path / "logs"), "run", "--config", config, "--out", str(tmp_path / "out"), "--n-jobs", "0"]
    assert main(args) == 2
    assert not (tmp_path / "out" / "summary.json").exists()


def test_numerical_failure_exit_code(tmp_path, capsys, monkeypatch):
    # Test that a numerical failure during the run exits with code 3 instead of a traceback
    import app

    def failing_run(cfg):
        raise NumericalFailure("covariance is not positive definite", condition=1e17)

    monkeypatch.setattr(app, "run_scenario", failing_run)
    config = _write_config(tmp_path, SMALL)
    assert main(["--log-dir", str(tmp_path / "logs"), "run", "--config", config, "--out", str(tmp_path / "out")]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_zero_noise_run_succeeds(tmp_path):
    # Test that a run with all measurement and clock noise switched off completes in every filter mode
    data = {
        "duration": 6.0,
        "warmup": 50,
        "replications": 1,
        "trajectory": {"kind": "static"},
        "clock": {"sigma_eta": 0.0, "beta": 1.0},
        "measurement": {"sigma_theta_deg": 0.0, "sigma_phi_deg": 0.0, "sigma_tau": 0.0},
        "fusion": {"init": "truth"},
    }
    config = _write_config(tmp_path, data)
    out = tmp_path / "out"
    assert main(["--log-dir", str(tmp_path / "logs"), "run", "--config", config, "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["modes"]) == 8
