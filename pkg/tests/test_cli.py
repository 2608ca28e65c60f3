import json

import pandas as pd
import pytest
from click.testing import CliRunner

from pthmm.cli import main
from pthmm.simulation import simulate_telemetry


@pytest.fixture(scope="module")
def telemetry(tmp_path_factory):
    d = tmp_path_factory.mktemp("tele")
    frame, _ = simulate_telemetry(n_tracks=2, track_length=300, seed=5)
    path = d / "tele.csv"
    frame.to_csv(path, index=False)
    return path


def run(args, env=None):
    return CliRunner().invoke(main, [str(a) for a in args], env=env)


def test_config_schema():
    r = run(["config-schema"])
    assert r.exit_code == 0
    assert "properties" in json.loads(r.stdout)


def test_fit_and_decode(telemetry, tmp_path):
    r = run(["fit", "--data", telemetry, "--starts", 1, "--out", tmp_path])
    assert r.exit_code == 0, r.output
    doc = json.loads((tmp_path / "fit_result.json").read_text())
    assert doc["schema"] == "pthmm.fit_result"
    assert len(doc["scaling"]) == 2
    nu = pd.read_csv(tmp_path / "nu.csv")
    assert list(nu.columns) == ["t", "track_id", "nu_hat", "state_viterbi"]
    assert len(nu) == 600 and nu["state_viterbi"].between(1, 3).all()
    thr = pd.read_csv(tmp_path / "thresholds.csv")
    assert list(thr["slot"]) == ["exposure_land", "exposure_noland"]
    r = run(["decode", "--result", tmp_path / "fit_result.json", "--data", telemetry, "--out", tmp_path])
    assert r.exit_code == 0, r.output
    occ = json.loads((tmp_path / "occupancy.json").read_text())
    assert sum(occ["occupancy"]) == pytest.approx(1.0)
    assert set(occ["per_track"]) == {"whale1", "whale2"}


def test_fit_byte_identical(telemetry, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    env = {"THMM_SEED": "3"}
    assert run(["fit", "--data", telemetry, "--starts", 1, "--out", a], env).exit_code == 0
    assert run(["fit", "--data", telemetry, "--starts", 1, "--out", b], env).exit_code == 0
    ta, tb = (a / "fit_result.json").read_bytes(), (b / "fit_result.json").read_bytes()
    assert ta == tb
    assert json.loads(ta)["provenance"]["seed"] == 3


def test_fit_all_masked(telemetry, tmp_path):
    frame = pd.read_csv(telemetry)
    frame["vessel_dist_km"] = 120.0
    path = tmp_path / "far.csv"
    frame.to_csv(path, index=False)
    r = run(["fit", "--data", path, "--starts", 1, "--out", tmp_path])
    assert r.exit_code == 0, r.output
    doc = json.loads((tmp_path / "fit_result.json").read_text())
    assert doc["thresholds_original"] == [None, None]
    assert doc["disturbance_detected"] == [False, False]
    assert doc["capped"] is True
    assert all(v == 0.0 for v in doc["nu_series"])


def test_errors_are_json(tmp_path):
    r = run(["fit", "--data", tmp_path / "missing.csv"])
    assert r.exit_code == 2
    err = json.loads(r.stderr)
    assert err["error"] == "InputError"
    bad = tmp_path / "bad.csv"
    bad.write_text("track_id,timestamp,lat,lon,dist_shore_km\na,2019-01-01T00:00:00Z,0,0,1\n"
                   "a,2019-01-01T00:00:00Z,0.01,0,1\na,2019-01-01T01:00:00Z,0.02,0,1\n")
    r = run(["fit", "--data", bad])
    assert r.exit_code == 2
    err = json.loads(r.stderr)
    assert err["diagnostics"][0]["row"] == 3
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"fit": {"n_starts": -1}}')
    r = run(["fit", "--config", cfg, "--data", bad])
    assert r.exit_code == 2 and json.loads(r.stderr)["error"] == "ConfigError"
    r = run(["simulate", "--scenario", "1a"])
    assert r.exit_code == 2 and json.loads(r.stderr)["error"] == "UsageError"


def test_simulate_and_report(tmp_path):
    r = run(["simulate", "--scenario", "1b", "--T", 500, "--reps", 2, "--seed", 7, "--starts", 1, "--out", tmp_path])
    assert r.exit_code == 0, r.output
    rep = pd.read_csv(tmp_path / "scenario_1b_T500_report.csv")
    assert "fpr_1" in rep.columns and len(rep) == 1
    summary = json.loads((tmp_path / "scenario_1b_T500_summary.json").read_text())
    assert summary["seed"] == 7 and len(summary["false_positive_rate"]) == 1
    r = run(["report", tmp_path / "scenario_1b_T500_metrics.csv"])
    assert r.exit_code == 0
    assert r.stdout.splitlines()[0].startswith("scenario,T,n,n_ok")


def test_blrt_command(telemetry, tmp_path):
    r = run(["blrt", "--data", telemetry, "--B", 2, "--null-slots", "0", "--starts", 1, "--out", tmp_path])
    assert r.exit_code == 0, r.output
    doc = json.loads((tmp_path / "blrt_result.json").read_text())
    assert doc["B"] == 2 and doc["null_slots"] == [0]
    assert 0.0 <= doc["p_value"] <= 1.0
