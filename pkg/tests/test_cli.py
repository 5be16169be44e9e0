import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from demads.cli import (
    EXIT_FINGERPRINT,
    EXIT_OK,
    EXIT_PARSE,
    EXIT_USAGE,
    derive_seed,
    main,
)
from demads.load_estimation import load_estimator, save_estimator
from demads.rt_detector import classify, load_rt_model, save_rt_model
from demads.scenario_sim import load_grid_file

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(*argv):
    return main([str(a) for a in argv])


def digest(paths):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(paths)}


# --- gen-grid -------------------------------------------------------------------

def test_gen_grid_is_reproducible(tmp_path):
    assert run("gen-grid", "--buses", 5, "--seed", 3, "--out", tmp_path / "a.json") == EXIT_OK
    assert run("gen-grid", "--buses", 5, "--seed", 3, "--out", tmp_path / "b.json") == EXIT_OK
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    topo, inverters = load_grid_file(tmp_path / "a.json")
    assert topo.bus_count == 5 and len(inverters) == 1


def test_gen_grid_usage_errors(tmp_path, capsys):
    assert run("gen-grid", "--buses", 1, "--out", tmp_path / "g.json") == EXIT_USAGE
    assert "buses" in capsys.readouterr().err
    assert not (tmp_path / "g.json").exists()
    assert run("gen-grid", "--buses", "many") == EXIT_USAGE
    assert run("no-such-command") == EXIT_USAGE


def test_seed_streams_are_distinct_and_stable():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert len({derive_seed(s, n) for s in range(3) for n in ("a", "b", "c")}) == 9


# --- simulate -------------------------------------------------------------------

def idle_scenario(tmp_path):
    run("gen-grid", "--buses", 4, "--pv", 0, "--seed", 1, "--out", tmp_path / "grid.json")
    scen = {"grid": "grid.json", "days": 1, "slack_voltage": 1.02}
    (tmp_path / "idle.json").write_text(json.dumps(scen))
    return tmp_path / "idle.json"


def test_idle_scenario_has_constant_slack(tmp_path):
    scen = idle_scenario(tmp_path)
    assert run("simulate", "--config", scen, "--out", tmp_path / "m1") == EXIT_OK
    lines = (tmp_path / "m1" / "substation_day000.csv").read_text().splitlines()
    header = lines[0].split(",")
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    assert len(rows) == 1440
    assert np.all(rows[:, header.index("v_slack")] == 1.02)
    assert np.all(rows[:, header.index("p_total")] == 0)
    meters = np.loadtxt(tmp_path / "m1" / "meters_day000.csv", delimiter=",", skiprows=1)
    assert np.all(meters[:, 1:] == 1.02)


def test_simulate_is_reproducible_and_leaves_inputs_alone(tmp_path):
    scen = idle_scenario(tmp_path)
    before = digest([scen, tmp_path / "grid.json"])
    run("simulate", "--config", scen, "--out", tmp_path / "m1")
    run("simulate", "--config", scen, "--out", tmp_path / "m2")
    assert digest((tmp_path / "m1").iterdir()) == digest((tmp_path / "m2").iterdir())
    assert digest([scen, tmp_path / "grid.json"]) == before


def test_missing_grid_names_the_path(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps({"grid": "nowhere/grid.json", "days": 1}))
    code = run("simulate", "--config", tmp_path / "s.json", "--out", tmp_path / "m")
    assert code != EXIT_OK
    assert "nowhere/grid.json" in capsys.readouterr().err


def test_malformed_config_is_a_parse_error(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert run("simulate", "--config", tmp_path / "bad.json") == EXIT_PARSE


# --- models ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def estimator_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("est") / "est.json"
    assert run("train-estimator", "--config", CONFIGS / "estimator_a.json", "--seed", 5, "--out", out) == EXIT_OK
    return out


def test_estimator_file_round_trip(estimator_file, tmp_path):
    est = load_estimator(estimator_file)
    probe = np.random.default_rng(0).normal(size=(8, len(est.input_spec)))
    copy = tmp_path / "copy.json"
    save_estimator(est, copy)
    assert np.max(np.abs(load_estimator(copy).predict_raw(probe) - est.predict_raw(probe))) <= 1e-12


def test_estimator_on_another_grid_is_refused(estimator_file, tmp_path, capsys):
    scen = {"preset": "B", "days": 15, "seed": 2}
    (tmp_path / "b.json").write_text(json.dumps(scen))
    run("simulate", "--config", tmp_path / "b.json", "--out", tmp_path / "mb")
    code = run("monitor", "--measurements", tmp_path / "mb", "--grid", "preset:B",
               "--estimator", estimator_file, "--out", tmp_path / "mon")
    assert code == EXIT_FINGERPRINT
    # right grid name, wrong measurements: the channel layout does not match either
    code = run("monitor", "--measurements", tmp_path / "mb", "--grid", "preset:A",
               "--estimator", estimator_file, "--out", tmp_path / "mon")
    assert code == EXIT_FINGERPRINT
    assert "mismatch" in capsys.readouterr().err


def test_detector_probe_round_trip(tmp_path, inverted_detector):
    model = inverted_detector[0]
    save_rt_model(model, tmp_path / "rt.json")
    probe = 1.0 + 0.01 * np.random.default_rng(2).normal(size=(4, 96))
    assert np.max(np.abs(classify(load_rt_model(tmp_path / "rt.json"), probe) - classify(model, probe))) <= 1e-12


# --- end to end -----------------------------------------------------------------

@pytest.mark.slow
def test_monitor_flips_at_the_scheduled_day(estimator_file, tmp_path):
    assert run("simulate", "--config", CONFIGS / "scenario_a_inverted.json", "--out", tmp_path / "meas") == EXIT_OK
    assert run("pretrain-detector", "--config", CONFIGS / "detector_inverted.json", "--seed", 5,
               "--out", tmp_path / "det.json") == EXIT_OK
    assert run("monitor", "--measurements", tmp_path / "meas", "--grid", "preset:A",
               "--estimator", estimator_file, "--detector", tmp_path / "det.json",
               "--out", tmp_path / "mon") == EXIT_OK
    rows = [json.loads(line) for line in (tmp_path / "mon" / "report.jsonl").read_text().splitlines()]
    verdicts = {r["day"]: r["transformer_verdict"] for r in rows}
    first = min(d for d, v in verdicts.items() if v != "Correct")
    assert abs(first - 20) <= 1
    assert (tmp_path / "mon" / "summary.md").exists()

    assert run("evaluate", "--report", tmp_path / "mon" / "report.jsonl", "--measurements", tmp_path / "meas",
               "--format", "json", "--out", tmp_path / "metrics.json") == EXIT_OK
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["labels"] == ["Correct", "Inverted"]
    assert metrics["macro_f"] >= 0.9


def test_module_entry_point(tmp_path):
    out = tmp_path / "g.json"
    proc = subprocess.run([sys.executable, "-m", "demads", "gen-grid", "--buses", "6", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and out.exists()
    proc = subprocess.run([sys.executable, "-m", "demads", "gen-grid", "--buses", "1"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
