import csv
import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from drbsde.harness import (ConfigError, ExperimentConfig, convergence_study, load_config,
                            parse_config_text, preset, run_experiment)
from drbsde.harness.cli import main
from drbsde.harness.config import DEFAULT_TOLERANCES, PRESETS
from drbsde.harness.scenarios import ANCHORS, substream_seed, write_convergence_table

LOG_ODE_ORACLE = np.exp(np.exp(-1.0))

CLAMPED_INI = """
[experiment]
scenario = double-barrier
seed = 4

[grid]
N = 20
M = 2000
nx = 101
pde_N = 50

[barrier]
name = const_barrier
lower = -1
upper = 1

[terminal]
name = clamp_terminal

[tolerance]
crossval = 0.05
"""


# --- configuration -------------------------------------------------------------

def test_parse_sections():
    cfg = parse_config_text(CLAMPED_INI)
    assert cfg.scenario == "double-barrier" and cfg.seed == 4
    assert (cfg.N, cfg.M, cfg.nx, cfg.pde_N) == (20, 2000, 101, 50)
    assert cfg.barrier == ("const_barrier", {"lower": -1.0, "upper": 1.0})
    assert cfg.terminal == ("clamp_terminal", {})
    assert cfg.tolerances["crossval"] == 0.05
    assert cfg.tolerances["oracle"] == DEFAULT_TOLERANCES["oracle"]
    cfg.validate()


@pytest.mark.parametrize("text,path", [
    ("[grid]\nNN = 3\n", "grid.NN"),
    ("[wibble]\nx = 1\n", "wibble"),
    ("[tolerance]\nfoo = 1\n", "tolerance.foo"),
    ("[grid]\nN = ten\n", "grid.N"),
    ("[grid]\nN = 2.5\n", "grid.N"),
    ("[generator]\nname = neg_y_log_y\nQ = 1\n", "generator.Q"),
])
def test_unknown_or_bad_keys_fail_closed(text, path):
    with pytest.raises(ConfigError) as err:
        parse_config_text(text).validate()
    assert str(err.value).startswith(path)


@pytest.mark.parametrize("field,value,path", [
    ("N", 0, "grid.N"), ("M", -3, "grid.M"), ("T", 0.0, "grid.T"),
    ("scenario", "nope", "experiment.scenario"), ("axis", "K", "convergence.axis"),
    ("generator", ("cubic", {}), "generator.name"), ("game", ("chess", {}), "game.name"),
    ("levels", (2.0, 1.0), "schedule/basis"), ("basis_family", "splines", "schedule/basis"),
])
def test_validation_names_field(field, value, path):
    with pytest.raises(ConfigError) as err:
        replace(ExperimentConfig(), **{field: value}).validate()
    assert str(err.value).startswith(path)


def test_negative_tolerance_rejected():
    cfg = ExperimentConfig(tolerances=dict(DEFAULT_TOLERANCES, oracle=-1.0))
    with pytest.raises(ConfigError, match="tolerance.oracle"):
        cfg.validate()


def test_presets_validate():
    for name in PRESETS:
        cfg = preset(name).validate()
        assert cfg.label == name


def test_preset_by_scenario_key():
    cfg = parse_config_text("[experiment]\nscenario = log-ode\n[grid]\nN = 400\n")
    assert cfg.scenario == "bsde" and cfg.N == 400 and cfg.M == 1


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.ini")


def test_substreams_are_stable_and_distinct():
    assert substream_seed(3, "paths") == substream_seed(3, "paths")
    assert substream_seed(3, "paths") != substream_seed(3, "perturbations")
    assert substream_seed(3, "paths") != substream_seed(4, "paths")


# --- scenarios -------------------------------------------------------------------

def test_log_ode_scenario(tmp_path):
    cfg = replace(preset("log-ode"), out=tmp_path)
    assert run_experiment(cfg) == 0
    rep = json.loads((tmp_path / "results.json").read_text())
    assert rep["passed"] and abs(rep["results"]["Y0"] - LOG_ODE_ORACLE) <= 5e-3
    assert rep["anchor"] == ANCHORS["bsde"]


def test_failed_check_gives_nonzero_status(tmp_path):
    tight = dict(DEFAULT_TOLERANCES, oracle=1e-9)
    cfg = replace(preset("log-ode"), out=tmp_path, tolerances=tight)
    assert run_experiment(cfg) == 1
    rep = json.loads((tmp_path / "results.json").read_text())
    assert not rep["passed"]


@pytest.mark.parametrize("scenario", ["bsde", "penalized", "double-barrier", "pde",
                                      "cross-validate", "game"])
def test_every_scenario_runs_and_records_anchor(tmp_path, scenario):
    cfg = parse_config_text(CLAMPED_INI)
    cfg = replace(cfg, scenario=scenario, out=tmp_path, levels=(1.0, 16.0, 256.0, 4096.0),
                  pde_levels=(10.0, 100.0), game=("zero-game", {}), perturbations=4)
    status = run_experiment(cfg)
    rep = json.loads((tmp_path / "results.json").read_text())
    assert rep["anchor"] == ANCHORS[scenario] and rep["scenario"] == scenario
    assert status == (0 if rep["passed"] else 1)
    assert status == 0, [c for c in rep["checks"] if not c["passed"]]


def test_same_seed_byte_identical_outputs(tmp_path):
    base = replace(parse_config_text(CLAMPED_INI), scenario="penalized",
                   levels=(1.0, 8.0, 64.0))
    for sub in ("a", "b"):
        run_experiment(replace(base, out=tmp_path / sub))
    for name in ("penalization_increasing.csv", "penalization_decreasing.csv", "results.json"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        if name == "results.json":
            a, b = a.replace(b"/a", b""), b.replace(b"/b", b"")
        assert a == b


def test_convergence_study_tables(tmp_path):
    cfg = replace(parse_config_text(CLAMPED_INI), scenario="double-barrier")
    rows = convergence_study(cfg, "M", (500, 1000, 2000))
    assert [r["value"] for r in rows] == [500.0, 1000.0, 2000.0]
    assert np.isnan(rows[0]["delta_vs_previous"]) and rows[1]["delta_vs_previous"] >= 0
    rows = convergence_study(cfg, "nx", (51, 101))
    assert all(r["SE"] == 0 for r in rows)
    p = write_convergence_table(rows, tmp_path / "c.csv")
    assert next(csv.reader(p.open())) == ["axis", "value", "estimate", "SE", "delta_vs_previous"]
    pen = convergence_study(replace(cfg, scenario="pde"), "penalty", (10.0, 1000.0))
    assert len(pen) == 2


# --- command line ----------------------------------------------------------------

def test_cli_log_ode(tmp_path):
    assert main(["solve-bsde", "--scenario", "log-ode", "--out", str(tmp_path), "--quiet"]) == 0
    assert (tmp_path / "results.json").exists()
    assert (tmp_path / "bsde_path_means.csv").exists()


def test_cli_zero_game(tmp_path):
    assert main(["game", "--scenario", "zero-game", "--out", str(tmp_path), "--quiet"]) == 0
    rep = json.loads((tmp_path / "game_report.json").read_text())
    assert rep["Y0"] == 0 and rep["J_star"] == 0
    assert rep["violations_lower"] == 0 and rep["violations_upper"] == 0


def test_cli_config_file_and_overrides(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(CLAMPED_INI)
    out = tmp_path / "out"
    assert main(["cross-validate", "--config", str(ini), "--seed", "9", "--out", str(out),
                 "--quiet"]) == 0
    rep = json.loads((out / "results.json").read_text())
    assert rep["seed"] == 9 and rep["scenario"] == "cross-validate"


def test_cli_usage_errors(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[grid]\nN = 0\n")
    assert main(["solve-bsde", "--config", str(ini), "--out", str(tmp_path)]) == 2
    assert "grid.N" in capsys.readouterr().err
    ini.write_text("[grid]\nbogus = 1\n")
    assert main(["solve-bsde", "--config", str(ini)]) == 2
    assert main(["game", "--scenario", "no-such-preset"]) == 2
    with pytest.raises(SystemExit) as err:
        main(["converge", "--axis", "Q"])
    assert err.value.code == 2


def test_cli_converge(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(CLAMPED_INI)
    assert main(["converge", "--config", str(ini), "--axis", "N", "--values", "10,20",
                 "--out", str(tmp_path), "--quiet"]) == 0
    rows = list(csv.DictReader((tmp_path / "convergence_N.csv").open()))
    assert [float(r["value"]) for r in rows] == [10.0, 20.0]


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "drbsde.harness.cli", "solve-bsde", "--scenario",
                          "log-ode", "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0 and "ok" in res.stdout
