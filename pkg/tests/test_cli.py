import csv
import io
import json

import pytest

from nlskam.cli import (
    EXIT_CONFIG,
    EXIT_EMPTY,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    SCHEMA,
    ConfigError,
    build_model,
    format_config,
    main,
    parse_config,
)

SMALL = """
model.R = 1
kam.grid = 3
kam.m_max = 2
model.epsilon = 1e-4
experiment.T = 2
experiment.record_every = 20
"""


def write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def read_csv(path):
    return list(csv.reader(io.StringIO(path.read_text())))


def run(tmp_path, command, text, *extra, out="out"):
    cfg = write(tmp_path, text)
    return main([command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])


# ---------------------------------------------------------------- config parsing


def test_parse_defaults_and_comments():
    cfg = parse_config("# comment\nmodel.R = 3  # trailing\n\nseed=7\n")
    assert cfg["model.R"] == 3 and cfg["seed"] == 7
    assert cfg["model.d"] == SCHEMA["model.d"][1]
    assert cfg["_given"] == {"model.R", "seed"}


@pytest.mark.parametrize("text, fragment", [
    ("model.foo = 1", "model.foo"),
    ("model.R", "key = value"),
    ("model.R = 1\nmodel.R = 2", "twice"),
    ("model.R = x", "model.R"),
    ("experiment.use_kam = maybe", "experiment.use_kam"),
])
def test_parse_rejects(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_format_round_trip():
    text = "model.A = 0,0;1,0\nmodel.q = 0,0:1.0;1,0:0.5\nmodel.V = 0,0:0.3;1,0:0.1\nmelnikov.kappa = 0.1,0.01\n"
    cfg = parse_config(text)
    again = parse_config(format_config(cfg))
    for key in SCHEMA:
        assert again[key] == cfg[key]


@pytest.mark.parametrize("text, fragment", [
    ("model.A = ", "model.A"),
    ("model.q = 0,0:1", "model.q"),
    ("model.q = 0,0:1;1,0:0", "model.q"),
    ("model.A = 0;1", "model.A"),
    ("kam.rho = 1.5", "kam.rho"),
    ("kam.grid_kind = lattice", "kam.grid_kind"),
    ("experiment.delta = 2", "experiment.delta"),
    ("experiment.dt = 0", "experiment.dt"),
    ("melnikov.kappa = -1", "melnikov.kappa"),
])
def test_build_model_names_key(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        build_model(parse_config(text))


# ---------------------------------------------------------------- exit codes


def test_missing_amplitude_exit_code(tmp_path, capsys):
    assert run(tmp_path, "run-kam", "model.q = 0,0:1\n") == EXIT_CONFIG
    assert "model.q" in capsys.readouterr().err


def test_empty_sites_exit_code(tmp_path, capsys):
    assert run(tmp_path, "run-kam", "model.A = \n") == EXIT_CONFIG
    assert "model.A" in capsys.readouterr().err


def test_unknown_key_exit_code(tmp_path, capsys):
    assert run(tmp_path, "check-melnikov", "model.foo = 1\n") == EXIT_CONFIG
    assert "model.foo" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run-kam", "--config", str(tmp_path / "absent.cfg")]) == EXIT_CONFIG


def test_bad_arguments():
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main(["run-kam", "--threads", "0"]) == EXIT_CONFIG


def test_zero_epsilon_converges_immediately(tmp_path):
    cfg = SMALL.replace("model.epsilon = 1e-4", "model.epsilon = 0")
    assert run(tmp_path, "run-kam", cfg, out="zero") == EXIT_OK
    result = json.loads((tmp_path / "zero" / "kam_result.json").read_text())
    assert result["status"] == "converged"
    assert result["summary"]["kam_steps"] == 0
    assert len(read_csv(tmp_path / "zero" / "summary.csv")) == 1


def test_empty_survivors_exit_code(tmp_path):
    cfg = "model.R = 1\nkam.grid = 3\nkam.m_max = 1\nkam.kappa_cap = 0.9\nkam.retries = 0\n"
    assert run(tmp_path, "run-kam", cfg) == EXIT_EMPTY
    assert json.loads((tmp_path / "out" / "kam_result.json").read_text())["status"] == "empty_survivors"


def test_not_converged_exit_code(tmp_path):
    cfg = "model.R = 1\nkam.grid = 3\nkam.m_max = 1\nmodel.epsilon = 1e-2\nkam.tol = 1e-30\n"
    assert run(tmp_path, "run-kam", cfg) == EXIT_NOT_CONVERGED


# ---------------------------------------------------------------- outputs


def test_run_kam_outputs(tmp_path):
    assert run(tmp_path, "run-kam", SMALL) == EXIT_OK
    out = tmp_path / "out"
    result = json.loads((out / "kam_result.json").read_text())
    rows = read_csv(out / "summary.csv")
    assert rows[0][:3] == ["m", "eps_m", "kappa_m"]
    assert len(rows) - 1 == result["summary"]["outer_steps"]
    log = [json.loads(line) for line in (out / "run_log.jsonl").read_text().splitlines()]
    assert log and all(isinstance(rec, dict) for rec in log)
    grid = read_csv(out / "grid.csv")
    assert len(grid) == 1 + 9


def test_run_kam_deterministic(tmp_path):
    cfg = SMALL + "kam.grid_kind = sobol\n"
    assert run(tmp_path, "run-kam", cfg, "--seed", "5", out="a") == EXIT_OK
    assert run(tmp_path, "run-kam", cfg, "--seed", "5", out="b") == EXIT_OK
    for name in ("kam_result.json", "summary.csv", "run_log.jsonl", "grid.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_check_melnikov_single_kappa(tmp_path):
    assert run(tmp_path, "check-melnikov", SMALL, "--kappa", "0.1") == EXIT_OK
    rows = read_csv(tmp_path / "out" / "melnikov.csv")
    assert rows[0] == ["kappa", "survivors", "points", "excluded_fraction"]
    assert len(rows) == 2 and float(rows[1][0]) == 0.1
    survivors, points, fraction = int(rows[1][1]), int(rows[1][2]), float(rows[1][3])
    assert fraction == pytest.approx(1 - survivors / points)
    summary = json.loads((tmp_path / "out" / "melnikov_summary.json").read_text())
    assert summary["points"] == points
    assert len(read_csv(tmp_path / "out" / "melnikov_points.csv")) == points + 1


def test_check_melnikov_sweep_monotone(tmp_path):
    assert run(tmp_path, "check-melnikov", SMALL, "--kappa", "0.001,0.01,0.1") == EXIT_OK
    fractions = [float(r[3]) for r in read_csv(tmp_path / "out" / "melnikov.csv")[1:]]
    assert fractions == sorted(fractions)


def test_simulate_zero_epsilon_isometry(tmp_path):
    cfg = SMALL.replace("model.epsilon = 1e-4", "model.epsilon = 0")
    assert run(tmp_path, "simulate", cfg) == EXIT_OK
    rows = read_csv(tmp_path / "out" / "stability.csv")
    assert rows[0] == ["index", "delta", "sup_C", "energy_drift", "horizon"]
    assert float(rows[1][2]) == pytest.approx(1.0, abs=1e-10)
    profile = read_csv(tmp_path / "out" / "profile_0.csv")
    assert all(abs(float(r[2]) - 1.0) <= 1e-10 for r in profile[1:])


def test_simulate_delta_list(tmp_path):
    assert run(tmp_path, "simulate", SMALL, "--delta", "0.001,0.01") == EXIT_OK
    out = tmp_path / "out"
    rows = read_csv(out / "stability.csv")
    assert [float(r[1]) for r in rows[1:]] == [0.001, 0.01]
    assert (out / "profile_0.csv").exists() and (out / "profile_1.csv").exists()
    assert (out / "kam" / "kam_result.json").exists()
    for r in rows[1:]:
        assert float(r[2]) >= 1.0 - 1e-12 and float(r[4]) == 2.0


@pytest.mark.parametrize("name", ["demo.cfg", "stability.cfg", "linear.cfg"])
def test_shipped_configs_build(name):
    from pathlib import Path

    path = Path(__file__).resolve().parent.parent / "configs" / name
    model = build_model(parse_config(path.read_text()))
    assert model.lattice.n_tangential == 2
