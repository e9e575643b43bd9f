import json

import numpy as np
import pytest

from odehazard.cli import build_parser, parse_grid, run_command
from odehazard.data import load_dataset

SUBCOMMANDS = ("fit", "simulate", "predict", "scenario", "km", "steady-state")


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert run_command([cmd, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text


def test_usage_errors(capsys):
    assert run_command([]) == 1
    assert run_command(["nope"]) == 1
    assert run_command(["fit", "--model", "logistic"]) == 1
    err = capsys.readouterr().err
    assert err.strip().splitlines()[-1].startswith("error:")


def test_grid():
    np.testing.assert_allclose(parse_grid("0:1:0.25"), [0, 0.25, 0.5, 0.75, 1.0])
    assert parse_grid("0:14:0.05").size == 281


def test_data_error(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,status\n1,1\n-2,0\n")
    assert run_command(["km", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert run_command(["km", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 2


def test_degenerate_steady_state_is_numerical_failure(tmp_path):
    assert run_command(["steady-state", "--params", "2,1,2,2", "--out", str(tmp_path)]) == 3


def test_steady_state(tmp_path):
    assert run_command(["steady-state", "--params", "1.8,0.1,6,4.8", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "steady_state.json").read_text())
    assert res["case"] == "coexistence" and res["is_equilibrium"]
    assert abs(res["h_star"] - 0.0695652) < 1e-7


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("ODEHAZARD_OUTPUT_ROOT", str(tmp_path / "root"))
    assert run_command(["steady-state", "--params", "1.8,0.1,6,4.8"]) == 0
    assert (tmp_path / "root" / "steady-state" / "manifest.json").is_file()


@pytest.fixture(scope="module")
def workflow(tmp_path_factory):
    root = tmp_path_factory.mktemp("wf")
    sim = root / "sim"
    assert run_command(["simulate", "--model", "hazard-response", "--params", "1.8,0.1,6,4.8", "--h0", "1e-2",
                        "--q0", "1e-6", "--n", "1000", "--censor-rate", "0.25", "--seed", "7", "--out", str(sim)]) == 0
    fit_args = ["fit", "--model", "logistic", "--data", str(sim / "dataset.csv"), "--method", "mcmc",
                "--iterations", "3000", "--burn-in", "1000", "--thinning", "10", "--seed", "5"]
    assert run_command(fit_args + ["--out", str(root / "fit")]) == 0
    assert run_command(fit_args + ["--out", str(root / "fit2")]) == 0
    pred = ["predict", "--chain", str(root / "fit" / "chain.csv"), "--model", "logistic", "--grid", "0:14:0.05",
            "--bands", "0.025,0.5,0.975"]
    assert run_command(pred + ["--out", str(root / "pred")]) == 0
    assert run_command(pred + ["--out", str(root / "pred2")]) == 0
    return root


class TestWorkflow:
    def test_simulated_censoring(self, workflow):
        ds = load_dataset(workflow / "sim" / "dataset.csv")
        assert ds.n == 1000
        assert abs(1 - ds.events / ds.n - 0.25) < 0.05

    def test_fit_outputs(self, workflow):
        for name in ("chain.csv", "summary.json", "manifest.json"):
            assert (workflow / "fit" / name).is_file()
        summary = json.loads((workflow / "fit" / "summary.json").read_text())
        assert summary["seed"] == 5 and summary["draws"] == 200

    def test_byte_identical(self, workflow):
        for a, b in (("fit", "fit2"), ("pred", "pred2")):
            name = "chain.csv" if a == "fit" else "curves.csv"
            assert (workflow / a / name).read_bytes() == (workflow / b / name).read_bytes()

    def test_curves(self, workflow):
        rows = (workflow / "pred" / "curves.csv").read_text().splitlines()
        assert rows[0].startswith("time,survival,hazard,density")
        assert "hazard_q0.025" in rows[0] and "hazard_q0.975" in rows[0]
        assert len(rows) == 282
        assert rows[1].split(",")[1] == "1.0"

    def test_manifest_reruns(self, workflow, tmp_path):
        man = json.loads((workflow / "fit" / "manifest.json").read_text())
        assert man["seed"] == 5 and "numpy" in man["versions"] and man["wall_time_s"] >= 0
        cfg = dict(man["config"])
        cfg["out"] = str(tmp_path / "again")
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert run_command(["fit", "--config", str(path)]) == 0
        assert (tmp_path / "again" / "chain.csv").read_bytes() == (workflow / "fit" / "chain.csv").read_bytes()


def test_seed_drawn_and_recorded(tmp_path):
    assert run_command(["simulate", "--model", "logistic", "--params", "0.5,0.05,3.5", "--n", "20",
                        "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert isinstance(man["seed"], int)


def test_bad_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"bogus": 1}))
    assert run_command(["km", "--config", str(p), "--data", "x.csv"]) == 1


def test_km(tmp_path):
    d = tmp_path / "d.csv"
    d.write_text("time,status\n1,1\n2,1\n3,0\n4,1\n5,0\n")
    assert run_command(["km", "--data", str(d), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "km.csv").read_text().splitlines()
    assert lines[0] == "time,survival" and lines[1] == "0.0,1.0"
    assert float(lines[-1].split(",")[1]) == pytest.approx(0.3)
