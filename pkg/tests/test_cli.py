import csv
import json
import subprocess
import sys

import pytest

from panelcv.cli import main


@pytest.fixture
def panel(tmp_path):
    assert main(["simulate", "--dgp", "1", "--n", "40", "--t", "20", "--seed", "2", "--out", str(tmp_path)]) == 0
    return tmp_path / "panel.csv"


def test_select_cv_writes_json(panel, tmp_path, capsys):
    out = tmp_path / "sel"
    code = main(["select", "--method", "cv", "--family", "linear", "--gmax", "6",
                 "--data", str(panel), "--out", str(out)])
    assert code == 0
    res = json.loads((out / "selection.json").read_text())
    assert res["g_values"] == [1, 2, 3, 4, 5, 6]
    assert len(res["criterion"]) == 6
    assert res["chosen"] in res["g_values"]
    assert json.loads(capsys.readouterr().out)["chosen"] == res["chosen"]
    # full-precision floats round-trip through the CSV
    rows = list(csv.DictReader(open(out / "selection.csv")))
    assert [float(r["criterion"]) for r in rows] == res["criterion"]


def test_global_flags_before_command(panel, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--seed", "9", "--out", str(a), "select", "--family", "linear", "--gmax", "3",
                 "--data", str(panel)]) == 0
    assert main(["select", "--family", "linear", "--gmax", "3", "--data", str(panel),
                 "--seed", "9", "--out", str(b)]) == 0
    assert (a / "selection.json").read_text() == (b / "selection.json").read_text()


def test_fit_infeasible(panel, tmp_path, capsys):
    code = main(["fit", "--family", "linear", "--groups", "41", "--data", str(panel), "--out", str(tmp_path)])
    assert code == 1
    assert "cannot form 41 groups" in capsys.readouterr().err


def test_fit_writes_result(panel, tmp_path):
    assert main(["fit", "--family", "linear", "--fixed-effects", "--groups", "2", "--data", str(panel),
                 "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "fit.json").read_text())
    assert res["family"] == "linear+fe"
    assert sorted(set(res["memberships"])) == [1, 2]


def test_usage_errors(capsys):
    assert main(["fit", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["select", "--family", "logit", "--data", "x.csv"]) == 2


def test_ingestion_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,time,y,x1\na,1,1.0,2.0\na,1,2.0,3.0\n")
    assert main(["fit", "--family", "linear", "--groups", "1", "--data", str(bad), "--out", str(tmp_path)]) == 1
    assert "duplicate" in capsys.readouterr().err


def test_dynamic_family_builds_lag(tmp_path):
    raw = tmp_path / "raw.csv"
    lines = ["id,time,y,x1"] + [f"{i},{t},{(i * 7 + t * 3) % 5}.0,{(i + t) % 3}.5" for i in range(6) for t in range(1, 11)]
    raw.write_text("\n".join(lines) + "\n")
    assert main(["fit", "--family", "linear-dyn", "--groups", "2", "--data", str(raw), "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "fit.json").read_text())
    assert len(res["coefficients"][0]) == 2


def test_montecarlo_smoke(tmp_path):
    cfg = tmp_path / "mc.cfg"
    cfg.write_text("dgps = 1\nsizes = 20x10\nmethods = cv\nreplications = 2\ng_min = 1\ng_max = 3\nn_restarts = 2\n")
    assert main(["montecarlo", "--config", str(cfg), "--out", str(tmp_path / "mc")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "mc" / "results.csv")))
    assert rows[0]["R"] == "2"


def test_mpse_command(tmp_path):
    assert main(["simulate", "--dgp", "2FE", "--n", "20", "--t", "20", "--out", str(tmp_path)]) == 0
    assert main(["mpse", "--family", "linear-dyn", "--fixed-effects", "--data", str(tmp_path / "panel.csv"),
                 "--train-window", "8", "--step", "4", "--gmax", "2", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "mpse.csv")))
    assert [r["G"] for r in rows] == ["1", "2"]
    assert main(["mpse", "--family", "linear-dyn", "--data", str(tmp_path / "panel.csv"),
                 "--train-window", "30", "--out", str(tmp_path)]) == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "panelcv.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "montecarlo" in proc.stdout
