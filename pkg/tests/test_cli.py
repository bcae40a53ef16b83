import csv
import json
import os
from pathlib import Path

import pytest

from xbmarket.cli import OUT_ENV, _matrix, dispatch
from xbmarket.core import ReinitSpec
from xbmarket.experiments import run_price_change_table

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TABLES = str(CONFIGS / "tables.json")


def run(capsys, *argv):
    rc = dispatch([str(a) for a in argv])
    out = capsys.readouterr()
    return rc, out.out.strip(), out.err.strip()


def read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_survival_prints_product_value(capsys):
    rc, out, _ = run(capsys, "analytics", "survival", "--x", "1,1", "--mu", "0,0", "--sigma", "I", "--t", "1")
    assert rc == 0
    assert abs(float(out) - 0.466065) < 5e-7


def test_missing_config_exits_2(capsys, tmp_path):
    rc, _, err = run(capsys, "experiment", "tables", "--config", tmp_path / "nope.json", "--out", tmp_path)
    assert rc == 2
    assert err.startswith("error: ConfigInvalid")


def test_tables_config_matches_library(capsys, tmp_path):
    rc, out, _ = run(capsys, "experiment", "tables", "--config", TABLES, "--seed", 42, "--m", 4,
                     "--set", "n=1000", "--out", tmp_path)
    assert rc == 0 and "scenarios=a,b,c,d" in out
    rows = read(tmp_path / "table.csv")
    assert rows[0] == ["scenario", "metric", "value", "se"]
    assert sorted({r[0] for r in rows[1:]}) == ["a", "b", "c", "d"]
    cfg = json.load(open(TABLES))
    tab = run_price_change_table({k: tuple(v) for k, v in cfg["scenarios"].items()}, n=1000, m=4, seed=42,
                                 reinit=ReinitSpec(10, 20))
    for got, want in zip(rows[1:], tab.rows):
        assert got[:2] == list(want[:2])
        assert got[2] == f"{want[2]:.9g}" and got[3] == f"{want[3]:.9g}"


def test_identical_invocations_identical_files(capsys, tmp_path):
    for d in ("one", "two"):
        assert dispatch(["simulate-micro", "--config", str(CONFIGS / "balanced.json"), "--seed", "3",
                         "--set", "n=2500", "--orders", "--out", str(tmp_path / d)]) == 0
    capsys.readouterr()
    for name in ("trajectory.csv", "events.csv", "orders.csv"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_trajectory_columns(capsys, tmp_path):
    assert dispatch(["simulate-micro", "--regime", "inactive", "--set", "n=500", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    rows = read(tmp_path / "trajectory.csv")
    assert rows[0] == ["t", "Q_bF", "Q_aF", "Q_bG", "Q_aG", "B_F", "B_G", "C", "regime"]
    assert len(rows) == 502


def test_out_dir_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    rc, out, _ = run(capsys, "simulate-limit", "--regime", "active", "--set", "n=400")
    assert rc == 0
    assert (tmp_path / "env" / "trajectory.csv").exists()


def test_unwritable_output_exits_3(capsys, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rc, _, err = run(capsys, "analytics", "survival", "--csv", "--out", blocker / "sub")
    assert rc == 3
    assert "IoError" in err


def test_degenerate_covariance_exits_1(capsys):
    rc, _, err = run(capsys, "analytics", "survival", "--sigma", "1,1;1,1")
    assert rc == 1
    assert "DegenerateCovariance" in err


def test_bad_number_list_exits_2(capsys):
    rc, _, _ = run(capsys, "analytics", "survival", "--x", "1,a")
    assert rc == 2


def test_bad_override_exits_2(capsys):
    rc, _, _ = run(capsys, "simulate-micro", "--set", "n=-5")
    assert rc == 2


def test_upward_third(capsys):
    rc, out, _ = run(capsys, "analytics", "upward", "--x", f"1,{3 ** 0.5!r}")
    assert rc == 0 and out == "0.333333333"


def test_exit_density_csv(capsys, tmp_path):
    rc, out, _ = run(capsys, "analytics", "exit-density", "--z", "0.5,1,2", "--csv", "--out", tmp_path)
    assert rc == 0 and len(out.split()) == 3
    rows = read(tmp_path / "exit_density.csv")
    assert rows[0] == ["z", "density"] and len(rows) == 4


def test_interface_pde_grid(capsys, tmp_path):
    rc, out, _ = run(capsys, "analytics", "interface-pde", "--points", "1,1;1,2", "--t", "0.5,1", "--h", "0.1",
                     "--csv", "--out", tmp_path)
    assert rc == 0
    v = [float(s) for s in out.split()]
    assert len(v) == 4 and v[0] < v[1] and v[2] < v[0]
    assert read(tmp_path / "interface_survival.csv")[0] == ["t", "xF", "xG", "survival"]


def test_range_value(capsys):
    rc, out, _ = run(capsys, "analytics", "range", "--x", "6,6", "--n", "0", "--t-end", "1")
    assert rc == 0 and float(out) == pytest.approx(1.0, abs=1e-6)


def test_scenario_writes_three_files(capsys, tmp_path):
    rc, out, _ = run(capsys, "experiment", "scenario", "--config", CONFIGS / "imbalanced.json", "--m", 3,
                     "--set", "n=2500", "--out", tmp_path)
    assert rc == 0 and "switch_frequency=" in out
    for name in ("summary.csv", "trajectory.csv", "events.csv"):
        assert (tmp_path / name).exists()


def test_cross_validate_row(capsys, tmp_path):
    rc, out, _ = run(capsys, "experiment", "cross-validate", "--kind", "survival", "--paths", 500, "--dt", "1e-3",
                     "--out", tmp_path)
    assert rc == 0
    rows = read(tmp_path / "cross_validate.csv")
    assert rows[0] == ["kind", "analytic", "mc", "se", "z"] and rows[1][0] == "survival"


@pytest.mark.parametrize("s,expect", [("I", [[1, 0], [0, 1]]), ("0.5I", [[0.5, 0], [0, 0.5]]),
                                      ("1,0.2,0.2,2", [[1, 0.2], [0.2, 2]]), ("1,0;0,3", [[1, 0], [0, 3]])])
def test_matrix_syntax(s, expect):
    assert _matrix(s).tolist() == expect


def test_console_script_installed():
    import shutil
    import subprocess

    exe = shutil.which("xbmarket")
    assert exe is not None
    r = subprocess.run([exe, "analytics", "survival"], capture_output=True, text=True, env=dict(os.environ))
    assert r.returncode == 0 and r.stdout.strip().startswith("0.46606")
