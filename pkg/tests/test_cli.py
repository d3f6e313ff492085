import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from oldnash.checkpoint import read_checkpoint
from oldnash.cli import CHECKS_FAILED, dumps, main, run_scenario
from oldnash.config import parse_config
from oldnash.geometry import build_grid

SMALL = """[grid]
nx = 8
ny = 8
nt = 4
[costs]
alpha = 3
target = {target}
[leader]
epsilon = 0.5
eps_list = 0.5, 0.2, 0.1
[run]
seed = 11
trials = 2
"""


def small(target="reachable", **kw):
    return parse_config(SMALL.format(target=target), **kw)


@pytest.fixture(scope="module")
def verify_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("verify")
    code, report = run_scenario(small(), "verify", str(out))
    return code, report, out


def test_verify_passes_and_writes_tables(verify_run):
    code, report, out = verify_run
    failed = [c["name"] for c in report["checks"] if not c["ok"]]
    assert code == 0 and report["ok"], failed
    rows = list(csv.reader(open(out / "tables" / "checks.csv")))
    assert rows[0] == ["name", "ok", "value", "tol"]
    assert [r[0] for r in rows[1:]] == [c["name"] for c in report["checks"]]
    on_disk = json.loads((out / "report.json").read_text())
    assert on_disk["seed"] == 11 and on_disk["config"]["grid"]["nx"] == 8
    assert on_disk["params_hash"] == report["params_hash"]


def test_verify_check_names(verify_run):
    names = {c["name"] for c in verify_run[1]["checks"]}
    for expected in ("adjoint_identity", "fubini", "energy_bound", "smallness_bound", "nash_euler_lagrange",
                     "coercivity", "gramian_symmetry", "memory_order", "duality_gap",
                     "variational_inequality"):
        assert expected in names


def test_nash_zero_leader_zero_target(tmp_path):
    cfg = small("zero")
    assert cfg.leader_control == "zero"
    code, report = run_scenario(cfg, "nash", str(tmp_path))
    assert code == 0
    grid = build_grid(cfg.grid)
    for name in ("w1.oldn", "w2.oldn"):
        w = read_checkpoint(tmp_path / "fields" / name, grid)
        assert w.levels == grid.nt and not np.any(w.data)
    assert report["terminal_distance"] == 0.0


def test_nash_writes_state(tmp_path):
    code, report = run_scenario(small(), "nash", str(tmp_path))
    grid = build_grid(small().grid)
    assert code == 0 and max(report["el_residuals"]) <= 1e-8
    assert read_checkpoint(tmp_path / "fields" / "state.oldn", grid).levels == grid.nt + 1


def test_sweep_csv_rows(tmp_path):
    code, report = run_scenario(small(), "sweep", str(tmp_path))
    rows = list(csv.DictReader(open(tmp_path / "tables" / "sweep.csv")))
    assert [float(r["epsilon"]) for r in rows] == [0.5, 0.2, 0.1]
    assert code == (0 if report["feasible"] else CHECKS_FAILED)
    assert report["feasible"] and report["cost_nondecreasing"]


def test_leader_fields(tmp_path):
    code, report = run_scenario(small(), "leader", str(tmp_path))
    grid = build_grid(small().grid)
    assert code == 0 and report["feasible"]
    assert read_checkpoint(tmp_path / "fields" / "v.oldn", grid).levels == grid.nt
    assert read_checkpoint(tmp_path / "fields" / "terminal.oldn", grid).levels == 1


def test_unknown_command(tmp_path):
    with pytest.raises(ValueError):
        run_scenario(small(), "plot", str(tmp_path))


def test_config_error_json_and_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\nseed = 1\n[grid]\nwidth = 3\n")
    code = main(["verify", "--config", str(path), "--out", str(tmp_path / "o")])
    payload = json.loads(capsys.readouterr().out)
    assert code == 41 == payload["code"]
    assert payload["status"] == "error" and payload["kind"] == "unknown_key" and payload["line"] == 4
    assert json.loads((tmp_path / "o" / "report.json").read_text()) == payload


def test_non_dissipative_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\nseed = 1\n[kernel]\nk = 2\n")
    assert main(["nash", "--config", str(path), "--out", str(tmp_path / "o")]) == 43
    assert "non-dissipative parameters" in json.loads(capsys.readouterr().out)["message"]


def test_main_ok_status(tmp_path, capsys):
    path = tmp_path / "ok.ini"
    path.write_text(SMALL.format(target="reachable"))
    assert main(["nash", "--config", str(path), "--out", str(tmp_path / "o"), "--seed", "5"]) == 0
    status = json.loads(capsys.readouterr().out)
    assert status["status"] == "ok" and status["command"] == "nash"
    assert json.loads((tmp_path / "o" / "report.json").read_text())["seed"] == 5


def test_dumps_nan_and_order():
    text = dumps({"b": float("nan"), "a": np.float64(1.5), "c": np.arange(2)})
    assert json.loads(text) == {"a": 1.5, "b": None, "c": [0, 1]}
    assert text.index('"a"') < text.index('"b"')


def test_nash_reruns_identical(tmp_path):
    cfg = parse_config(SMALL.format(target="random").replace("epsilon = 0.5", "epsilon = 0.5\ncontrol = random"))
    outs = []
    for k in range(2):
        run_scenario(cfg, "nash", str(tmp_path / str(k)))
        outs.append((tmp_path / str(k) / "report.json").read_bytes()
                    + (tmp_path / str(k) / "fields" / "w1.oldn").read_bytes())
    assert outs[0] == outs[1]


def test_module_entry_point(tmp_path):
    path = tmp_path / "ok.ini"
    path.write_text(SMALL.format(target="zero"))
    proc = subprocess.run([sys.executable, "-m", "oldnash.cli", "nash", "--config", str(path),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True,
                          env={**os.environ, "OMP_NUM_THREADS": "1"})
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["status"] == "ok"
