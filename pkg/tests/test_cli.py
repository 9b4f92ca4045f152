import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from powerdse import cli
from powerdse.cases import equilibrium, shipped_case_path
from powerdse.detect_metrics import SUMMARY_FIELDS, read_summary_csv
from powerdse.observer import ObserverGain, verify_gain
from powerdse.powermodel import MachineParams, SystemCase, jacobian_h, save_case, split_linear
from powerdse.report import RANKING_FIELDS, read_table
from powerdse.sim import read_trajectory_csv

SHORT = 2.0


def toy_case(path):
    mp = MachineParams(H=4.0, D=10.0, xd=1.0, xq=0.5, xdp=0.3, xqp=0.5, td0p=7.0, tq0p=0.6)
    Y = np.array([[0.5 - 2j]])
    x0, u0 = equilibrium([mp], Y, np.array([0.4]), np.array([1.0]))
    save_case(SystemCase([mp], Y, Y, u0=u0, x0=x0, name="toy"), path)
    return path


def write_config(tmp, name="run", **over):
    doc = {"schema": 1, "case_path": str(shipped_case_path()), "scenario": "nominal",
           "noise": {"kind": "gaussian"}, "seeds": {"process": 1, "measurement": 2, "bw": 3,
                                                    "sampling": 4},
           "output_dir": name, "t_end": SHORT}
    doc.update(over)
    path = tmp / f"{name}.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def gain_file(tmp_path_factory, gain):
    path = tmp_path_factory.mktemp("gain") / "three_machine.gain.json"
    gain.save(path)
    return path


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory, gain_file):
    """The same config run twice into different folders."""
    tmp = tmp_path_factory.mktemp("runs")
    dirs = []
    for name in ("a", "b"):
        cfg = write_config(tmp, name, observer={"gain_path": str(gain_file)})
        assert cli.main(["run", str(cfg)]) == cli.EXIT_OK
        dirs.append(tmp / name)
    return dirs


def test_run_writes_every_artifact(two_runs):
    out = two_runs[0]
    rows = read_summary_csv(out / "summary.csv")
    assert [r["estimator"] for r in rows] == ["ekf", "ukf", "srukf", "ckf", "observer"]
    for name in ("ekf", "ukf", "srukf", "ckf", "observer"):
        header, table = read_table(out / f"{name}_trajectory.csv")
        assert header[:2] == ["t", "mean_1"] and header[-1] == "ratio_12"
        assert table.shape == (int(SHORT * 60) + 1, 1 + 12 + 12 + 12)
        assert (out / f"{name}_innovation.csv").is_file()
    assert (out / "rel_err.svg").read_text().lstrip().startswith("<?xml")
    assert (out / "truth.csv").is_file() and (out / "observer_gain.json").is_file()
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["seeds"] == {"process": 1, "measurement": 2, "bw": 3, "sampling": 4}


def test_run_is_deterministic_except_wall_time(two_runs):
    a, b = two_runs
    names = sorted(p.name for p in a.iterdir() if p.name != "config.resolved.json")
    assert names == sorted(p.name for p in b.iterdir() if p.name != "config.resolved.json")
    for name in names:
        if name == "summary.csv":
            continue
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    ra, rb = read_summary_csv(a / "summary.csv"), read_summary_csv(b / "summary.csv")
    for x, y in zip(ra, rb):
        x.pop("wall_time_s")
        y.pop("wall_time_s")
        assert repr(x) == repr(y)


def test_csv_format(two_runs):
    text = (two_runs[0] / "ckf_trajectory.csv").read_bytes()
    assert b"\r\n" not in text and b";" not in text
    with open(two_runs[0] / "summary.csv", newline="") as fh:
        assert tuple(next(csv.reader(fh))) == SUMMARY_FIELDS


def test_truth_csv_roundtrip(two_runs):
    t, x, y = read_trajectory_csv(two_runs[0] / "truth.csv")
    assert x.shape == y.shape == (t.size, 12)
    np.testing.assert_allclose(np.diff(t), 1 / 60, atol=1e-12)


def test_env_seed_overrides_config(tmp_path, gain_file, monkeypatch):
    monkeypatch.setenv("DSE_SEED", "5")
    cfg = write_config(tmp_path, estimators=["ekf"], t_end=1.0,
                       observer={"gain_path": str(gain_file)})
    assert cli.main(["run", str(cfg)]) == 0
    seeds = json.loads((tmp_path / "run" / "config.resolved.json").read_text())["seeds"]
    from powerdse.scenario import derive_seeds
    assert seeds == derive_seeds(5)


def test_config_errors(tmp_path, capsys):
    cfg = write_config(tmp_path, schema=2)
    assert cli.main(["run", str(cfg)]) == cli.EXIT_CONFIG
    cfg = write_config(tmp_path, scenario="blackout")
    assert cli.main(["run", str(cfg)]) == cli.EXIT_CONFIG
    cfg = write_config(tmp_path, estimators=[])
    assert cli.main(["run", str(cfg)]) == cli.EXIT_CONFIG
    cfg = write_config(tmp_path, t_end=0.5)  # shorter than the wrong-admittance window
    assert cli.main(["run", str(cfg)]) == cli.EXIT_CONFIG
    cfg = write_config(tmp_path, colour="blue")
    assert cli.main(["run", str(cfg)]) == cli.EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_missing_case_is_io_error(tmp_path):
    cfg = write_config(tmp_path, case_path="nowhere.json")
    assert cli.main(["run", str(cfg)]) == cli.EXIT_IO


def test_gain_toy_case_and_cache(tmp_path, capsys):
    case_path = toy_case(tmp_path / "toy.json")
    assert cli.main(["gain", str(case_path), "--rho", "1", "--mu", "1", "--varphi", "1"]) == 0
    out = tmp_path / "toy.gain.json"
    g = ObserverGain.load(out)
    assert g.lmi_max_eig < 0
    capsys.readouterr()
    assert cli.main(["gain", str(case_path)]) == 0
    assert "re-verified" in capsys.readouterr().out


def test_gain_cache_rejects_tampered_file(tmp_path):
    case_path = toy_case(tmp_path / "toy.json")
    assert cli.main(["gain", str(case_path), "--rho", "0", "--mu", "0", "--varphi", "0"]) == 0
    out = tmp_path / "toy.gain.json"
    doc = json.loads(out.read_text())
    doc["sigma"] *= 3
    out.write_text(json.dumps(doc))
    assert cli.main(["gain", str(case_path)]) == cli.EXIT_INFEASIBLE


def test_gain_default_constants_on_shipped_case(tmp_path, case):
    out = tmp_path / "g.json"
    code = cli.main(["gain", str(shipped_case_path()), "--rho", "10", "--mu", "1",
                     "--varphi", "1", "--out", str(out)])
    assert code == 0
    verify_gain(ObserverGain.load(out), split_linear(case).A,
                jacobian_h(case.x0, case.Y_post, case))


def test_gain_infeasible_exit_code(tmp_path, capsys):
    code = cli.main(["gain", str(shipped_case_path()), "--rho", "100", "--mu", "100",
                     "--varphi", "0", "--out", str(tmp_path / "g.json")])
    assert code == cli.EXIT_INFEASIBLE
    assert "lambda_max" in capsys.readouterr().err
    assert not (tmp_path / "g.json").exists()


def test_gain_partial_overrides_rejected(tmp_path):
    assert cli.main(["gain", str(shipped_case_path()), "--rho", "1",
                     "--out", str(tmp_path / "g.json")]) == cli.EXIT_CONFIG


def test_compare_ranks_runs(two_runs, tmp_path, capsys):
    out = tmp_path / "ranking.csv"
    assert cli.main(["compare", *map(str, two_runs), "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == RANKING_FIELDS
    assert len(rows) == 10
    for run in ("a", "b"):
        sub = [r for r in rows if r["run"] == run]
        assert [int(r["rank"]) for r in sub] == [1, 2, 3, 4, 5]
        errs = [float(r["final_rel_err"]) for r in sub]
        assert errs == sorted(errs)
    assert out.with_suffix(".svg").is_file()
    assert cli.main(["compare", str(two_runs[0])]) == 0
    assert capsys.readouterr().out.startswith(",".join(RANKING_FIELDS))


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "powerdse.cli", "compare", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == cli.EXIT_IO
    proc = subprocess.run([sys.executable, "-m", "powerdse.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "gain" in proc.stdout
