from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lpfeedback.cli import ConfigError, RunConfig, load_config, main, read_points

SYS_A = {"n": 1, "m": 1, "f": ["0"], "g": [["1"]], "epsilon": "x1^2", "Q": [["1"]]}


def _config(tmp_path, **blocks):
    raw = {"system": SYS_A, "local": {"delta_candidates": [0.04]}, "atlas": {"tau_max": 2.6, "n_tau": 201}}
    raw.update(blocks)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw))
    return path


def _points(tmp_path, rows, name="pts.csv", header="x1"):
    path = tmp_path / name
    path.write_text(header + "\n" + "".join(f"{r}\n" for r in rows))
    return path


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def atlas_file(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp, simulate={"x0": [1.5, [-1.0]]})
    out = tmp / "atlas.jsonl"
    assert main(["synthesize", "--config", str(cfg), "--out", str(out)]) == 0
    return tmp, cfg, out


def test_synthesize_report(atlas_file):
    _, _, out = atlas_file
    report = json.loads(out.with_name("atlas.jsonl.report.json").read_text())
    assert report["delta"] == 0.04 and report["rays"] == 2 and report["caustics"] == 0


def test_eval_closed_form(atlas_file, tmp_path):
    _, _, out = atlas_file
    pts = _points(tmp_path, [0.4, -1.2, 0.1])
    res = tmp_path / "eval.csv"
    assert main(["eval", "--atlas", str(out), "--points", str(pts), "--out", str(res)]) == 0
    rows = _read(res)
    assert float(rows[0]["B"]) == pytest.approx(0.12, abs=1e-10)
    assert float(rows[1]["dB1"]) == pytest.approx(-2.4, abs=1e-8)
    assert rows[2]["status"] == "outside region" and rows[2]["B"] == "nan"


def test_eval_with_k(atlas_file, tmp_path):
    _, _, out = atlas_file
    pts = _points(tmp_path, [0.5])
    res = tmp_path / "eval.csv"
    assert main(["eval", "--atlas", str(out), "--points", str(pts), "--out", str(res), "--k", "50"]) == 0
    row = _read(res)[0]
    assert row["B_k"] == row["B"] and row["in_bump"] == "0"


def test_feedback_and_threads(atlas_file, tmp_path, monkeypatch):
    _, _, out = atlas_file
    pts = _points(tmp_path, [1.0, 0.1, 0.0, 30.0])
    res = tmp_path / "u.csv"
    monkeypatch.setenv("LPFEEDBACK_THREADS", "3")
    assert main(["feedback", "--atlas", str(out), "--points", str(pts), "--out", str(res)]) == 0
    rows = _read(res)
    assert [r["region"] for r in rows] == ["outer", "inner", "inner", "outer"]
    assert float(rows[0]["u1"]) == pytest.approx(-1.0, rel=1e-8)
    assert float(rows[1]["u1"]) == pytest.approx(-0.1, rel=1e-12)
    assert rows[3]["status"] == "outside synthesized region"


def test_simulate(atlas_file, tmp_path):
    _, cfg, out = atlas_file
    d = tmp_path / "sim"
    assert main(["simulate", "--atlas", str(out), "--config", str(cfg), "--out", str(d)]) == 0
    summary = _read(d / "summary.csv")
    assert len(summary) == 2 and all(r["stabilized"] == "1" for r in summary)
    assert float(summary[0]["cost_to_level"]) == pytest.approx(1.5 ** 2 - 0.04, rel=1e-7)
    traj = _read(d / "trajectory_001.csv")
    assert float(traj[0]["x1"]) == -1.0


def test_check_and_corruption(atlas_file, tmp_path):
    _, _, out = atlas_file
    rep = tmp_path / "check.json"
    assert main(["check", "--atlas", str(out), "--out", str(rep)]) == 0
    assert json.loads(rep.read_text())["ok"] is True
    lines = out.read_text().splitlines()
    rec = json.loads(lines[58])
    rec["S"] *= 1.01
    lines[58] = json.dumps(rec)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["check", "--atlas", str(bad), "--out", str(rep)]) == 5
    doc = json.loads(rep.read_text())
    assert "dynamic programming along rays" in doc["hard_failures"]


def test_caustics_export_empty(atlas_file, tmp_path):
    _, _, out = atlas_file
    res = tmp_path / "c.csv"
    assert main(["caustics", "--atlas", str(out), "--out", str(res)]) == 0
    assert res.read_text().splitlines() == ["x1,p1,S,detX,sheet,tau,kind,in_crb"]


def test_maslov_command(atlas_file, tmp_path):
    _, _, out = atlas_file
    pts = _points(tmp_path, [0.7, 0.05])
    res = tmp_path / "m.csv"
    assert main(["maslov", "--atlas", str(out), "--points", str(pts), "--out", str(res), "--k", "20"]) == 0
    rows = _read(res)
    assert float(rows[0]["B_k"]) == pytest.approx(0.49 - 0.04, abs=1e-10)
    assert rows[1]["status"] != "ok"


def test_empty_points_header_only(atlas_file, tmp_path):
    _, _, out = atlas_file
    pts = _points(tmp_path, [])
    res = tmp_path / "e.csv"
    assert main(["eval", "--atlas", str(out), "--points", str(pts), "--out", str(res)]) == 0
    assert len(res.read_text().splitlines()) == 1


@pytest.mark.parametrize("raw,where", [
    ({"system": SYS_A, "atlas": {"tau_max": -1}}, "config.atlas.tau_max"),
    ({"system": {**SYS_A, "f": "x1"}}, "config.system.f"),
    ({"system": SYS_A, "bogus": {}}, "config"),
    ({"system": SYS_A, "simulate": {"x0": [[1, 2]]}}, "config.simulate.x0[0]"),
    ({"system": SYS_A, "local": {"delta_candidates": []}}, "config.local.delta_candidates"),
    ({"atlas": {}}, "config.system"),
])
def test_config_errors_are_located(raw, where):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(raw)
    assert str(info.value).startswith(where)


def test_config_round_trip(tmp_path):
    cfg = load_config(_config(tmp_path, maslov={"k": 300}))
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.maslov.k == 300


def test_exit_codes(tmp_path):
    bad_json = tmp_path / "bad.json"
    bad_json.write_text('{"system": \n  [}')
    assert main(["synthesize", "--config", str(bad_json), "--out", str(tmp_path / "a")]) == 2
    assert main(["synthesize", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "a")]) == 1
    assert main(["eval", "--atlas", str(tmp_path / "missing.jsonl"), "--points", "p.csv"]) == 1
    nonsense = tmp_path / "x.jsonl"
    nonsense.write_text("garbage\n")
    assert main(["eval", "--atlas", str(nonsense), "--points", "p.csv"]) == 4
    bad_sys = _config(tmp_path, system={**SYS_A, "f": ["1"]})
    assert main(["synthesize", "--config", str(bad_sys), "--out", str(tmp_path / "a")]) == 2
    unstab = _config(tmp_path, system={**SYS_A, "g": [["0"]]})
    assert main(["synthesize", "--config", str(unstab), "--out", str(tmp_path / "a")]) == 3


def test_read_points_columns(tmp_path):
    p = _points(tmp_path, ["9,1,2"], header="id,x1,x2")
    np.testing.assert_array_equal(read_points(p, 2), [[1.0, 2.0]])
    q = _points(tmp_path, ["1,oops"], name="q.csv", header="a,b")
    with pytest.raises(ConfigError, match=":2:"):
        read_points(q, 2)


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "lpfeedback.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synthesize", "eval", "feedback", "simulate", "caustics", "maslov", "check"):
        assert cmd in out.stdout
