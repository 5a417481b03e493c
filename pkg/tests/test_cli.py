import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

from xpbi.cli import main
from xpbi.scene_io import read_frame


def _scene(tmp_path, **over):
    d = {
        "version": 1, "name": "tiny", "dim": 2, "particle_radius": 0.02,
        "materials": {"jelly": {"model": "elastic", "params": [1000, 1e4, 0.3]}},
        "geometry": [{"shape": {"type": "box", "min": [0, 0.05], "max": [0.2, 0.2]},
                      "material": "jelly", "sampler": "lattice"}],
        "colliders": [{"shape": {"type": "half_space", "point": [0, 0], "normal": [0, 1]}, "friction": 0.5}],
        "solver": {"dt": 2e-3, "iterations": 5},
        "duration": 0.02, "frame_rate": 100,
    }
    d.update(over)
    p = tmp_path / "scene.json"
    p.write_text(json.dumps(d))
    return p


def _invoke(args):
    return CliRunner().invoke(main, args, catch_exceptions=False)


def _rundirs(out):
    return sorted(p for p in out.iterdir() if p.is_dir())


def test_run_writes_outputs(tmp_path):
    scene = _scene(tmp_path)
    out = tmp_path / "runs"
    res = _invoke(["run", "--scene", str(scene), "--out", str(out), "--threads", "1"])
    assert res.exit_code == 0, res.output
    (rd,) = _rundirs(out)
    man = json.loads((rd / "manifest.json").read_text())
    assert man["status"] == "completed"
    assert man["effective"]["dt"] == 2e-3 and man["overrides"]["threads"] == 1
    frames = sorted(rd.glob("frame_*.bin"))
    assert len(frames) == 2
    fr = read_frame(frames[-1])
    assert fr.step == 10 and fr.count == 80
    rows = list(csv.reader(open(rd / "metrics.csv")))
    assert rows[0][:6] == ["step", "time", "nn_mean", "nn_std", "max_density", "residual_final"]
    assert len(rows) == 3
    diag = list(csv.reader(open(rd / "diagnostics.csv")))
    assert diag[0][:3] == ["step", "iteration", "residual"]
    assert (rd / "scene.json").exists()
    # a rerun never overwrites
    assert _invoke(["run", "--scene", str(scene), "--out", str(out), "--threads", "1"]).exit_code == 0
    assert len(_rundirs(out)) == 2


def test_runs_are_bitwise_identical(tmp_path):
    scene = _scene(tmp_path)
    out = tmp_path / "runs"
    for _ in range(2):
        assert _invoke(["run", "--scene", str(scene), "--out", str(out), "--threads", "1"]).exit_code == 0
    a, b = _rundirs(out)
    for fa in sorted(a.glob("frame_*.bin")):
        assert fa.read_bytes() == (b / fa.name).read_bytes()


def test_overrides_and_csv_frames(tmp_path):
    scene = _scene(tmp_path)
    out = tmp_path / "runs"
    res = _invoke(["run", "--scene", str(scene), "--out", str(out), "--threads", "1", "--dt", "1e-3",
                   "--iters", "3", "--backend", "jacobi", "--frames", "1", "--csv-frames", "--seed", "4"])
    assert res.exit_code == 0, res.output
    (rd,) = _rundirs(out)
    man = json.loads((rd / "manifest.json").read_text())
    assert man["effective"] == {"dt": 1e-3, "iterations": 3, "backend": "jacobi", "seed": 4, "frames": 1}
    fr = read_frame(rd / "frame_00001.csv")
    assert fr.step == 10


def test_parse_error_exit_code(tmp_path):
    d = json.loads(_scene(tmp_path).read_text())
    d["materials"]["jelly"]["model"] = "XYZ"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    res = CliRunner().invoke(main, ["run", "--scene", str(bad), "--out", str(tmp_path / "r")])
    assert res.exit_code == 2
    assert "materials.jelly.model" in res.output
    res = CliRunner().invoke(main, ["run", "--scene", "nope_not_here", "--out", str(tmp_path / "r")])
    assert res.exit_code == 2
    res = CliRunner().invoke(main, ["run", "--scene", str(bad), "--threads", "0"])
    assert res.exit_code == 2


def test_runtime_failure_exit_code(tmp_path):
    scene = _scene(tmp_path, solver={"dt": 10.0, "iterations": 1})
    d = json.loads(scene.read_text())
    d["geometry"][0]["velocity"] = [1e308, 0]
    scene.write_text(json.dumps(d))
    out = tmp_path / "runs"
    res = CliRunner().invoke(main, ["run", "--scene", str(scene), "--out", str(out), "--threads", "1"])
    assert res.exit_code == 1
    (rd,) = _rundirs(out)
    assert json.loads((rd / "manifest.json").read_text())["status"] == "failed"
    assert "particles" in json.loads((rd / "failure.json").read_text())["snapshot"]
    blocker = tmp_path / "file"
    blocker.write_text("")
    res = CliRunner().invoke(main, ["run", "--scene", str(_scene(tmp_path)), "--out", str(blocker / "sub")])
    assert res.exit_code == 1


def test_metrics_recompute(tmp_path):
    out = tmp_path / "runs"
    _invoke(["run", "--scene", str(_scene(tmp_path)), "--out", str(out), "--threads", "1"])
    (rd,) = _rundirs(out)
    res = _invoke(["metrics", "--run", str(rd)])
    assert res.exit_code == 0
    orig = list(csv.reader(open(rd / "metrics.csv")))[1:]
    again = list(csv.reader(open(rd / "metrics_recomputed.csv")))[1:]
    for a, b in zip(orig, again):
        assert a[:5] == b[:5]


def test_study_iterations(tmp_path):
    out = tmp_path / "study.csv"
    res = _invoke(["study", "--scene", "cantilever_e1e4", "--out", str(out), "--iters", "8", "--threads", "1"])
    assert res.exit_code == 0
    rows = list(csv.DictReader(open(out)))
    assert {r["backend"] for r in rows} == {"gs", "jacobi"}
    assert sum(r["backend"] == "gs" for r in rows) == 9
    gs = [float(r["relative_residual"]) for r in rows if r["backend"] == "gs"]
    assert gs[0] == 1.0 and gs[-1] < gs[0]


def test_study_dt(tmp_path):
    out = tmp_path / "dt.csv"
    res = _invoke(["study", "--scene", str(_scene(tmp_path)), "--kind", "dt", "--dts", "1e-3,2e-3",
                   "--duration", "0.01", "--out", str(out), "--threads", "1"])
    assert res.exit_code == 0, res.output
    rows = list(csv.reader(open(out)))
    assert len(rows) >= 2


def test_jacobi_on_stiff_cantilever_is_flagged(tmp_path):
    out = tmp_path / "runs"
    res = _invoke(["run", "--scene", "cantilever_e1e6", "--backend", "jacobi", "--dt", "5e-3",
                   "--frames", "1", "--out", str(out), "--threads", "1"])
    assert res.exit_code == 0
    (rd,) = _rundirs(out)
    row = list(csv.DictReader(open(rd / "metrics.csv")))[0]
    assert float(row["residual_final"]) > 1e-2 and row["residual_flag"] == "1"
    assert "residual above" in res.output
