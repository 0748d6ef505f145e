import csv
import json

import numpy as np
import pytest

from vloc.cli import main
from vloc.mapbuild.io import deserialize_model


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("scene", "--out", d / "survey.json", "--length", 15, "--seed", 2) == 0
    assert run("scene", "--out", d / "query.json", "--kind", "same_day", "--length", 15, "--seed", 2,
               "--frame-count", 200) == 0
    assert run("build", "--frames", d / "survey.json", "--out", d / "m.vmap") == 0
    assert run("align", "--in", d / "m.vmap", "--control-points", d / "m.control.csv", "--out", d / "a.vmap") == 0
    return d


def test_build_writes_model_and_control_points(workdir):
    m = deserialize_model(workdir / "m.vmap")
    assert len(m.points) > 100 and m.alignment is None
    rows = list(csv.reader(open(workdir / "m.control.csv")))
    assert len(rows) - 1 == len(m.frame_poses)
    assert deserialize_model(workdir / "a.vmap").alignment is not None


def test_compress_shrinks(workdir, capsys):
    assert run("compress", "--in", workdir / "a.vmap", "--out", workdir / "c.vmap", "--min-frames", 10,
               "--mean-descriptors") == 0
    c = deserialize_model(workdir / "c.vmap")
    assert c.descriptor_count == len(c.points)
    assert (workdir / "c.vmap").stat().st_size < (workdir / "a.vmap").stat().st_size
    assert "descriptors" in capsys.readouterr().out


def test_localize_and_eval(workdir):
    d = workdir
    assert run("localize", "--model", d / "a.vmap", "--frames", d / "query.json", "--out", d / "poses.csv") == 0
    assert (d / "poses.truth.csv").exists() and (d / "poses_trajectory.png").stat().st_size > 1000
    assert run("eval", "--poses", d / "poses.csv", "--truth", d / "poses.truth.csv", "--model", d / "a.vmap",
               "--out", d / "cdf.csv") == 0
    summary = dict(csv.reader(open(d / "cdf_summary.csv")))
    assert float(summary["median"]) < 0.5 and int(summary["count"]) > 150
    assert (d / "cdf_cdf.png").exists()
    frac = [float(r["fraction"]) for r in csv.DictReader(open(d / "cdf.csv"))]
    assert np.all(np.diff(frac) > 0) and frac[-1] == 1.0


def test_localize_reproducible(workdir):
    d = workdir
    for name in ("p1.csv", "p2.csv"):
        assert run("localize", "--model", d / "a.vmap", "--frames", d / "query.json", "--out", d / name) == 0
    assert (d / "p1.csv").read_bytes() == (d / "p2.csv").read_bytes()


def test_eval_unaligned_model_is_error(workdir, capsys):
    d = workdir
    if not (d / "poses.csv").exists():
        run("localize", "--model", d / "a.vmap", "--frames", d / "query.json", "--out", d / "poses.csv")
    code = run("eval", "--poses", d / "poses.csv", "--truth", d / "poses.truth.csv", "--model", d / "m.vmap",
               "--out", d / "bad.csv")
    assert code == 2 and "alignment" in capsys.readouterr().err


def test_missing_input_is_error(tmp_path, capsys):
    assert run("compress", "--in", tmp_path / "nope.vmap", "--out", tmp_path / "x.vmap") == 2
    assert "error" in capsys.readouterr().err


def test_bad_experiment_config(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
    assert run("experiment", "--name", "benchmark_same_day", "--config", tmp_path / "c.json",
               "--out-dir", tmp_path / "o") == 2
    assert "bogus" in capsys.readouterr().err


def test_experiment_cli(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"corridor_length": 15.0, "frame_count": 120, "threads": 1}))
    assert run("experiment", "--name", "benchmark_same_day", "--config", tmp_path / "c.json", "--seed", 3,
               "--out-dir", tmp_path / "o") == 0
    for name in ("poses.csv", "report.csv", "summary.csv", "error_cdf.png", "model.vmap"):
        assert (tmp_path / "o" / name).exists()


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as e:
        main(["build"])
    assert e.value.code == 2
