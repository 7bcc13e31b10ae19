import csv
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from picture.cli import main
from picture.raster_io import RasterFormatError, git_blob_hash, read_raster, write_raster

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
QUICK = {"pyramid_levels": 2, "iterations_per_level": 40}


def _spec(tmp_path, **changes):
    spec = json.loads((CONFIGS / "phantom.json").read_text())
    spec.update(shape=[64, 64], inclusions=[])
    spec.update(changes)
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec))
    return p


def _json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    syn, sol = tmp / "syn", tmp / "sol"
    assert main(["synth", "--spec", str(_spec(tmp)), "--out", str(syn)]) == 0
    cfg = _json(tmp / "solver.json", QUICK)
    assert main(["solve", "--i1", str(syn / "i1.f32"), "--i2", str(syn / "i2"),
                 "--config", str(cfg), "--out", str(sol)]) == 0
    return tmp, syn, sol


# -- raster files --------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(data=arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)),
                   elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_raster_round_trip_bitwise(tmp_path_factory, data):
    stem = tmp_path_factory.mktemp("r") / "x"
    write_raster(stem, data, "strain", spacing=(0.5, 2.0))
    back = read_raster(stem)
    assert back.data.tobytes() == data.tobytes()
    assert back.header["shape"] == list(data.shape) and back.spacing == (0.5, 2.0)


def test_raster_sidecar_layout(tmp_path):
    write_raster(tmp_path / "x.f32", np.arange(6, dtype=np.float32).reshape(2, 3), "rf",
                 frequencies={"sampling_freq": 40.0, "center_freq": 8.0})
    header = json.loads((tmp_path / "x.json").read_text())
    assert header["dtype"] == "f32" and header["byte_order"] == "little"
    assert header["semantic"] == "rf" and header["shape"] == [2, 3]
    assert (tmp_path / "x.f32").read_bytes() == np.arange(6, dtype="<f4").tobytes()


def test_raster_length_validated(tmp_path):
    write_raster(tmp_path / "x", np.zeros((4, 4), np.float32), "strain")
    (tmp_path / "x.f32").write_bytes(b"\0" * 60)
    with pytest.raises(RasterFormatError):
        read_raster(tmp_path / "x")


def test_raster_bad_semantic(tmp_path):
    with pytest.raises(RasterFormatError):
        write_raster(tmp_path / "x", np.zeros((2, 2)), "pressure")


def test_git_blob_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


# -- synth ---------------------------------------------------------------------


def test_synth_outputs_and_determinism(tmp_path, pipeline):
    _, syn, _ = pipeline
    names = ["i1", "i2", "gt_w1", "gt_w2", "gt_e11", "gt_e22", "gt_epr"]
    for n in names:
        assert (syn / f"{n}.f32").exists() and (syn / f"{n}.json").exists()
    again = tmp_path / "again"
    assert main(["synth", "--spec", str(_spec(tmp_path)), "--out", str(again)]) == 0
    for n in names + ["manifest"]:
        for ext in (".f32", ".json") if n != "manifest" else (".json",):
            assert (again / f"{n}{ext}").read_bytes() == (syn / f"{n}{ext}").read_bytes()


def test_synth_seed_override(tmp_path):
    spec = _spec(tmp_path)
    main(["synth", "--spec", str(spec), "--out", str(tmp_path / "a"), "--seed", "5"])
    main(["synth", "--spec", str(spec), "--out", str(tmp_path / "b")])
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["spec"]["seed"] == 5
    assert (tmp_path / "a" / "i1.f32").read_bytes() != (tmp_path / "b" / "i1.f32").read_bytes()


def test_synth_inclusion_outside_grid(tmp_path, capsys):
    inc = {"center": [5.0, 30.0], "radius": 10.0,
           "material": {"youngs_modulus": 40.0, "poisson_ratio": 0.45}, "decay_length": 1.0}
    assert main(["synth", "--spec", str(_spec(tmp_path, inclusions=[inc])),
                 "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_synth_zero_strain_identical_frames(tmp_path):
    main(["synth", "--spec", str(_spec(tmp_path, applied_strain=0.0)), "--out", str(tmp_path / "o")])
    assert (tmp_path / "o" / "i1.f32").read_bytes() == (tmp_path / "o" / "i2.f32").read_bytes()


def test_synth_missing_spec(tmp_path):
    assert main(["synth", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


# -- solve ---------------------------------------------------------------------


def test_solve_outputs(pipeline):
    _, syn, sol = pipeline
    for n in ("w1", "w2", "e11", "e22", "epr"):
        assert read_raster(sol / n).data.shape == (64, 64)
    m = json.loads((sol / "manifest.json").read_text())
    assert m["status"] == "ok" and m["method"] == "picture"
    assert m["config"]["pyramid_levels"] == 2
    assert m["inputs"]["i1"]["payload"] == git_blob_hash((syn / "i1.f32").read_bytes())
    assert _rows(sol / "trace.csv")[0].keys() >= {"iteration", "level", "total"}


def test_solve_identical_frames(tmp_path, pipeline):
    tmp, syn, _ = pipeline
    out = tmp_path / "o"
    assert main(["solve", "--i1", str(syn / "i1"), "--i2", str(syn / "i1"),
                 "--config", str(_json(tmp_path / "c.json", QUICK)), "--out", str(out)]) == 0
    w = np.concatenate([read_raster(out / "w1").data, read_raster(out / "w2").data])
    assert np.abs(w).max() < 0.01


def test_solve_missing_file(tmp_path, pipeline):
    _, syn, _ = pipeline
    assert main(["solve", "--i1", str(tmp_path / "none.f32"), "--i2", str(syn / "i2"),
                 "--out", str(tmp_path / "o")]) == 2


def test_solve_bad_config(tmp_path, pipeline):
    _, syn, _ = pipeline
    cfg = _json(tmp_path / "c.json", {"pyramid_levels": 0})
    assert main(["solve", "--i1", str(syn / "i1"), "--i2", str(syn / "i2"),
                 "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_solve_lambda_v_override(tmp_path, pipeline):
    _, syn, _ = pipeline
    out = tmp_path / "o"
    assert main(["solve", "--i1", str(syn / "i1"), "--i2", str(syn / "i2"),
                 "--config", str(_json(tmp_path / "c.json", QUICK)), "--out", str(out),
                 "--lambda-v", "0", "--levels", "1"]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["weights"]["lambda_v"] == 0.0 and m["method"] == "no-epr"
    assert m["config"]["pyramid_levels"] == 1
    for r in _rows(out / "trace.csv"):
        assert float(r["total"]) == pytest.approx(float(r["data"]) + float(r["s1"]) + float(r["s2"]))


def test_solve_shape_mismatch(tmp_path, pipeline):
    _, syn, _ = pipeline
    write_raster(tmp_path / "small", np.zeros((32, 64), np.float32), "rf")
    assert main(["solve", "--i1", str(syn / "i1"), "--i2", str(tmp_path / "small"),
                 "--out", str(tmp_path / "o")]) == 2


def test_solve_divergence_exit_code(tmp_path, pipeline):
    _, syn, _ = pipeline
    noise = np.random.default_rng(0).standard_normal((64, 64)).astype(np.float32)
    write_raster(tmp_path / "noise", noise, "rf")
    cfg = _json(tmp_path / "c.json", {"pyramid_levels": 1, "iterations_per_level": 30,
                                      "step_size": 1e6, "init": "zero"})
    out = tmp_path / "o"
    assert main(["solve", "--i1", str(syn / "i1"), "--i2", str(tmp_path / "noise"),
                 "--config", str(cfg), "--out", str(out), "--lambda-v", "0"]) == 3
    assert len(_rows(out / "trace.csv")) >= 1
    assert json.loads((out / "manifest.json").read_text())["status"] == "diverged"


# -- eval ----------------------------------------------------------------------


def test_eval_truth_against_itself(tmp_path, pipeline):
    _, syn, _ = pipeline
    est = tmp_path / "est"
    est.mkdir()
    for n in ("e11", "e22", "epr"):
        for ext in (".f32", ".json"):
            (est / f"{n}{ext}").write_bytes((syn / f"gt_{n}{ext}").read_bytes())
    out = tmp_path / "o"
    assert main(["eval", "--est", str(est), "--truth", str(syn), "--out", str(out)]) == 0
    rows = _rows(out / "metrics.csv")
    assert [(r["field"], r["metric"]) for r in rows] == [("e11", "rmse"), ("e22", "rmse"), ("epr", "rmse")]
    assert all(float(r["mean"]) == 0.0 for r in rows)


def test_eval_with_windows(tmp_path, pipeline):
    _, syn, sol = pipeline
    win = _json(tmp_path / "w.json", {"target": [20, 20, 24, 24], "background": [20, 40, 16, 16]})
    out = tmp_path / "o"
    assert main(["eval", "--est", str(sol), "--truth", str(syn), "--windows", str(win),
                 "--out", str(out)]) == 0
    rows = _rows(out / "metrics.csv")
    keys = {(r["field"], r["metric"]) for r in rows}
    assert keys >= {("e11", "rmse"), ("e22", "rmse"), ("epr", "rmse"), ("e11", "cnr"), ("e22", "sr")}
    assert {r["method"] for r in rows} == {"picture"}
    m = json.loads((out / "manifest.json").read_text())
    assert m["display_bounds"]["e11"] == [-0.02, 0.0]
    for n in ("e11", "e22", "epr"):
        assert (out / f"{n}.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_eval_shape_mismatch(tmp_path, pipeline):
    _, syn, sol = pipeline
    est = tmp_path / "est"
    est.mkdir()
    for n in ("e11", "e22", "epr"):
        write_raster(est / n, np.zeros((32, 32), np.float32), "strain")
    assert main(["eval", "--est", str(est), "--truth", str(syn), "--out", str(tmp_path / "o")]) == 2


def test_threads_env_validated(tmp_path, monkeypatch, pipeline):
    _, syn, _ = pipeline
    monkeypatch.setenv("PICTURE_THREADS", "zero")
    assert main(["synth", "--spec", str(_spec(tmp_path)), "--out", str(tmp_path / "o")]) == 2
    monkeypatch.setenv("PICTURE_THREADS", "1")
    assert main(["synth", "--spec", str(_spec(tmp_path)), "--out", str(tmp_path / "o")]) == 0
