from __future__ import annotations

import json

import numpy as np
import pytest
from PIL import Image

import scenes
from dotstereo import synth
from dotstereo.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from dotstereo.geometry import PointCloud
from dotstereo.metrics import EvalReport

PIPELINE_FILES = {"left.png", "right.png", "calib.json", "gt.json", "left_dots.json",
                  "right_dots.json", "corr.json", "cloud.ply", "report.json"}


@pytest.fixture
def scene_files(tmp_path):
    scene = tmp_path / "scene.json"
    scene.write_text(scenes.small_scene(synth.Sphere(radius=60.0)).to_json())
    pattern = tmp_path / "pattern.json"
    pattern.write_text(scenes.SMALL_PATTERN.to_json())
    return scene, pattern


def _run(*argv):
    return main([str(a) for a in argv])


def test_pattern_command(tmp_path):
    assert _run("pattern", tmp_path / "p.png", "--truth", tmp_path / "p.json") == EXIT_OK
    img = np.asarray(Image.open(tmp_path / "p.png"))
    assert img.shape == (768, 1024, 3)
    assert len(json.loads((tmp_path / "p.json").read_text())["dots"]) > 1000


def test_full_chain(tmp_path, scene_files):
    scene, pattern = scene_files
    t = tmp_path
    assert _run("render", scene, pattern, t / "l.png", t / "r.png", t / "gt.json",
                "--calib-out", t / "calib.json") == EXIT_OK
    assert _run("extract", t / "l.png", t / "l.json") == EXIT_OK
    assert _run("extract", t / "r.png", t / "r.json", "--source", "right") == EXIT_OK
    assert _run("match", t / "l.json", t / "r.json", t / "corr.json") == EXIT_OK
    assert _run("match", t / "l.json", t / "r.json", t / "corr.csv") == EXIT_OK
    assert (t / "corr.csv").read_text().startswith("lx,ly,rx,ry,color\n")
    assert _run("reconstruct", t / "corr.json", t / "calib.json", t / "cloud.ply",
                "--upsample", "1.0", t / "grid.csv") == EXIT_OK
    assert _run("reconstruct", t / "corr.json", t / "calib.json", t / "cloud.csv",
                "--method", "disparity") == EXIT_OK
    assert (t / "grid.csv").read_text().startswith("x0,y0,spacing,nx,ny\n")
    assert len(PointCloud.from_ply((t / "cloud.ply").read_text())) > 50
    assert _run("evaluate", "--gt", t / "gt.json", "--cloud", t / "cloud.csv", "--corr",
                t / "corr.json", "--fit", "sphere", "--out", t / "report.json") == EXIT_OK
    report = EvalReport.from_json((t / "report.json").read_text())
    assert report.match_precision == 1.0 and report.match_recall == 1.0
    assert abs(report.sphere.radius - 60.0) < 1.0


def test_debug_masks(tmp_path):
    _, left, _, _, _ = scenes.rendered("sphere")
    Image.fromarray(left).save(tmp_path / "left.ppm")  # PPM input path
    assert _run("extract", tmp_path / "left.ppm", tmp_path / "d.json",
                "--debug-masks", tmp_path / "masks") == EXIT_OK
    names = {p.name for p in (tmp_path / "masks").iterdir()}
    assert names == {"R.png", "C_r.png", "C_g.png", "C_b.png", "D.png", "V_prime.png"}
    for name in names:
        m = np.asarray(Image.open(tmp_path / "masks" / name))
        assert m.shape == left.shape[:2]
    roi = np.asarray(Image.open(tmp_path / "masks" / "R.png"))
    assert set(np.unique(roi)) <= {0, 255}


def test_black_image_reports_roi_failure(tmp_path, capsys):
    Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(tmp_path / "black.png")
    assert _run("extract", tmp_path / "black.png", tmp_path / "o.json") == EXIT_DATA
    assert "ROI threshold not found" in capsys.readouterr().err
    assert not (tmp_path / "o.json").exists()


def test_pipeline_on_a_scene_is_byte_identical_on_rerun(tmp_path, scene_files):
    scene, pattern = scene_files
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run("pipeline", out, "--scene", scene, "--pattern", pattern) == EXIT_OK
    assert {p.name for p in a.iterdir()} == PIPELINE_FILES
    for name in PIPELINE_FILES:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    report = EvalReport.from_json((a / "report.json").read_text())
    assert report.sphere is not None and report.match_recall == 1.0


def test_pipeline_on_images(tmp_path, scene_files):
    scene, pattern = scene_files
    t = tmp_path
    assert _run("render", scene, pattern, t / "l.png", t / "r.png", t / "gt.json",
                "--calib-out", t / "calib.json") == EXIT_OK
    out = t / "run"
    assert _run("pipeline", out, "--left", t / "l.png", "--right", t / "r.png",
                "--calib", t / "calib.json") == EXIT_OK
    assert {p.name for p in out.iterdir()} == PIPELINE_FILES - {"gt.json", "report.json"}


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        _run("extract")
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        _run("frobnicate")
    assert exc.value.code == EXIT_USAGE
    assert _run("pipeline", tmp_path / "o") == EXIT_USAGE
    assert _run("evaluate", "--gt", tmp_path / "missing.json", "--out", tmp_path / "r.json") == EXIT_DATA
    assert "no such file" in capsys.readouterr().err


def test_bad_upsample_spacing_is_a_usage_error(tmp_path, scene_files):
    scene, pattern = scene_files
    t = tmp_path
    _run("pipeline", t / "run", "--scene", scene, "--pattern", pattern)
    assert _run("reconstruct", t / "run" / "corr.json", t / "run" / "calib.json", t / "c.ply",
                "--upsample", "fine", t / "g.csv") == EXIT_USAGE
    assert _run("evaluate", "--gt", t / "run" / "gt.json", "--fit", "sphere",
                "--out", t / "r.json") == EXIT_USAGE


def test_malformed_json_names_the_problem(tmp_path, capsys):
    _, left, _, _, _ = scenes.rendered("sphere")
    Image.fromarray(left).save(tmp_path / "l.png")
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"filterr": "box"}')
    assert _run("extract", tmp_path / "l.png", tmp_path / "o.json", "--config", cfg) == EXIT_DATA
    assert "filterr" in capsys.readouterr().err
    cfg.write_text('{"filter": "box",')
    assert _run("extract", tmp_path / "l.png", tmp_path / "o.json", "--config", cfg) == EXIT_DATA
    assert "malformed" in capsys.readouterr().err
    scene = tmp_path / "scene.json"
    scene.write_text('{"surface": {"kind": "sphere", "radius": 50, "colour": 1}}')
    assert _run("pipeline", tmp_path / "o", "--scene", scene) == EXIT_DATA
    assert "colour" in capsys.readouterr().err


def test_degenerate_scene_is_a_data_error(tmp_path, capsys):
    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps({"surface": {"kind": "plane", "normal": [0, 0, 1], "d": -50}}))
    assert _run("pipeline", tmp_path / "o", "--scene", scene) == EXIT_DATA
    assert "render failed" in capsys.readouterr().err
