from __future__ import annotations

import json

import numpy as np
import pytest

import scenes
from dotstereo import synth
from dotstereo.dots import RGB, Color
from dotstereo.geometry import CameraModel, is_rectified
from dotstereo.pattern import PatternSpec, pattern_ground_truth

SURFACES = [
    synth.Plane(normal=(0.1, -0.06, 1.0), d=805.0),
    synth.Sphere(center=(0.0, 0.0, 800.0), radius=85.0),
    synth.Cone(),
    synth.MarkerGrid(center=(4.0, -3.0, 812.0), normal=(0.1, -0.06, 1.0)),
]


def _gt(surface, **kw):
    return synth.ground_truth(synth.SceneSpec(surface, **kw), PatternSpec())


@pytest.mark.parametrize("surface", SURFACES, ids=lambda s: s.kind)
def test_ground_truth_points_lie_on_the_surface(surface):
    gt = _gt(surface)
    X = gt.points[gt.hit]
    assert len(X) > 100
    assert np.abs(surface.implicit(X)).max() < 1e-9 * 1000


@pytest.mark.parametrize("surface", SURFACES, ids=lambda s: s.kind)
def test_ground_truth_projections_are_consistent(surface):
    sc = synth.SceneSpec(surface)
    gt = synth.ground_truth(sc, PatternSpec())
    for cam, uv, vis in ((sc.left, gt.left_uv, gt.visible_left),
                         (sc.right, gt.right_uv, gt.visible_right)):
        assert np.allclose(cam.project(gt.points[vis]), uv[vis], atol=1e-9)
        assert np.isnan(uv[~vis]).all()
    # projecting back through the projector lands on the lattice centres
    lat = pattern_ground_truth(PatternSpec())
    assert np.allclose(sc.projector.project(gt.points[gt.hit]), lat.xy[gt.hit], atol=1e-9)
    assert set(gt.covisible) <= set(gt.shared)


def test_sphere_ground_truth_distance_to_centre():
    gt = _gt(synth.Sphere(center=(0.0, 0.0, 800.0), radius=85.0))
    d = np.linalg.norm(gt.points[gt.hit] - [0.0, 0.0, 800.0], axis=1)
    assert np.abs(d - 85.0).max() <= 1e-9


def test_sphere_far_side_is_hidden():
    gt = _gt(synth.Sphere(center=(0.0, 0.0, 800.0), radius=85.0))
    # every hit faces the projector: the near cap only
    assert np.all(gt.points[gt.hit][:, 2] < 800.0)
    assert (gt.visible_left & ~gt.complete_left).any()  # dots cut by the limb


def test_wide_baseline_front_plane_is_almost_fully_covisible():
    _, left, right = synth.default_rig(baseline=200.0)
    gt = synth.ground_truth(synth.SceneSpec(synth.Plane(), left=left, right=right), PatternSpec())
    assert len(gt.covisible) >= 0.99 * gt.hit.sum()


def test_default_rig_is_rectified_with_a_non_integer_scale():
    projector, left, right = synth.default_rig()
    assert is_rectified(left, right)
    assert right.centre[0] - left.centre[0] == pytest.approx(60.0)
    ratio = left.fx / projector.fx
    assert ratio != round(ratio)
    assert left.size == synth.CAMERA_SIZE


def test_markers_form_a_planar_grid():
    grid = synth.MarkerGrid(center=(4.0, -3.0, 812.0), normal=(0.1, -0.06, 1.0), spacing=50.0)
    m = grid.markers()
    assert m.shape == (25, 3)
    assert np.abs(grid.implicit(m)).max() < 1e-9
    assert np.allclose(m.mean(axis=0), grid.center)
    step = np.linalg.norm(np.diff(m.reshape(5, 5, 3), axis=1), axis=2)
    assert np.allclose(step, 50.0)


def test_rendered_dot_centres_carry_their_colour():
    _, left, _, gt, _ = scenes.rendered("sphere")
    idx = np.flatnonzero(gt.complete_left)
    uv = np.rint(gt.left_uv[idx]).astype(int)
    px = left[uv[:, 1], uv[:, 0]].astype(int)
    assert np.all(np.argmax(px, axis=1) == gt.color[idx])
    background = left[0, 0]
    assert np.all(background == background[0])


def test_rendering_is_deterministic_per_seed():
    sc = scenes.small_scene(noisy=True)
    a = synth.render_stereo(sc, scenes.SMALL_PATTERN)
    b = synth.render_stereo(sc, scenes.SMALL_PATTERN)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = synth.render_stereo(scenes.small_scene(noisy=True, seed=99), scenes.SMALL_PATTERN)
    assert not np.array_equal(a[0], c[0])
    assert a[0].dtype == np.uint8 and a[0].shape == (480, 640, 3)


def test_unlit_pixels_show_only_ambient_light():
    sc = scenes.small_scene(synth.Sphere(radius=60.0))
    left = synth.render_view(sc, scenes.SMALL_PATTERN, "left")
    assert np.all(left[0, 0] == int(sc.ambient))
    assert left.max() == 255  # saturated dot cores


def test_degenerate_scenes_are_rejected():
    with pytest.raises(ValueError, match="not in front"):
        synth.ground_truth(synth.SceneSpec(synth.Plane(d=-100.0)), PatternSpec())
    proj, left, _ = synth.default_rig()
    # a right camera looking away from the lit area
    away = CameraModel.looking_from((30.0, 0.0, 0.0), 2400.0, cx=1023.5, cy=767.5,
                                    width=2048, height=1536,
                                    rotation=np.array([[-1.0, 0, 0], [0, 1.0, 0], [0, 0, -1.0]]))
    with pytest.raises(ValueError, match="degenerate scene"):
        synth.render_stereo(synth.SceneSpec(synth.Plane(), proj, left, away), PatternSpec())


@pytest.mark.parametrize("kw, msg", [
    ({"noise_sigma": -1.0}, ">= 0"),
    ({"exposure": 0.0}, "exposure"),
    ({"left": CameraModel(1.0, 1.0, 0.0, 0.0)}, "image size"),
])
def test_scene_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        synth.SceneSpec(**kw)


def test_surface_validation():
    with pytest.raises(ValueError):
        synth.Sphere(radius=0.0)
    with pytest.raises(ValueError):
        synth.Cone(half_angle=2.0)
    with pytest.raises(ValueError):
        synth.MarkerGrid(count=0)
    with pytest.raises(ValueError, match="unknown surface"):
        synth.surface_from_dict({"kind": "torus"})
    with pytest.raises(ValueError, match="wobble"):
        synth.surface_from_dict({"kind": "plane", "wobble": 1})


@pytest.mark.parametrize("surface", SURFACES, ids=lambda s: s.kind)
def test_scene_json_round_trip(surface):
    sc = synth.SceneSpec(surface, noise_sigma=1.5, blur_sigma=0.5, seed=11)
    back = synth.SceneSpec.from_json(sc.to_json())
    # unit normals may move by an ulp when re-normalised, then stay put
    assert synth.SceneSpec.from_json(back.to_json()).to_json() == back.to_json()
    a, b = sc.to_dict(), back.to_dict()
    assert a.keys() == b.keys()
    for key, value in a["surface"].items():
        assert b["surface"][key] == (value if isinstance(value, str) else pytest.approx(value, abs=1e-12))
    assert {k: v for k, v in a.items() if k != "surface"} == {k: v for k, v in b.items() if k != "surface"}


def test_scene_json_errors():
    with pytest.raises(ValueError, match="malformed"):
        synth.SceneSpec.from_json("{")
    with pytest.raises(ValueError, match="colour"):
        synth.SceneSpec.from_dict({"colour": 1})


def test_ground_truth_json_round_trip():
    gt = _gt(synth.MarkerGrid(center=(4.0, -3.0, 812.0), normal=(0.1, -0.06, 1.0)))
    back = synth.GroundTruth.from_json(gt.to_json())
    for name in ("points", "left_uv", "right_uv"):
        assert np.array_equal(getattr(back, name), getattr(gt, name), equal_nan=True)
    for name in ("color", "block", "visible_left", "visible_right", "complete_left",
                 "complete_right", "markers"):
        assert np.array_equal(getattr(back, name), getattr(gt, name))
    d = json.loads(gt.to_json())
    assert d["dots3d"][0]["color"] in {"red", "green", "blue"}
    assert d["covisible"] == gt.covisible.tolist()


def test_view_indexes_back_into_the_ground_truth():
    gt = _gt(synth.Sphere())
    view = gt.view("right")
    idx = view.meta["index"]
    assert np.array_equal(view.xy, gt.right_uv[idx]) and np.all(gt.visible_right[idx])


def test_rgb_primaries():
    assert RGB[Color.RED] == (255, 0, 0) and RGB[Color.GREEN] == (0, 255, 0)
