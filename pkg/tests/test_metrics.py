from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import scenes
from dotstereo import metrics, synth
from dotstereo.geometry import PointCloud
from dotstereo.metrics import EvalReport, SphereFit
from dotstereo.pipeline import evaluate_scene


@dataclass
class Pairs:
    left_xy: np.ndarray
    right_xy: np.ndarray

    def __len__(self):
        return len(self.left_xy)


def _sphere_points(n, centre=(3.0, -2.0, 790.0), radius=85.0, seed=0, cap=False):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    if cap:
        v[:, 2] = -np.abs(v[:, 2])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(centre) + radius * v


# -- markers -------------------------------------------------------------------------


def test_marker_mse_examples():
    truth = synth.MarkerGrid().markers()
    assert metrics.marker_mse(truth, truth) == (0.0, 0.0)
    mse, rmse = metrics.marker_mse(truth + [1.0, 0.0, 0.0], truth)
    assert mse == pytest.approx(1.0) and rmse == pytest.approx(1.0)
    mse, _ = metrics.marker_mse(truth + [0.0, 3.0, 4.0], truth)
    assert mse == pytest.approx(25.0)


def test_marker_mse_errors_and_warning():
    truth = synth.MarkerGrid().markers()
    with pytest.raises(ValueError, match="differ"):
        metrics.marker_mse(truth[:3], truth)
    with pytest.raises(ValueError, match="no markers"):
        metrics.marker_mse(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.warns(RuntimeWarning, match="expected 25"):
        metrics.marker_mse(truth[:4], truth[:4])


# -- sphere fitting --------------------------------------------------------------------


def test_sphere_fit_recovers_exact_points():
    fit = metrics.fit_sphere(_sphere_points(200, cap=True))
    assert np.allclose(fit.center, (3.0, -2.0, 790.0), atol=1e-6)
    assert fit.radius == pytest.approx(85.0, abs=1e-6) and fit.rms_residual < 1e-6


def test_sphere_fit_with_noise():
    X = _sphere_points(3000, cap=True, seed=1)
    X += np.random.default_rng(2).normal(0, 0.1, X.shape)
    fit = metrics.fit_sphere(PointCloud(X, np.zeros(len(X)), np.zeros(len(X))))
    assert abs(fit.radius - 85.0) <= 0.05
    assert fit.rms_residual == pytest.approx(0.1, rel=0.2)


@given(st.floats(10, 200), st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.floats(500, 1000)),
       st.integers(0, 1000))
def test_sphere_fit_property(radius, centre, seed):
    fit = metrics.fit_sphere(_sphere_points(50, centre, radius, seed, cap=True))
    assert fit.radius == pytest.approx(radius, rel=1e-6)
    assert np.allclose(fit.center, centre, atol=1e-6 * radius)


def test_sphere_fit_degenerate_inputs():
    with pytest.raises(ValueError, match="at least 10"):
        metrics.fit_sphere(_sphere_points(9))
    xy = np.random.default_rng(3).uniform(-50, 50, (100, 2))
    with pytest.raises(ValueError, match="coplanar"):
        metrics.fit_sphere(np.column_stack([xy, np.full(100, 800.0)]))
    with pytest.raises(ValueError):
        SphereFit((0.0, 0.0, 0.0), 0.0, 0.0)


def test_mean_distance_examples():
    fit = SphereFit((3.0, -2.0, 790.0), 85.0, 0.0)
    X = _sphere_points(100)
    assert metrics.mean_distance(X, fit) == pytest.approx(0.0, abs=1e-12)
    out = np.asarray(fit.center) + (X - fit.center) * (85.2 / 85.0)
    assert metrics.mean_distance(out, fit) == pytest.approx(0.2)
    mixed = np.asarray(fit.center) + (X - fit.center) * np.where(np.arange(100) % 2, 85.2, 84.8)[:, None] / 85.0
    assert metrics.mean_distance(mixed, fit) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        metrics.mean_distance(np.zeros((0, 3)), fit)


# -- match accuracy ----------------------------------------------------------------------


def _truth_pairs(gt, idx):
    return Pairs(gt.left_uv[idx], gt.right_uv[idx])


def test_match_accuracy_examples():
    _, _, _, gt, _ = scenes.rendered("sphere")
    assert metrics.match_accuracy(_truth_pairs(gt, gt.covisible), gt) == (1.0, 1.0)
    assert metrics.match_accuracy(Pairs(np.zeros((0, 2)), np.zeros((0, 2))), gt) == (0.0, 0.0)
    idx = gt.covisible
    shuffled = Pairs(gt.left_uv[idx], gt.right_uv[np.random.default_rng(0).permutation(idx)])
    p, r = metrics.match_accuracy(shuffled, gt)
    assert p < 0.01 and r < 0.01
    half = idx[::2]
    p, r = metrics.match_accuracy(_truth_pairs(gt, half), gt)
    assert p == 1.0 and r == pytest.approx(len(half) / len(idx))


def test_pair_truth_tolerance():
    _, _, _, gt, _ = scenes.rendered("sphere")
    idx = gt.covisible[:10]
    moved = Pairs(gt.left_uv[idx] + [0.6, 0.0], gt.right_uv[idx] - [0.0, 0.6])
    assert np.array_equal(metrics.pair_truth(moved, gt), idx)
    assert np.all(metrics.pair_truth(moved, gt, tol=0.5) == -1)


# -- reports ----------------------------------------------------------------------------


def test_report_json_round_trip():
    rep = EvalReport(0.99, 0.98, 100, 101, 99, 1, 0.1, 0.25, 0.5, 0.3,
                     SphereFit((1.0, 2.0, 3.0), 85.0, 0.2), 2, True, ["a"])
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    assert json.loads(rep.to_json())["sphere"]["radius"] == 85.0
    assert EvalReport.from_json(EvalReport().to_json()) == EvalReport()
    with pytest.raises(ValueError, match="colour"):
        EvalReport.from_dict({"colour": 1})


def test_plane_report():
    _, report, _ = scenes.evaluated("plane")
    assert report.match_recall >= 0.99 and report.match_precision >= 0.995
    assert report.rms_3d is not None and report.rms_3d < 1.0
    assert report.mse is None and report.md is None and report.sphere is None


def test_same_seed_gives_the_same_report():
    sc = scenes.small_scene(synth.Sphere(radius=60.0), noisy=True)
    a = evaluate_scene(sc, scenes.SMALL_PATTERN)
    b = evaluate_scene(sc, scenes.SMALL_PATTERN)
    assert a.to_json() == b.to_json()
    assert a.sphere is not None and abs(a.sphere.radius - 60.0) < 2.0
