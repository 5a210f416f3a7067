"""End-to-end runs: two images to a point cloud, and synthetic scenes to a report."""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry, metrics
from .config import PipelineConfig
from .dots import DotSet
from .extraction import ExtractionArtifacts, extract
from .geometry import PointCloud, StereoCalibration
from .matching import MappingField, MatchResult, match_views
from .metrics import EvalReport
from .pattern import PatternSpec
from .synth import GroundTruth, MarkerGrid, SceneSpec, Sphere, render_stereo


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineRun:
    left_dots: DotSet
    right_dots: DotSet
    left_artifacts: ExtractionArtifacts
    right_artifacts: ExtractionArtifacts
    match: MatchResult
    cloud: PointCloud
    seconds: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def triangulate_cloud(corr, calib: StereoCalibration, config: PipelineConfig) -> PointCloud:
    if config.method == "disparity":
        return geometry.reconstruct_disparity(corr, calib.left, calib.right)
    return geometry.reconstruct(corr, calib.left, calib.right, config.method, config.residual_gate)


def run_pipeline(left_img: np.ndarray, right_img: np.ndarray, calib: StereoCalibration,
                 config: PipelineConfig = PipelineConfig()) -> PipelineRun:
    """Extract both views concurrently, match them and triangulate."""
    seconds = {}
    t0 = time.perf_counter()
    try:
        with ThreadPoolExecutor(max_workers=2) as pool:
            fl = pool.submit(extract, left_img, config.extract, "left")
            fr = pool.submit(extract, right_img, config.extract, "right")
            (dl, al), (dr, ar) = fl.result(), fr.result()
    except ValueError as exc:
        raise StageError("extract", exc) from exc
    seconds["extract"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        res = match_views(dl, dr, al, ar, config.match)
    except ValueError as exc:
        raise StageError("match", exc) from exc
    seconds["match"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            cloud = triangulate_cloud(res.correspondences, calib, config)
        except ValueError as exc:
            raise StageError("reconstruct", exc) from exc
    seconds["reconstruct"] = time.perf_counter() - t0
    return PipelineRun(dl, dr, al, ar, res, cloud, seconds, [str(w.message) for w in caught])


def transfer_markers(markers: np.ndarray, corr, calib: StereoCalibration,
                     method: str = "analytic") -> np.ndarray:
    """Reconstruct marker points from their left-image positions.

    The right-image position of each marker comes from the left-to-right
    map interpolated through all matched dots, then both rays are
    intersected.
    """
    uv_left = calib.left.project(markers)
    field = MappingField(corr.left_xy, corr.right_xy)
    uv_right, _ = field(uv_left)
    tri = "analytic" if method == "disparity" else method
    pts, _, ok = geometry.triangulate(calib.left, calib.right, uv_left, uv_right, tri)
    pts[~ok] = np.nan
    return pts


def score_run(run: PipelineRun, scene: SceneSpec, gt: GroundTruth,
              config: PipelineConfig = PipelineConfig()) -> EvalReport:
    corr = run.match.correspondences
    precision, recall = metrics.match_accuracy(corr, gt)
    truth = metrics.pair_truth(corr, gt)
    report = EvalReport(precision, recall, len(corr), len(gt.covisible), len(run.cloud),
                        run.cloud.dropped, cycles=run.match.cycles, converged=run.match.converged,
                        warnings=list(run.warnings))
    if len(run.cloud):
        g = truth[run.cloud.source_index]
        ok = g >= 0
        if ok.any():
            err = run.cloud.xyz[ok] - gt.points[g[ok]]
            report.rms_3d = float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
    if isinstance(scene.surface, MarkerGrid):
        try:
            recon = transfer_markers(gt.markers, corr, scene.calibration, config.method)
            report.mse, report.rmse = metrics.marker_mse(recon, gt.markers)
        except ValueError as exc:
            report.warnings.append(f"markers: {exc}")
    if isinstance(scene.surface, Sphere):
        try:
            fit = metrics.fit_sphere(run.cloud)
            report.sphere = fit
            report.md = metrics.mean_distance(run.cloud, fit)
        except ValueError as exc:
            report.warnings.append(f"sphere: {exc}")
    return report


def evaluate_scene(scene: SceneSpec, pattern: PatternSpec = PatternSpec(),
                   config: PipelineConfig | None = None) -> EvalReport:
    """Render a synthetic scene, run the pipeline on it and score the result."""
    config = config or PipelineConfig()
    try:
        left, right, gt = render_stereo(scene, pattern)
    except ValueError as exc:
        raise StageError("render", exc) from exc
    run = run_pipeline(left, right, scene.calibration, config)
    return score_run(run, scene, gt, config)
