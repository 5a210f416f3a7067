"""Command-line entry point: ``dotstereo <command> ...``.

Exit codes: 0 success, 1 usage error, 2 pipeline or data error.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry, metrics
from .config import METHODS, PipelineConfig
from .dots import Color, DotSet
from .extraction import extract
from .geometry import PointCloud, StereoCalibration
from .matching import CorrespondenceSet, match_dotsets
from .pattern import PatternSpec, generate_pattern, pattern_ground_truth
from .pipeline import StageError, run_pipeline, score_run, transfer_markers
from .synth import GroundTruth, SceneSpec, render_stereo

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- file helpers ------------------------------------------------------------


def write_atomic(path, data: str | bytes) -> None:
    """Write through a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img)).save(buf, format="PNG")
    return buf.getvalue()


def read_image(path) -> np.ndarray:
    """8-bit RGB image from PNG, PPM or anything else Pillow reads."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from None


def read_text(path) -> str:
    return Path(path).read_text()


def mask_png(mask: np.ndarray) -> bytes:
    return png_bytes(np.where(mask, 255, 0).astype(np.uint8))


def load_config(path) -> PipelineConfig:
    return PipelineConfig.from_json(read_text(path)) if path else PipelineConfig()


# -- commands ----------------------------------------------------------------


def cmd_pattern(args) -> int:
    spec = PatternSpec.from_json(read_text(args.spec)) if args.spec else PatternSpec()
    spec.validate()
    write_atomic(args.out, png_bytes(generate_pattern(spec)))
    if args.truth:
        write_atomic(args.truth, pattern_ground_truth(spec).to_json())
    return EXIT_OK


def cmd_render(args) -> int:
    scene = SceneSpec.from_json(read_text(args.scene))
    pattern = PatternSpec.from_json(read_text(args.pattern)) if args.pattern else PatternSpec()
    pattern.validate()
    left, right, gt = render_stereo(scene, pattern)
    write_atomic(args.out_left, png_bytes(left))
    write_atomic(args.out_right, png_bytes(right))
    write_atomic(args.gt_out, gt.to_json())
    if args.calib_out:
        write_atomic(args.calib_out, scene.calibration.to_json())
    return EXIT_OK


def _dump_masks(folder, art) -> None:
    folder = Path(folder)
    vf = art.filtered_v
    v8 = np.clip(np.rint(vf * 255.0 if vf.max() <= 1.0 else vf), 0, 255).astype(np.uint8)
    files = {
        "R.png": mask_png(art.roi),
        "C_r.png": mask_png(art.class_masks[Color.RED]),
        "C_g.png": mask_png(art.class_masks[Color.GREEN]),
        "C_b.png": mask_png(art.class_masks[Color.BLUE]),
        "D.png": mask_png(art.maxima),
        "V_prime.png": png_bytes(v8),
    }
    for name, data in files.items():
        write_atomic(folder / name, data)


def cmd_extract(args) -> int:
    cfg = load_config(args.config)
    img = read_image(args.image)
    dots, art = extract(img, cfg.extract, args.source)
    write_atomic(args.out, dots.to_json())
    if args.debug_masks:
        _dump_masks(args.debug_masks, art)
    return EXIT_OK


def _write_corr(path, corr: CorrespondenceSet) -> None:
    write_atomic(path, corr.to_csv() if str(path).endswith(".csv") else corr.to_json())


def cmd_match(args) -> int:
    cfg = load_config(args.config)
    left = DotSet.from_json(read_text(args.left))
    right = DotSet.from_json(read_text(args.right))
    res = match_dotsets(left, right, cfg.match)
    _write_corr(args.out, res.correspondences)
    return EXIT_OK


def _write_cloud(path, cloud: PointCloud) -> None:
    write_atomic(path, cloud.to_csv() if str(path).endswith(".csv") else cloud.to_ply())


def cmd_reconstruct(args) -> int:
    corr = CorrespondenceSet.from_json(read_text(args.corr))
    calib = StereoCalibration.from_json(read_text(args.calib))
    if args.method == "disparity":
        cloud = geometry.reconstruct_disparity(corr, calib.left, calib.right)
    else:
        cloud = geometry.reconstruct(corr, calib.left, calib.right, args.method, args.residual_gate)
    if cloud.dropped:
        print(f"dropped {cloud.dropped} of {len(corr)} correspondences", file=sys.stderr)
    _write_cloud(args.out, cloud)
    if args.upsample is not None:
        spacing, grid_out = args.upsample
        try:
            spacing = float(spacing)
        except ValueError:
            raise UsageError(f"--upsample spacing must be a number, got {spacing!r}") from None
        grid = geometry.upsample_surface(cloud, spacing)
        write_atomic(grid_out, grid.to_csv())
    return EXIT_OK


def _read_cloud(path) -> PointCloud:
    text = read_text(path)
    if str(path).endswith(".csv"):
        rows = [r.split(",") for r in text.strip().splitlines()[1:]]
        return PointCloud(np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, 3),
                          [int(Color.parse(r[3])) for r in rows],
                          [float(r[4]) for r in rows])
    return PointCloud.from_ply(text)


def cmd_evaluate(args) -> int:
    gt = GroundTruth.from_json(read_text(args.gt))
    report = metrics.EvalReport(n_covisible=len(gt.covisible))
    corr = CorrespondenceSet.from_json(read_text(args.corr)) if args.corr else None
    if corr is not None:
        report.match_precision, report.match_recall = metrics.match_accuracy(corr, gt)
        report.n_pairs = len(corr)
    cloud = _read_cloud(args.cloud) if args.cloud else None
    if cloud is not None:
        report.n_points = len(cloud)
    if args.fit == "sphere":
        if cloud is None:
            raise UsageError("--fit sphere needs --cloud")
        fit = metrics.fit_sphere(cloud)
        report.sphere, report.md = fit, metrics.mean_distance(cloud, fit)
    elif args.fit == "markers":
        if corr is None or not args.calib:
            raise UsageError("--fit markers needs --corr and --calib")
        if gt.markers is None:
            raise ValueError("ground truth has no markers")
        calib = StereoCalibration.from_json(read_text(args.calib))
        recon = transfer_markers(gt.markers, corr, calib)
        report.mse, report.rmse = metrics.marker_mse(recon, gt.markers)
    write_atomic(args.out, report.to_json())
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out_dir)
    gt = scene = None
    if args.scene:
        scene = SceneSpec.from_json(read_text(args.scene))
        pattern = PatternSpec.from_json(read_text(args.pattern)) if args.pattern else PatternSpec()
        pattern.validate()
        try:
            left, right, gt = render_stereo(scene, pattern)
        except ValueError as exc:
            raise StageError("render", exc) from exc
        calib = scene.calibration
        write_atomic(out / "gt.json", gt.to_json())
    else:
        if not (args.left and args.right):
            raise UsageError("pipeline needs --scene or both --left and --right")
        left, right = read_image(args.left), read_image(args.right)
        calib = None
    if args.calib:
        calib = StereoCalibration.from_json(read_text(args.calib))
    if calib is None:
        raise UsageError("pipeline on images needs --calib")
    write_atomic(out / "left.png", png_bytes(left))
    write_atomic(out / "right.png", png_bytes(right))
    write_atomic(out / "calib.json", calib.to_json())

    run = run_pipeline(left, right, calib, cfg)
    write_atomic(out / "left_dots.json", run.left_dots.to_json())
    write_atomic(out / "right_dots.json", run.right_dots.to_json())
    write_atomic(out / "corr.json", run.match.correspondences.to_json())
    write_atomic(out / "cloud.ply", run.cloud.to_ply())
    for w in run.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if scene is not None:
        report = score_run(run, scene, gt, cfg)
        write_atomic(out / "report.json", report.to_json())
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dotstereo", description="Single-shot colour-dot active stereo toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("pattern", help="render a dot pattern to PNG")
    s.add_argument("spec", nargs="?", help="PatternSpec JSON (defaults when omitted)")
    s.add_argument("out", help="output PNG")
    s.add_argument("--truth", help="also write the pattern dots as DotSet JSON")
    s.set_defaults(func=cmd_pattern)

    s = sub.add_parser("render", help="render a synthetic stereo pair")
    s.add_argument("scene")
    s.add_argument("pattern", help="PatternSpec JSON")
    s.add_argument("out_left")
    s.add_argument("out_right")
    s.add_argument("gt_out")
    s.add_argument("--calib-out", help="also write the stereo calibration JSON")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("extract", help="extract dots from one image")
    s.add_argument("image")
    s.add_argument("out", help="DotSet JSON")
    s.add_argument("--source", choices=("left", "right"), default="left")
    s.add_argument("--config", help="PipelineConfig JSON")
    s.add_argument("--debug-masks", metavar="DIR", help="write R, C_r, C_g, C_b, D, V' as PNGs")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("match", help="match two DotSet files")
    s.add_argument("left")
    s.add_argument("right")
    s.add_argument("out", help="correspondences (.json or .csv)")
    s.add_argument("--config", help="PipelineConfig JSON")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("reconstruct", help="triangulate correspondences")
    s.add_argument("corr")
    s.add_argument("calib")
    s.add_argument("out", help="point cloud (.ply or .csv)")
    s.add_argument("--method", choices=METHODS, default="analytic")
    s.add_argument("--residual-gate", type=float, default=geometry.DEFAULT_RESIDUAL_GATE)
    s.add_argument("--upsample", nargs=2, metavar=("SPACING", "GRID_CSV"))
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", help="score a reconstruction against ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cloud", help="PLY or CSV point cloud")
    s.add_argument("--corr", help="correspondence JSON")
    s.add_argument("--calib", help="calibration JSON (for markers)")
    s.add_argument("--fit", choices=("sphere", "markers"))
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pipeline", help="images (or a synthetic scene) to point cloud and report")
    s.add_argument("out_dir")
    s.add_argument("--scene")
    s.add_argument("--pattern")
    s.add_argument("--left")
    s.add_argument("--right")
    s.add_argument("--calib")
    s.add_argument("--config")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dotstereo {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"dotstereo {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"dotstereo {args.command}: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"dotstereo {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
