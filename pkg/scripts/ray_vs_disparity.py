"""Compare ray-intersection and disparity depth on the reference scenes.

Both methods see the same correctly matched centroids rounded to whole
pixels, so the comparison isolates how each one turns pixel positions into
depth. Prints one row per scene.
"""

from __future__ import annotations

import argparse

import numpy as np

from dotstereo import geometry, metrics, synth
from dotstereo.dots import DotSet
from dotstereo.matching import CorrespondenceSet
from dotstereo.pattern import PatternSpec
from dotstereo.pipeline import run_pipeline


def compare(name: str, noisy: bool, quantize: bool = True) -> tuple[int, float, float]:
    scene = synth.reference_scene(name, noisy)
    left, right, gt = synth.render_stereo(scene, PatternSpec())
    run = run_pipeline(left, right, scene.calibration)
    corr = run.match.correspondences
    truth = metrics.pair_truth(corr, gt)
    ok = truth >= 0
    n = int(ok.sum())
    lxy, rxy = corr.left_xy[ok], corr.right_xy[ok]
    if quantize:
        lxy, rxy = np.rint(lxy), np.rint(rxy)
    same = CorrespondenceSet(DotSet(lxy, corr.color[ok], np.zeros(n)),
                             DotSet(rxy, corr.color[ok], np.zeros(n), "right"),
                             np.tile(np.arange(n)[:, None], 2))
    calib = scene.calibration
    target = gt.points[truth[ok]]
    ray = geometry.reconstruct(same, calib.left, calib.right, "analytic", residual_gate=np.inf)
    disp = geometry.reconstruct_disparity(same, calib.left, calib.right)

    def rmse(cloud):
        return float(np.sqrt(np.mean(np.sum((cloud.xyz - target) ** 2, axis=1))))

    return n, rmse(ray), rmse(disp)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", nargs="+", default=["plane", "sphere"],
                    choices=sorted(synth.REFERENCE_SURFACES))
    ap.add_argument("--subpixel", action="store_true", help="keep sub-pixel centroids")
    args = ap.parse_args()
    print(f"{'scene':<14}{'pairs':>7}{'ray RMSE':>12}{'disp RMSE':>12}")
    for name in args.scenes:
        for noisy in (False, True):
            n, ray, disp = compare(name, noisy, not args.subpixel)
            label = name + (" noisy" if noisy else "")
            print(f"{label:<14}{n:>7}{ray:>10.4f}mm{disp:>10.4f}mm")


if __name__ == "__main__":
    main()
