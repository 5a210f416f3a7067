"""Accuracy measures: marker error, sphere fit and mean distance, match accuracy."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

MARKER_COUNT = 25
GAUSS_NEWTON_STEPS = 20


def _points(x) -> np.ndarray:
    xyz = getattr(x, "xyz", x)
    return np.asarray(xyz, dtype=np.float64).reshape(-1, 3)


def marker_mse(recon, truth) -> tuple[float, float]:
    """Mean squared marker distance (mm^2) and its square root (mm)."""
    a, b = _points(recon), _points(truth)
    if a.shape != b.shape:
        raise ValueError(f"marker sets differ in size: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("no markers to compare")
    if len(a) != MARKER_COUNT:
        warnings.warn(f"expected {MARKER_COUNT} markers, averaging over {len(a)}", RuntimeWarning,
                      stacklevel=2)
    mse = float(np.mean(np.sum((a - b) ** 2, axis=1)))
    return mse, math.sqrt(mse)


@dataclass(frozen=True)
class SphereFit:
    center: tuple[float, float, float]
    radius: float
    rms_residual: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


def fit_sphere(cloud, steps: int = GAUSS_NEWTON_STEPS) -> SphereFit:
    """Algebraic least-squares sphere refined by Gauss-Newton on geometric distance."""
    X = _points(cloud)
    if len(X) < 10:
        raise ValueError("sphere fit degenerate: need at least 10 points")
    A = np.column_stack([2.0 * X, np.ones(len(X))])
    b = np.sum(X * X, axis=1)
    scale = np.abs(A).max(axis=0)
    sv = np.linalg.svd(A / scale, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise ValueError("sphere fit degenerate: points are coplanar")
    sol = np.linalg.lstsq(A / scale, b, rcond=None)[0] / scale
    c = sol[:3]
    r2 = sol[3] + c @ c
    if not r2 > 0:
        raise ValueError("sphere fit degenerate")
    r = math.sqrt(r2)
    for _ in range(steps):
        diff = X - c
        dist = np.linalg.norm(diff, axis=1)
        if np.any(dist == 0):
            break
        res = dist - r
        J = np.column_stack([-diff / dist[:, None], -np.ones(len(X))])
        step = np.linalg.lstsq(J, -res, rcond=None)[0]
        c = c + step[:3]
        r = r + step[3]
        if np.abs(step).max() <= 1e-13 * max(1.0, abs(r)):
            break
    r = abs(r)
    rms = float(np.sqrt(np.mean((np.linalg.norm(X - c, axis=1) - r) ** 2)))
    return SphereFit(tuple(float(v) for v in c), float(r), rms)


def mean_distance(cloud, fit: SphereFit) -> float:
    """Mean unsigned distance from the points to the fitted sphere surface."""
    X = _points(cloud)
    if len(X) == 0:
        raise ValueError("empty cloud")
    return float(np.mean(np.abs(np.linalg.norm(X - np.asarray(fit.center), axis=1) - fit.radius)))


def pair_truth(corr, gt, tol: float = 1.0) -> np.ndarray:
    """Ground-truth dot index for every pair, or -1 when the pair is wrong.

    A pair is right when both endpoints lie within ``tol`` pixels of the
    projections of one ground-truth dot seen by both cameras.
    """
    out = np.full(len(corr), -1, dtype=np.intp)
    cov = gt.shared
    if len(corr) == 0 or len(cov) == 0:
        return out
    lxy, rxy = corr.left_xy, corr.right_xy
    tree = cKDTree(gt.left_uv[cov])
    for k, cand in enumerate(tree.query_ball_point(lxy, tol)):
        for j in cand:
            g = cov[j]
            if np.hypot(*(rxy[k] - gt.right_uv[g])) <= tol:
                out[k] = g
                break
    return out


def match_accuracy(corr, gt, tol: float = 1.0) -> tuple[float, float]:
    """(precision, recall) of correspondences against ground truth.

    Recall counts the covisible dots (whole disk seen by both cameras) that
    appear in a correct pair.
    """
    truth = pair_truth(corr, gt, tol)
    correct = np.unique(truth[truth >= 0])
    precision = len(correct) / len(corr) if len(corr) else 0.0
    cov = gt.covisible
    recall = np.isin(cov, correct).sum() / len(cov) if len(cov) else 0.0
    return precision, float(recall)


@dataclass
class EvalReport:
    """Scores of one pipeline run; absent measures are ``None``."""

    match_precision: float = 0.0
    match_recall: float = 0.0
    n_pairs: int = 0
    n_covisible: int = 0
    n_points: int = 0
    dropped_points: int = 0
    rms_3d: float | None = None
    mse: float | None = None
    rmse: float | None = None
    md: float | None = None
    sphere: SphereFit | None = None
    cycles: int | None = None
    converged: bool | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.sphere is not None:
            d["sphere"] = {"center": list(self.sphere.center), "radius": self.sphere.radius,
                           "rms_residual": self.sphere.rms_residual}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        if d.get("sphere") is not None:
            s = d["sphere"]
            d["sphere"] = SphereFit(tuple(s["center"]), s["radius"], s["rms_residual"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown report key: {sorted(unknown)[0]}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))
