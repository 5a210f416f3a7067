"""Pinhole cameras, viewing rays, triangulation and surface resampling.

Cameras follow the convention ``x_cam = R @ X_world + t`` with ``z_cam``
pointing forward. Pixel ``(u, v)`` maps to the camera-frame direction
``((u - cx) / fx, (v - cy) / fy, 1)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dots import RGB, Color
from .interp import ScatteredField

DEFAULT_RESIDUAL_GATE = 5.0  # mm
_PARALLEL_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 0
    height: int = 0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation must be proper (det = +1)")

    @classmethod
    def looking_from(cls, centre, fx: float, fy: float | None = None, cx: float = 0.0,
                     cy: float = 0.0, rotation=None, width: int = 0, height: int = 0):
        """Build a camera from its optical centre in world coordinates."""
        R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        t = -R @ np.asarray(centre, dtype=np.float64)
        return cls(fx, fx if fy is None else fy, cx, cy, R, t, width, height)

    @property
    def centre(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.rotation.T + self.translation

    def project(self, X: np.ndarray) -> np.ndarray:
        """World points (..., 3) to pixels (..., 2). Points behind the camera give NaN."""
        Xc = self.to_camera(X)
        z = Xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * Xc[..., 0] / z + self.cx
            v = self.fy * Xc[..., 1] / z + self.cy
        uv = np.stack([u, v], axis=-1)
        uv[z <= 0] = np.nan
        return uv

    def directions(self, uv: np.ndarray) -> np.ndarray:
        """Unit world-frame ray directions for pixels (..., 2)."""
        uv = np.asarray(uv, dtype=np.float64)
        d = np.stack([(uv[..., 0] - self.cx) / self.fx,
                      (uv[..., 1] - self.cy) / self.fy,
                      np.ones(uv.shape[:-1])], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.rotation

    def in_bounds(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv)
        return ((uv[..., 0] >= margin) & (uv[..., 0] <= self.width - 1 - margin)
                & (uv[..., 1] >= margin) & (uv[..., 1] <= self.height - 1 - margin))

    def to_dict(self) -> dict:
        d = {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
             "R": self.rotation.tolist(), "t": self.translation.tolist()}
        if self.width or self.height:
            d["width"], d["height"] = self.width, self.height
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       np.asarray(d.get("R", np.eye(3)), dtype=np.float64),
                       np.asarray(d.get("t", np.zeros(3)), dtype=np.float64),
                       int(d.get("width", 0)), int(d.get("height", 0)))
        except KeyError as exc:
            raise ValueError(f"camera is missing key {exc.args[0]!r}") from None


@dataclass(frozen=True)
class StereoCalibration:
    left: CameraModel
    right: CameraModel

    def to_json(self) -> str:
        return json.dumps({"left": self.left.to_dict(), "right": self.right.to_dict()}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "StereoCalibration":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed calibration JSON: {exc}") from None
        for side in ("left", "right"):
            if side not in d:
                raise ValueError(f"calibration is missing key {side!r}")
        return cls(CameraModel.from_dict(d["left"]), CameraModel.from_dict(d["right"]))


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = math.sqrt(float(d @ d))
        if n == 0:
            raise ValueError("ray direction must be non-zero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)
        # plain-float copies for the scalar intersection routine
        object.__setattr__(self, "_o", tuple(o.tolist()))
        object.__setattr__(self, "_d", tuple((d / n).tolist()))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def pixel_to_ray(cam: CameraModel, p) -> Ray:
    return Ray(cam.centre, cam.directions(np.asarray(p, dtype=np.float64)))


# -- triangulation -----------------------------------------------------------


def intersect_analytic(r1: Ray, r2: Ray) -> tuple[np.ndarray, float]:
    """Closest approach of two rays from the 2x2 normal equations.

    Minimising ``|O1 + t d1 - O2 - s d2|^2`` over ``(t, s)`` gives a linear
    system solved by Cramer's rule on plain floats. With ``n = d1 x d2`` and
    ``w = O1 - O2`` the determinant is ``|n|^2`` and the numerators are
    ``n . (d2 x w)`` and ``n . (d1 x w)`` (Binet-Cauchy), which avoids the
    cancellation of the dot-product form for near-parallel rays.
    """
    o1x, o1y, o1z = r1._o
    o2x, o2y, o2z = r2._o
    ax, ay, az = r1._d
    bx, by, bz = r2._d
    wx, wy, wz = o1x - o2x, o1y - o2y, o1z - o2z
    nx, ny, nz = ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx
    den = nx * nx + ny * ny + nz * nz
    if den <= _PARALLEL_EPS ** 2:
        raise ValueError("degenerate ray pair")
    t = (nx * (by * wz - bz * wy) + ny * (bz * wx - bx * wz) + nz * (bx * wy - by * wx)) / den
    s = (nx * (ay * wz - az * wy) + ny * (az * wx - ax * wz) + nz * (ax * wy - ay * wx)) / den
    p1 = (o1x + t * ax, o1y + t * ay, o1z + t * az)
    p2 = (o2x + s * bx, o2y + s * by, o2z + s * bz)
    mid = np.array([(p1[0] + p2[0]) * 0.5, (p1[1] + p2[1]) * 0.5, (p1[2] + p2[2]) * 0.5])
    gap = math.sqrt((p1[0] - p2[0]) ** 2 + (p1[1] - p2[1]) ** 2 + (p1[2] - p2[2]) ** 2)
    return mid, gap


def intersect_midpoint(r1: Ray, r2: Ray) -> tuple[np.ndarray, float]:
    """Midpoint of the common perpendicular, built from cross products.

    With ``n = d1 x d2`` the closest point on ray 1 lies on the plane spanned
    by ray 2 and ``n``; its normal is ``n2 = d2 x n`` and likewise for ray 2.
    """
    o1, d1 = r1._o, r1._d
    o2, d2 = r2._o, r2._d
    n = _cross(d1, d2)
    if _dot(n, n) <= _PARALLEL_EPS ** 2:
        raise ValueError("degenerate ray pair")
    n1 = _cross(d1, n)
    n2 = _cross(d2, n)
    w = (o2[0] - o1[0], o2[1] - o1[1], o2[2] - o1[2])
    t1 = _dot(w, n2) / _dot(d1, n2)
    t2 = -_dot(w, n1) / _dot(d2, n1)
    c1 = np.array(o1) + t1 * np.array(d1)
    c2 = np.array(o2) + t2 * np.array(d2)
    return (c1 + c2) / 2.0, float(np.linalg.norm(c1 - c2))


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _batch_analytic(o1, d1, o2, d2):
    w = o1 - o2
    n = np.cross(d1, d2)
    den = np.einsum("ij,ij->i", n, n)
    ok = den > _PARALLEL_EPS ** 2
    den = np.where(ok, den, 1.0)
    t = np.einsum("ij,ij->i", n, np.cross(d2, w)) / den
    s = np.einsum("ij,ij->i", n, np.cross(d1, w)) / den
    p1 = o1 + t[:, None] * d1
    p2 = o2 + s[:, None] * d2
    return (p1 + p2) / 2.0, np.linalg.norm(p1 - p2, axis=1), ok


def _batch_midpoint(o1, d1, o2, d2):
    n = np.cross(d1, d2)
    ok = np.einsum("ij,ij->i", n, n) > _PARALLEL_EPS ** 2
    n1 = np.cross(d1, n)
    n2 = np.cross(d2, n)
    den1 = np.einsum("ij,ij->i", d1, n2)
    den2 = np.einsum("ij,ij->i", d2, n1)
    den1 = np.where(ok, den1, 1.0)
    den2 = np.where(ok, den2, 1.0)
    c1 = o1 + (np.einsum("ij,ij->i", o2 - o1, n2) / den1)[:, None] * d1
    c2 = o2 + (np.einsum("ij,ij->i", o1 - o2, n1) / den2)[:, None] * d2
    return (c1 + c2) / 2.0, np.linalg.norm(c1 - c2, axis=1), ok


def triangulate(left: CameraModel, right: CameraModel, uv_left: np.ndarray,
                uv_right: np.ndarray, method: str = "analytic"):
    """Vectorised triangulation of pixel pairs.

    Returns ``(points, residuals, ok)``; ``ok`` is False for parallel rays.
    """
    uv_left = np.asarray(uv_left, dtype=np.float64).reshape(-1, 2)
    uv_right = np.asarray(uv_right, dtype=np.float64).reshape(-1, 2)
    d1 = left.directions(uv_left)
    d2 = right.directions(uv_right)
    o1 = np.broadcast_to(left.centre, d1.shape)
    o2 = np.broadcast_to(right.centre, d2.shape)
    if method == "analytic":
        return _batch_analytic(o1, d1, o2, d2)
    if method == "midpoint":
        return _batch_midpoint(o1, d1, o2, d2)
    raise ValueError(f"unknown triangulation method {method!r}")


# -- point clouds ------------------------------------------------------------


@dataclass
class PointCloud:
    xyz: np.ndarray  # (N, 3) mm
    color: np.ndarray  # (N,) Color codes
    residual: np.ndarray  # (N,) mm
    dropped: int = 0
    source_index: np.ndarray | None = None  # (N,) index into the correspondence list

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.color = np.asarray(self.color, dtype=np.int8).reshape(-1)
        self.residual = np.asarray(self.residual, dtype=np.float64).reshape(-1)
        if self.source_index is None:
            self.source_index = np.arange(len(self.xyz))
        self.source_index = np.asarray(self.source_index, dtype=np.intp).reshape(-1)

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls, dropped: int = 0) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), dropped)

    def subset(self, keep: np.ndarray) -> "PointCloud":
        return PointCloud(self.xyz[keep], self.color[keep], self.residual[keep],
                          self.dropped, self.source_index[keep])

    def to_ply(self) -> str:
        """ASCII PLY with one vertex per point, coloured by its dot class."""
        lines = ["ply", "format ascii 1.0", f"element vertex {len(self)}",
                 "property float x", "property float y", "property float z",
                 "property uchar red", "property uchar green", "property uchar blue",
                 "end_header"]
        for (x, y, z), c in zip(self.xyz, self.color):
            r, g, b = RGB[Color(int(c))]
            lines.append(f"{float(x)!r} {float(y)!r} {float(z)!r} {r} {g} {b}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_ply(cls, text: str) -> "PointCloud":
        lines = text.splitlines()
        if not lines or lines[0].strip() != "ply":
            raise ValueError("not an ASCII PLY file")
        end = next((i for i, ln in enumerate(lines) if ln.strip() == "end_header"), None)
        if end is None:
            raise ValueError("PLY header not terminated")
        rows = [ln.split() for ln in lines[end + 1:] if ln.strip()]
        xyz = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, 3)
        lookup = {rgb: int(c) for c, rgb in RGB.items()}
        color = [lookup.get(tuple(int(v) for v in r[3:6]), 0) if len(r) >= 6 else 0 for r in rows]
        return cls(xyz, color, np.zeros(len(rows)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "z", "color", "residual"])
        for (x, y, z), c, r in zip(self.xyz, self.color, self.residual):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(z)), Color(int(c)).label, repr(float(r))])
        return buf.getvalue()


def reconstruct(corr, left: CameraModel, right: CameraModel, method: str = "analytic",
                residual_gate: float = DEFAULT_RESIDUAL_GATE) -> PointCloud:
    """One point per correspondence; degenerate or high-residual pairs are dropped."""
    if len(corr) == 0:
        return PointCloud.empty()
    pts, res, ok = triangulate(left, right, corr.left_xy, corr.right_xy, method)
    keep = ok & (res <= residual_gate) & np.all(np.isfinite(pts), axis=1)
    dropped = int((~keep).sum())
    if not keep.any():
        warnings.warn("no correspondence triangulated (degenerate baseline?)", RuntimeWarning,
                      stacklevel=2)
    return PointCloud(pts[keep], corr.color[keep], res[keep], dropped, np.flatnonzero(keep))


def is_rectified(left: CameraModel, right: CameraModel, tol: float = 1e-6) -> bool:
    """Same intrinsics and orientation with a baseline along the camera x axis."""
    if not np.allclose(left.rotation, right.rotation, atol=tol, rtol=0):
        return False
    same_k = all(abs(getattr(left, k) - getattr(right, k)) <= tol for k in ("fx", "fy", "cy"))
    base = left.rotation @ (right.centre - left.centre)
    if not same_k or abs(base[0]) <= tol:
        return False
    return abs(base[1]) <= tol * abs(base[0]) and abs(base[2]) <= tol * abs(base[0])


def reconstruct_disparity(corr, left: CameraModel, right: CameraModel) -> PointCloud:
    """Depth from horizontal disparity ``Z = f B / (x_l - x_r)``.

    The principal-point offset between the two cameras is taken into account
    so rigs with a shifted ``cx`` still work.
    """
    if not is_rectified(left, right):
        raise ValueError("disparity requires rectified cameras")
    if len(corr) == 0:
        return PointCloud.empty()
    baseline = float((left.rotation @ (right.centre - left.centre))[0])
    xl, yl = corr.left_xy[:, 0], corr.left_xy[:, 1]
    disp = (xl - left.cx) - (corr.right_xy[:, 0] - right.cx)
    keep = disp != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        Z = left.fx * baseline / disp
    keep &= np.isfinite(Z) & (Z > 0)
    xl, yl, Z = xl[keep], yl[keep], Z[keep]
    Xc = np.stack([(xl - left.cx) / left.fx * Z, (yl - left.cy) / left.fy * Z, Z], axis=1)
    Xw = (Xc - left.translation) @ left.rotation
    return PointCloud(Xw, corr.color[keep], np.zeros(int(keep.sum())),
                      int((~keep).sum()), np.flatnonzero(keep))


# -- surface resampling ------------------------------------------------------


@dataclass
class SurfaceGrid:
    x0: float
    y0: float
    spacing: float
    nx: int
    ny: int
    z: np.ndarray  # (ny, nx); NaN marks holes

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        self.z = np.asarray(self.z, dtype=np.float64).reshape(self.ny, self.nx)

    @property
    def holes(self) -> np.ndarray:
        return np.isnan(self.z)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.x0 + self.spacing * np.arange(self.nx),
                self.y0 + self.spacing * np.arange(self.ny))

    def to_csv(self) -> str:
        lines = ["x0,y0,spacing,nx,ny", f"{float(self.x0)!r},{float(self.y0)!r},{float(self.spacing)!r},{self.nx},{self.ny}"]
        for row in self.z:
            lines.append(",".join("nan" if np.isnan(v) else repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "SurfaceGrid":
        rows = [r for r in text.strip().splitlines() if r]
        x0, y0, spacing, nx, ny = rows[1].split(",")
        z = np.array([[float(v) for v in r.split(",")] for r in rows[2:]])
        return cls(float(x0), float(y0), float(spacing), int(nx), int(ny), z)


def upsample_surface(cloud: PointCloud, spacing: float) -> SurfaceGrid:
    """Resample ``Z = f(X, Y)`` on a uniform grid covering the cloud's footprint."""
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    xy = cloud.xyz[:, :2]
    fz = ScatteredField(xy, cloud.xyz[:, 2:3])
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    nx = int(np.floor((hi[0] - lo[0]) / spacing + 1e-9)) + 1
    ny = int(np.floor((hi[1] - lo[1]) / spacing + 1e-9)) + 1
    gx = lo[0] + spacing * np.arange(nx)
    gy = lo[1] + spacing * np.arange(ny)
    X, Y = np.meshgrid(gx, gy)
    vals, inside = fz(np.column_stack([X.ravel(), Y.ravel()]))
    z = vals[:, 0].copy()
    z[~inside] = np.nan
    return SurfaceGrid(float(lo[0]), float(lo[1]), float(spacing), nx, ny, z.reshape(ny, nx))
