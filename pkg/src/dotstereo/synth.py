"""Synthetic projector + stereo camera rig with exact ground truth.

Images are rendered by inverse warping. Each camera pixel casts a ray, the
first surface hit is found in closed form, and the hit is lit only if the
projector sees it directly. The lit point is projected into the pattern
plane, where the nearest lattice dot is evaluated analytically. Ground truth
is computed the other way round: every pattern dot centre is cast from the
projector, intersected with the surface, then projected into both cameras.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np
from scipy import ndimage

from .dots import RGB, Color, DotSet
from .geometry import CameraModel, StereoCalibration
from .pattern import PatternSpec, pattern_lattice

MIN_COVISIBLE = 0.8
_HIT_TOL = 1e-6  # relative tolerance for "first hit is this point"
_RIM_SAMPLES = 16


# -- surfaces ----------------------------------------------------------------


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(3)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length vector")
    return v / n


def _first_quadratic_root(a, b, c, valid):
    """Smallest positive root of ``a t^2 + b t + c`` passing ``valid(t)``; inf if none."""
    a, b, c = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float), np.asarray(c, float))
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    # numerically stable pair of roots
    q = -0.5 * (b + np.where(b >= 0, sq, -sq))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(a != 0, q / a, np.where(b != 0, -c / b, np.inf))
        r2 = np.where(q != 0, c / q, np.inf)
    lo = np.minimum(r1, r2)
    hi = np.maximum(r1, r2)
    out = np.full(a.shape, np.inf)
    for root in (hi, lo):  # later assignment wins, so try the nearer root last
        good = ok & np.isfinite(root) & (root > 0) & valid(root)
        out = np.where(good, root, out)
    return out


@dataclass(frozen=True)
class Plane:
    """Points with ``n . X = d`` where ``n`` is ``normal`` scaled to unit length."""

    normal: tuple = (0.0, 0.0, 1.0)
    d: float = 800.0
    kind: ClassVar[str] = "plane"

    def intersect(self, o: np.ndarray, v: np.ndarray) -> np.ndarray:
        n = _unit(self.normal)
        nv = v @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.d - o @ n) / nv
        t = np.where(np.abs(nv) > 1e-15, t, np.inf)
        return np.where(t > 0, t, np.inf)

    def implicit(self, X: np.ndarray) -> np.ndarray:
        return X @ _unit(self.normal) - self.d

    def to_dict(self) -> dict:
        return {"kind": self.kind, "normal": list(map(float, _unit(self.normal))), "d": float(self.d)}


@dataclass(frozen=True)
class Sphere:
    center: tuple = (0.0, 0.0, 800.0)
    radius: float = 85.0
    kind: ClassVar[str] = "sphere"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def intersect(self, o: np.ndarray, v: np.ndarray) -> np.ndarray:
        w = o - np.asarray(self.center, dtype=np.float64)
        a = np.einsum("...i,...i->...", v, v)
        b = 2 * np.einsum("...i,...i->...", v, w)
        c = np.einsum("...i,...i->...", w, w) - self.radius ** 2
        return _first_quadratic_root(a, b, c, lambda t: np.ones(np.shape(t), bool))

    def implicit(self, X: np.ndarray) -> np.ndarray:
        return np.linalg.norm(X - np.asarray(self.center, dtype=np.float64), axis=-1) - self.radius

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": list(map(float, self.center)), "radius": float(self.radius)}


@dataclass(frozen=True)
class Cone:
    """One nappe of a circular cone, truncated at ``height`` along the axis."""

    apex: tuple = (0.0, 0.0, 700.0)
    axis: tuple = (0.0, 0.0, 1.0)
    half_angle: float = 0.6  # radians
    height: float = 150.0
    kind: ClassVar[str] = "cone"

    def __post_init__(self):
        if not 0 < self.half_angle < np.pi / 2:
            raise ValueError("cone half_angle must be in (0, pi/2)")
        if not self.height > 0:
            raise ValueError("cone height must be positive")

    def intersect(self, o: np.ndarray, v: np.ndarray) -> np.ndarray:
        u = _unit(self.axis)
        w = o - np.asarray(self.apex, dtype=np.float64)
        c2 = np.cos(self.half_angle) ** 2
        vu = v @ u
        wu = w @ u
        a = vu * vu - c2 * np.einsum("...i,...i->...", v, v)
        b = 2 * (vu * wu - c2 * np.einsum("...i,...i->...", v, w))
        c = wu * wu - c2 * np.einsum("...i,...i->...", w, w)

        def on_nappe(t):
            h = wu + t * vu
            return (h >= 0) & (h <= self.height)

        return _first_quadratic_root(a, b, c, on_nappe)

    def implicit(self, X: np.ndarray) -> np.ndarray:
        u = _unit(self.axis)
        w = X - np.asarray(self.apex, dtype=np.float64)
        h = w @ u
        radial = np.linalg.norm(w - h[..., None] * u, axis=-1)
        return radial * np.cos(self.half_angle) - h * np.sin(self.half_angle)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "apex": list(map(float, self.apex)),
                "axis": list(map(float, _unit(self.axis))),
                "half_angle": float(self.half_angle), "height": float(self.height)}


@dataclass(frozen=True)
class MarkerGrid:
    """A plane carrying a ``count`` x ``count`` grid of marker points."""

    center: tuple = (0.0, 0.0, 800.0)
    normal: tuple = (0.0, 0.0, 1.0)
    spacing: float = 50.0
    count: int = 5
    kind: ClassVar[str] = "marker_grid"

    def __post_init__(self):
        if not self.spacing > 0 or self.count < 1:
            raise ValueError("marker grid needs positive spacing and count")

    @property
    def plane(self) -> Plane:
        n = _unit(self.normal)
        return Plane(tuple(n), float(n @ np.asarray(self.center, dtype=np.float64)))

    def intersect(self, o, v):
        return self.plane.intersect(o, v)

    def implicit(self, X):
        return self.plane.implicit(X)

    def markers(self) -> np.ndarray:
        """Marker positions in row-major order, (count**2, 3)."""
        n = _unit(self.normal)
        helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = _unit(np.cross(helper, n))
        e2 = np.cross(n, e1)
        k = (np.arange(self.count) - (self.count - 1) / 2.0) * self.spacing
        jj, ii = np.meshgrid(k, k, indexing="ij")
        c = np.asarray(self.center, dtype=np.float64)
        return c + ii.ravel()[:, None] * e1 + jj.ravel()[:, None] * e2

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": list(map(float, self.center)),
                "normal": list(map(float, _unit(self.normal))),
                "spacing": float(self.spacing), "count": int(self.count)}


SURFACES = {cls.kind: cls for cls in (Plane, Sphere, Cone, MarkerGrid)}


def surface_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in SURFACES:
        raise ValueError(f"unknown surface kind {kind!r}")
    cls = SURFACES[kind]
    allowed = {f for f in cls.__dataclass_fields__ if f != "kind"}
    extra = set(d) - allowed
    if extra:
        raise ValueError(f"unknown {kind} key: {sorted(extra)[0]}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kwargs)


# -- rig and scene -----------------------------------------------------------


CAMERA_SIZE = (2048, 1536)


def default_rig(baseline: float = 60.0, focal: float = 2400.0,
                pattern: PatternSpec | None = None, projector_focal: float = 2000.0):
    """Projector at the origin between two parallel cameras along x.

    Returns ``(projector, left, right)``. The cameras sit at ``-/+ baseline/2``
    and share the projector's viewing direction, so the pair is rectified.
    The focal ratio makes one pattern pixel span 1.2 camera pixels, so dot
    centres do not fall on a fixed sub-pixel phase.
    """
    pattern = pattern or PatternSpec()
    w, h = CAMERA_SIZE
    projector = CameraModel(projector_focal, projector_focal, (pattern.width - 1) / 2.0,
                            (pattern.height - 1) / 2.0, width=pattern.width, height=pattern.height)
    left = CameraModel.looking_from((-baseline / 2.0, 0.0, 0.0), focal, focal,
                                    (w - 1) / 2.0, (h - 1) / 2.0, width=w, height=h)
    right = CameraModel.looking_from((baseline / 2.0, 0.0, 0.0), focal, focal,
                                     (w - 1) / 2.0, (h - 1) / 2.0, width=w, height=h)
    return projector, left, right


@dataclass
class SceneSpec:
    surface: object = field(default_factory=Plane)
    projector: CameraModel | None = None
    left: CameraModel | None = None
    right: CameraModel | None = None
    noise_sigma: float = 0.0  # 8-bit units
    blur_sigma: float = 0.0  # camera pixels
    ambient: float = 20.0  # 8-bit offset on every channel
    exposure: float = 1.5  # dot cores above 1/exposure coverage saturate
    seed: int = 0

    def __post_init__(self):
        if self.projector is None or self.left is None or self.right is None:
            p, l, r = default_rig()
            self.projector = self.projector or p
            self.left = self.left or l
            self.right = self.right or r
        if self.noise_sigma < 0 or self.ambient < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma, blur_sigma and ambient must be >= 0")
        if not self.exposure > 0:
            raise ValueError("exposure must be positive")
        for name in ("left", "right"):
            cam = getattr(self, name)
            if cam.width <= 0 or cam.height <= 0:
                raise ValueError(f"{name} camera needs an image size")

    @property
    def calibration(self) -> StereoCalibration:
        return StereoCalibration(self.left, self.right)

    def to_dict(self) -> dict:
        return {"surface": self.surface.to_dict(), "projector": self.projector.to_dict(),
                "left": self.left.to_dict(), "right": self.right.to_dict(),
                "noise_sigma": self.noise_sigma, "blur_sigma": self.blur_sigma,
                "ambient": self.ambient, "exposure": self.exposure, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {"surface", "projector", "left", "right", "noise_sigma", "blur_sigma",
                 "ambient", "exposure", "seed"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown SceneSpec key: {sorted(extra)[0]}")
        kw = {k: d[k] for k in ("noise_sigma", "blur_sigma", "ambient", "exposure", "seed") if k in d}
        if "seed" in kw:
            kw["seed"] = int(kw["seed"])
        if "surface" in d:
            kw["surface"] = surface_from_dict(d["surface"])
        for k in ("projector", "left", "right"):
            if k in d:
                kw[k] = CameraModel.from_dict(d[k])
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed SceneSpec JSON: {exc}") from None
        return cls.from_dict(d)


# Reference scenes. Poses are generic so no dot lands on a fixed sub-pixel phase.
REFERENCE_SURFACES = {
    "plane": Plane(normal=(0.1, -0.06, 1.0), d=805.0),
    "sphere": Sphere(center=(0.0, 0.0, 800.0), radius=85.0),
    "markers": MarkerGrid(center=(4.0, -3.0, 812.0), normal=(0.1, -0.06, 1.0), spacing=50.0),
    "cone": Cone(),
    "front": Plane(),
}
NOISY = (2.0, 1.0)  # (noise_sigma, blur_sigma) of the noisy variants


def reference_scene(name: str, noisy: bool = False, seed: int = 7) -> SceneSpec:
    """One of the named reference scenes on the default rig."""
    if name not in REFERENCE_SURFACES:
        raise ValueError(f"unknown reference scene {name!r}")
    sigma, blur = NOISY if noisy else (0.0, 0.0)
    return SceneSpec(REFERENCE_SURFACES[name], noise_sigma=sigma, blur_sigma=blur, seed=seed)


# -- ground truth ------------------------------------------------------------


@dataclass
class GroundTruth:
    points: np.ndarray  # (N, 3) surface hit of every pattern dot; NaN where missed
    color: np.ndarray  # (N,) Color codes
    block: np.ndarray  # (N,) pattern block labels
    left_uv: np.ndarray  # (N, 2) projections; NaN where not visible
    right_uv: np.ndarray
    visible_left: np.ndarray  # (N,) bool
    visible_right: np.ndarray
    markers: np.ndarray | None = None  # (M, 3) for marker scenes
    image_size: tuple[int, int] = CAMERA_SIZE
    complete_left: np.ndarray | None = None  # (N,) whole dot disk visible
    complete_right: np.ndarray | None = None

    def __post_init__(self):
        if self.complete_left is None:
            self.complete_left = self.visible_left.copy()
        if self.complete_right is None:
            self.complete_right = self.visible_right.copy()

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.points).all(axis=1)

    @property
    def covisible(self) -> np.ndarray:
        """Dots whose whole disk is seen by both cameras."""
        return np.flatnonzero(self.visible_left & self.visible_right
                              & self.complete_left & self.complete_right)

    @property
    def shared(self) -> np.ndarray:
        """Dots whose centre is seen by both cameras, possibly cut by a contour."""
        return np.flatnonzero(self.visible_left & self.visible_right)

    def view(self, side: str) -> DotSet:
        """Visible ground-truth dots of one camera as a DotSet (``meta['index']`` maps back)."""
        vis = self.visible_left if side == "left" else self.visible_right
        uv = self.left_uv if side == "left" else self.right_uv
        idx = np.flatnonzero(vis)
        ds = DotSet(uv[idx], self.color[idx], self.block[idx], side, self.image_size)
        ds.meta["index"] = idx
        return ds

    def to_dict(self) -> dict:
        def rows(a):
            return [None if not np.isfinite(r).all() else [float(v) for v in r] for r in a]

        d = {
            "width": self.image_size[0], "height": self.image_size[1],
            "dots3d": [
                {"index": i, "xyz": p, "color": Color(int(c)).label, "block": int(b)}
                for i, (p, c, b) in enumerate(zip(rows(self.points), self.color, self.block))
            ],
            "left": rows(np.where(self.visible_left[:, None], self.left_uv, np.nan)),
            "right": rows(np.where(self.visible_right[:, None], self.right_uv, np.nan)),
            "covisible": [int(i) for i in self.covisible],
            "complete_left": [int(i) for i in np.flatnonzero(self.complete_left)],
            "complete_right": [int(i) for i in np.flatnonzero(self.complete_right)],
        }
        if self.markers is not None:
            d["markers"] = [[float(v) for v in m] for m in self.markers]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        def arr(rows, k):
            return np.array([[np.nan] * k if r is None else r for r in rows], dtype=np.float64).reshape(-1, k)

        dots = d["dots3d"]
        left = arr(d["left"], 2)
        right = arr(d["right"], 2)
        markers = d.get("markers")
        complete = {}
        for side in ("left", "right"):
            if f"complete_{side}" in d:
                flag = np.zeros(len(dots), bool)
                flag[np.asarray(d[f"complete_{side}"], dtype=np.intp)] = True
                complete[side] = flag
        return cls(arr([p["xyz"] for p in dots], 3),
                   np.array([int(Color.parse(p["color"])) for p in dots], dtype=np.int8),
                   np.array([int(p["block"]) for p in dots], dtype=np.int32),
                   left, right, np.isfinite(left).all(axis=1), np.isfinite(right).all(axis=1),
                   None if markers is None else np.asarray(markers, dtype=np.float64),
                   (int(d["width"]), int(d["height"])),
                   complete.get("left"), complete.get("right"))

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        return cls.from_dict(json.loads(text))


def _first_hit(surface, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    o = np.broadcast_to(origin, dirs.shape)
    return surface.intersect(o, dirs)


def _seen_from(surface, cam: CameraModel, X: np.ndarray) -> np.ndarray:
    """True where ``X`` is the first surface point along the ray from ``cam``."""
    c = cam.centre
    diff = X - c
    dist = np.linalg.norm(diff, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        dirs = diff / dist[..., None]
    t = _first_hit(surface, c, np.nan_to_num(dirs))
    in_front = cam.to_camera(X)[..., 2] > 0
    return in_front & np.isfinite(t) & (np.abs(t - dist) <= _HIT_TOL * np.maximum(dist, 1.0))


def ground_truth(scene: SceneSpec, pattern: PatternSpec) -> GroundTruth:
    lat = pattern_lattice(pattern)
    proj = scene.projector
    dirs = proj.directions(lat.centres)
    t = _first_hit(scene.surface, proj.centre, dirs)
    hit = np.isfinite(t)
    if not hit.any():
        raise ValueError("surface is not in front of the projector")
    X = np.full(dirs.shape, np.nan)
    X[hit] = proj.centre + t[hit, None] * dirs[hit]

    # rim samples of every dot disk, used to flag dots cut by a contour
    ang = np.linspace(0, 2 * np.pi, _RIM_SAMPLES, endpoint=False)
    rim_q = lat.centres[:, None, :] + (pattern.dot_radius + 0.5) * np.stack(
        [np.cos(ang), np.sin(ang)], axis=-1)[None]
    rim_dirs = proj.directions(rim_q)
    rim_t = _first_hit(scene.surface, proj.centre, rim_dirs)
    rim_hit = np.isfinite(rim_t)
    rim_X = proj.centre + np.where(rim_hit, rim_t, 0.0)[..., None] * rim_dirs

    uv, vis, complete = {}, {}, {}
    for side in ("left", "right"):
        cam = getattr(scene, side)
        p = np.full((len(X), 2), np.nan)
        p[hit] = cam.project(X[hit])
        ok = hit.copy()
        ok[hit] = _seen_from(scene.surface, cam, X[hit]) & cam.in_bounds(p[hit])
        p[~ok] = np.nan
        rim_ok = rim_hit & _seen_from(scene.surface, cam, rim_X) & cam.in_bounds(cam.project(rim_X))
        uv[side], vis[side], complete[side] = p, ok, ok & rim_ok.all(axis=1)
    markers = scene.surface.markers() if isinstance(scene.surface, MarkerGrid) else None
    return GroundTruth(X, lat.color.copy(), lat.block.copy(), uv["left"], uv["right"],
                       vis["left"], vis["right"], markers, scene.left.size,
                       complete["left"], complete["right"])


# -- rendering ---------------------------------------------------------------


def _pattern_radiance(pattern: PatternSpec, q: np.ndarray, footprint: np.ndarray):
    """Per-pixel dot coverage in [0, 1] and dot colour for projector coordinates ``q``."""
    lat = pattern_lattice(pattern)
    cols, rows = lat.shape
    grid = lat.color_grid()
    o, p = pattern.origin, pattern.dot_pitch
    qx, qy = q[..., 0], q[..., 1]
    finite = np.isfinite(qx) & np.isfinite(qy)
    ci = np.rint((np.where(finite, qx, -1e9) - o) / p)
    ri = np.rint((np.where(finite, qy, -1e9) - o) / p)
    inside = finite & (ci >= 0) & (ci < cols) & (ri >= 0) & (ri < rows)
    ci = np.where(inside, ci, 0).astype(np.intp)
    ri = np.where(inside, ri, 0).astype(np.intp)
    rho = np.hypot(qx - (o + ci * p), qy - (o + ri * p))
    # area-coverage ramp one camera pixel wide
    cover = np.clip((pattern.dot_radius - rho) / footprint + 0.5, 0.0, 1.0)
    cover = np.where(inside, cover, 0.0)
    return cover, grid[ri, ci]


def render_view(scene: SceneSpec, pattern: PatternSpec, side: str,
                rng: np.random.Generator | None = None) -> np.ndarray:
    cam = scene.left if side == "left" else scene.right
    w, h = cam.size
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    dirs = cam.directions(np.stack([uu, vv], axis=-1))
    t = _first_hit(scene.surface, cam.centre, dirs)
    hit = np.isfinite(t)
    X = cam.centre + np.where(hit, t, 0.0)[..., None] * dirs
    lit = hit & _seen_from(scene.surface, scene.projector, X)

    q = scene.projector.project(X)
    q[~lit] = np.nan
    # projector pixels spanned by one camera pixel
    gx = np.hypot(*np.gradient(q, axis=1).transpose(2, 0, 1))
    gy = np.hypot(*np.gradient(q, axis=0).transpose(2, 0, 1))
    footprint = np.nan_to_num(np.sqrt(gx * gy), nan=1.0)
    footprint = np.clip(footprint, 0.05, None)
    cover, colour = _pattern_radiance(pattern, q, footprint)

    rgb = np.array([RGB[Color(c)] for c in range(3)], dtype=np.float64) / 255.0
    # radiance may exceed the sensor range; clipping happens after noise
    img = (cover * scene.exposure)[..., None] * rgb[colour] * (255.0 - scene.ambient)
    img += np.where(lit, pattern.background, 0.0)[..., None]
    img += scene.ambient
    if scene.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(scene.blur_sigma, scene.blur_sigma, 0),
                                      mode="nearest")
    if scene.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(scene.seed)
        img = img + rng.normal(0.0, scene.noise_sigma, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_stereo(scene: SceneSpec, pattern: PatternSpec):
    """Render both views; returns ``(left, right, GroundTruth)``."""
    gt = ground_truth(scene, pattern)
    n_hit = int(gt.hit.sum())
    covis = len(gt.shared)
    if n_hit == 0 or covis < MIN_COVISIBLE * n_hit:
        raise ValueError(f"degenerate scene: {covis} of {n_hit} projected dots seen by both cameras")
    rng = np.random.default_rng(scene.seed)
    left = render_view(scene, pattern, "left", rng)
    right = render_view(scene, pattern, "right", rng)
    return left, right, gt


def evaluate_pipeline(scene: SceneSpec, pattern: PatternSpec, config=None):
    """Render, extract, match and reconstruct, then score against ground truth."""
    from .pipeline import evaluate_scene

    return evaluate_scene(scene, pattern, config)
