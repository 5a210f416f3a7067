"""From one RGB pattern image to coloured, block-labelled dot centroids.

Stages:

1. saturation histogram -> SDD threshold -> chromatic mask; closing and hole
   filling turn it into the illuminated region ``R``
2. circular SDD on the hue histogram of chromatic pixels -> one hue band per
   colour -> per-colour masks, closed so each dot block becomes one component
3. opening (or 5x5 mean) on V, regional maxima inside the chromatic mask,
   split by colour, centroids per maximum
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import imgproc as ip
from .dots import COLORS, HUE_CENTRES, Color, DotSet
from .imgproc import SddParams

FILTERS = ("opening", "box")


@dataclass(frozen=True)
class ExtractConfig:
    """Extraction knobs; radii are multiples of the dot pitch seen by the camera.

    ``dot_pitch`` is measured from the image when left as ``None``.
    """

    sdd: SddParams = field(default_factory=SddParams)
    filter: str = "opening"
    open_radius: int = 1
    dot_pitch: float | None = None
    roi_close_factor: float = 1.0
    block_close_factor: float = 0.7
    label_radius: float = 2.0
    min_area_ratio: float = 0.7

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise ValueError(f"filter must be one of {FILTERS}, got {self.filter!r}")
        if self.open_radius < 1:
            raise ValueError("open_radius must be >= 1")
        if self.dot_pitch is not None and not self.dot_pitch > 0:
            raise ValueError("dot_pitch must be positive")
        if not (self.roi_close_factor > 0 and self.block_close_factor > 0 and self.label_radius >= 0):
            raise ValueError("closing factors must be positive and label_radius >= 0")
        if not 0 <= self.min_area_ratio < 1:
            raise ValueError("min_area_ratio must be in [0, 1)")


@dataclass(frozen=True)
class HueBand:
    color: Color
    low: float
    high: float
    centre: float

    @property
    def wraps(self) -> bool:
        return self.low > self.high


@dataclass
class ExtractionArtifacts:
    roi: np.ndarray  # R: closed, hole-filled illuminated region
    chromatic: np.ndarray  # S >= T_s, before closing
    class_masks: dict  # Color -> closed block mask C_c
    dot_masks: dict  # Color -> D_c
    maxima: np.ndarray  # D
    filtered_v: np.ndarray  # V'
    s_threshold: float
    bands: dict  # Color -> HueBand
    dot_pitch: float
    blocks: dict = field(default_factory=dict)  # Color -> LabeledImage of C_c


# -- stage 1: saturation ROI --------------------------------------------------


def saturation_threshold(s: np.ndarray, params: SddParams = SddParams()) -> float:
    hist = ip.histogram(s)
    if np.count_nonzero(hist.bins) < 2:
        raise ValueError("ROI threshold not found (degenerate saturation histogram)")
    return ip.select_roi_threshold(ip.sdd_analyze(hist, params))


def _clean(mask: np.ndarray) -> np.ndarray:
    """Binary opening with the radius-1 cross: drops isolated noise specks."""
    return ndimage.binary_opening(mask, structure=ip.disk(1))


def _drop_small_plateaus(maxima: np.ndarray, ratio: float) -> np.ndarray:
    """Remove maxima plateaus smaller than ``ratio`` times the median plateau.

    Dots cut by an occluding contour and leftover noise specks produce small
    plateaus whose centroids are unreliable.
    """
    if ratio <= 0:
        return maxima
    lab = ip.connected_components(maxima)
    if lab.count == 0:
        return maxima
    area = np.bincount(lab.labels.ravel(), minlength=lab.count + 1)
    keep = area >= ratio * np.median(area[1:])
    keep[0] = False
    return keep[lab.labels]


def estimate_pitch(points: np.ndarray) -> float:
    """Median nearest-neighbour spacing of a point set."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) < 2:
        raise ValueError("too few dots to estimate the dot pitch")
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def _filtered_value(v: np.ndarray, cfg: ExtractConfig) -> np.ndarray:
    if cfg.filter == "box":
        return ip.box_filter(v, 5)
    return ip.morph_open(v, cfg.open_radius)


def _maxima_centroids(vf: np.ndarray, chromatic: np.ndarray) -> tuple[np.ndarray, ip.LabeledImage]:
    maxima = ip.regional_maxima(vf, chromatic)
    lab = ip.connected_components(maxima)
    return maxima, lab


def extract_roi(img: np.ndarray, params: SddParams = SddParams(),
                close_radius: float | None = None) -> np.ndarray:
    """Illuminated region: SDD-thresholded saturation, closed and hole-filled.

    Without ``close_radius`` the radius is the dot pitch measured from the
    regional maxima of V inside the thresholded mask.
    """
    _, s, v = ip.rgb_to_hsv(img)
    chromatic = _clean(ip.threshold_binary(s, saturation_threshold(s, params)))
    if close_radius is None:
        _, lab = _maxima_centroids(ip.morph_open(v, 1), chromatic)
        close_radius = estimate_pitch(ip.component_centroids(lab))
    return ip.fill_holes(ip.binary_close(chromatic, close_radius))


# -- stage 2: hue bands -------------------------------------------------------


def _circ_dist(a: float, b: float, n: int = ip.NBINS) -> int:
    d = abs(a - b) % n
    return min(d, n - d)


def hue_bands(h: np.ndarray, chromatic: np.ndarray,
              params: SddParams = SddParams()) -> dict[Color, HueBand]:
    """Double thresholds per colour from the circular SDD of the hue histogram."""
    if not chromatic.any():
        raise ValueError("empty ROI")
    res = ip.sdd_analyze(ip.histogram(h, chromatic), params, circular=True)
    peaks, valleys = res.peaks_of_hist, res.valleys
    if len(peaks) < 3 or len(valleys) < 2:
        raise ValueError("hue clusters unresolved")
    n = ip.NBINS
    bands = {}
    used = set()
    for c in COLORS:
        target = HUE_CENTRES[c] * (n - 1)
        centre = min(peaks, key=lambda p: _circ_dist(p, round(target)))
        if centre in used or _circ_dist(centre, round(target)) > n // 6:
            raise ValueError("hue clusters unresolved")
        used.add(centre)
        below = min(valleys, key=lambda v: (centre - v) % n)
        above = min(valleys, key=lambda v: (v - centre) % n)
        bands[c] = HueBand(c, below / 255.0, above / 255.0, centre / 255.0)
    return bands


def _hue_classes(h: np.ndarray, chromatic: np.ndarray, bands: dict[Color, HueBand]) -> dict:
    """Raw per-colour pixel sets; a pixel in two bands goes to the nearer centre."""
    hq = ip.quantize(h) / 255.0
    raw = {c: ip.threshold_band(hq, b.low, b.high, chromatic) for c, b in bands.items()}
    overlap = sum(m.astype(np.int8) for m in raw.values()) > 1
    if overlap.any():
        dist = np.stack([np.minimum(np.abs(hq - b.centre), 1 - np.abs(hq - b.centre))
                         for b in bands.values()])
        nearest = np.array(list(bands))[np.argmin(dist, axis=0)]
        for c in bands:
            raw[c] &= ~overlap | (nearest == int(c))
    return raw


def segment_color_blocks(img: np.ndarray, roi: np.ndarray, params: SddParams = SddParams(),
                         chromatic: np.ndarray | None = None, close_radius: float = 0.0,
                         hsv: tuple | None = None):
    """Per-colour block masks ``(C_r, C_g, C_b)`` inside ``roi``.

    ``close_radius`` > 0 merges the dots of a block into one component;
    pixels claimed by another colour are never added by the closing.
    ``hsv`` may pass a precomputed ``rgb_to_hsv(img)``.
    """
    roi = np.asarray(roi, dtype=bool)
    if not roi.any():
        raise ValueError("empty ROI")
    h, s, _ = hsv if hsv is not None else ip.rgb_to_hsv(img)
    if chromatic is None:
        chromatic = roi
    chromatic = chromatic & roi
    bands = hue_bands(h, chromatic, params)
    raw = _hue_classes(h, chromatic, bands)
    masks = {}
    for c in COLORS:
        m = ip.binary_close(raw[c], close_radius) if close_radius > 0 else raw[c].copy()
        others = np.zeros_like(m)
        for o in COLORS:
            if o != c:
                others |= raw[o]
        masks[c] = m & roi & ~others
    return tuple(masks[c] for c in COLORS), bands


# -- stage 3: dots ------------------------------------------------------------


def detect_dots(img: np.ndarray, roi: np.ndarray, class_masks, cfg: ExtractConfig = ExtractConfig()):
    """Regional maxima of the filtered V channel, split by colour.

    Returns ``(D, (D_r, D_g, D_b), V')``.
    """
    _, _, v = ip.rgb_to_hsv(img)
    vf = _filtered_value(v, cfg)
    maxima = _drop_small_plateaus(ip.regional_maxima(vf, roi), cfg.min_area_ratio)
    return maxima, tuple(maxima & m for m in class_masks), vf


def _block_labels(centroids: np.ndarray, blocks: ip.LabeledImage, radius: float) -> np.ndarray:
    """Label of the block under each centroid, else of the nearest block pixel within ``radius``."""
    labels = blocks.labels
    h, w = labels.shape
    xi = np.clip(np.rint(centroids[:, 0]).astype(np.intp), 0, w - 1)
    yi = np.clip(np.rint(centroids[:, 1]).astype(np.intp), 0, h - 1)
    out = labels[yi, xi].astype(np.int32)
    missing = np.flatnonzero(out == 0)
    if missing.size and blocks.count:
        ys, xs = np.nonzero(labels)
        tree = cKDTree(np.column_stack([xs, ys]))
        d, j = tree.query(centroids[missing], distance_upper_bound=radius + 1e-9)
        found = np.isfinite(d)
        out[missing[found]] = labels[ys[j[found]], xs[j[found]]]
    return out


def extract(img: np.ndarray, cfg: ExtractConfig | SddParams | None = None,
            source: str = "left") -> tuple[DotSet, ExtractionArtifacts]:
    """Run the full extraction on an (H, W, 3) uint8 image."""
    if cfg is None:
        cfg = ExtractConfig()
    elif isinstance(cfg, SddParams):
        cfg = ExtractConfig(sdd=cfg)
    img = np.asarray(img)
    h, s, v = ip.rgb_to_hsv(img)
    t_s = saturation_threshold(s, cfg.sdd)
    chromatic = _clean(ip.threshold_binary(s, t_s))
    vf = _filtered_value(v, cfg)

    maxima = _drop_small_plateaus(ip.regional_maxima(vf, chromatic), cfg.min_area_ratio)
    all_lab = ip.connected_components(maxima)
    pitch = cfg.dot_pitch or estimate_pitch(ip.component_centroids(all_lab))

    roi = ip.fill_holes(ip.binary_close(chromatic, cfg.roi_close_factor * pitch))
    class_masks, bands = segment_color_blocks(img, roi, cfg.sdd, chromatic,
                                              cfg.block_close_factor * pitch, (h, s, v))
    dot_masks = tuple(maxima & m for m in class_masks)

    xy, color, block = [], [], []
    blocks = {}
    for c, cm, dm in zip(COLORS, class_masks, dot_masks):
        blk = ip.connected_components(cm)
        blocks[c] = blk
        cen = ip.component_centroids(ip.connected_components(dm))
        if len(cen) == 0:
            continue
        lab = _block_labels(cen, blk, cfg.label_radius)
        keep = lab > 0
        xy.append(cen[keep])
        color.append(np.full(int(keep.sum()), int(c), dtype=np.int8))
        block.append(lab[keep])

    size = (img.shape[1], img.shape[0])
    if xy:
        dots = DotSet(np.concatenate(xy), np.concatenate(color), np.concatenate(block), source, size)
    else:
        dots = DotSet.empty(source, size)
    art = ExtractionArtifacts(roi, chromatic, dict(zip(COLORS, class_masks)),
                              dict(zip(COLORS, dot_masks)), maxima, vf, t_s, bands, pitch, blocks)
    return dots, art
