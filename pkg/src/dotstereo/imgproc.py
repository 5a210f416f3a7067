"""Low-level raster primitives used by the dot extraction pipeline.

Images are plain numpy arrays:

* scalar images: ``float64`` arrays of shape (H, W) with values in [0, 1]
* RGB images: ``uint8`` arrays of shape (H, W, 3)
* masks: ``bool`` arrays of shape (H, W)

Coordinates follow the usual convention: ``x`` runs along columns and ``y``
along rows, with pixel centres at integer positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

NBINS = 256
GAP_SMOOTHING = 11  # bins in the box filter applied before locating a gap minimum

_EIGHT = np.ones((3, 3), dtype=bool)
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class Histogram:
    bins: np.ndarray  # (256,) int64 counts
    total: int


@dataclass(frozen=True)
class SddParams:
    """Parameters of slope-difference-distribution histogram analysis.

    ``bandwidth_w`` is the number of low frequency DFT components kept when
    smoothing the histogram; ``fit_n`` is the length (in bins) of the line
    fits on either side of each bin.
    """

    bandwidth_w: int = 10
    fit_n: int = 20

    def __post_init__(self):
        if not 1 <= self.bandwidth_w <= 128:
            raise ValueError(f"bandwidth_w must be in [1, 128], got {self.bandwidth_w}")
        if not 2 <= self.fit_n <= 64:
            raise ValueError(f"fit_n must be in [2, 64], got {self.fit_n}")


@dataclass(frozen=True)
class SddResult:
    smoothed: np.ndarray  # (256,)
    slope_diff: np.ndarray  # (256,), NaN where undefined
    valleys: list[int]
    peaks_of_hist: list[int]
    valley_strength: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class LabeledImage:
    labels: np.ndarray  # (H, W) int32, 0 = background
    count: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def rgb_to_hsv(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hexcone HSV with every channel in [0, 1].

    Hue is 0 for red, 1/3 for green and 2/3 for blue, and 0 wherever the
    saturation is 0.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.size == 0:
        raise ValueError("expected a non-empty (H, W, 3) image")
    rgb = img.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    vmax = rgb.max(axis=2)
    vmin = rgb.min(axis=2)
    delta = vmax - vmin

    s = np.zeros_like(vmax)
    lit = vmax > 0
    s[lit] = delta[lit] / vmax[lit]

    h = np.zeros_like(vmax)
    chroma = delta > 0
    safe = np.where(chroma, delta, 1.0)
    is_r = chroma & (vmax == r)
    is_g = chroma & (vmax == g) & ~is_r
    is_b = chroma & ~is_r & ~is_g
    h[is_r] = np.mod((g - b)[is_r] / safe[is_r], 6.0)
    h[is_g] = (b - r)[is_g] / safe[is_g] + 2.0
    h[is_b] = (r - g)[is_b] / safe[is_b] + 4.0
    h /= 6.0
    h[h >= 1.0] = 0.0
    return h, s, vmax


def quantize(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to histogram bins with ``floor(v * 255 + 0.5)``."""
    q = np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(q, 0, NBINS - 1).astype(np.intp)


def histogram(img: np.ndarray, mask: np.ndarray | None = None) -> Histogram:
    img = np.asarray(img)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != img.shape:
            raise ValueError(f"mask shape {mask.shape} does not match image {img.shape}")
        values = img[mask]
    else:
        values = img.ravel()
    if values.size == 0:
        raise ValueError("no pixels")
    bins = np.bincount(quantize(values), minlength=NBINS).astype(np.int64)
    return Histogram(bins=bins, total=int(values.size))


def lowpass(bins: np.ndarray, bandwidth_w: int) -> np.ndarray:
    """Zero every DFT component above ``bandwidth_w`` and transform back."""
    spectrum = np.fft.rfft(np.asarray(bins, dtype=np.float64))
    spectrum[bandwidth_w + 1 :] = 0.0
    return np.fft.irfft(spectrum, n=len(bins))


def _slope_kernel(n: int) -> np.ndarray:
    # least-squares slope over n+1 equally spaced samples is a fixed linear filter
    t = np.arange(n + 1, dtype=np.float64)
    t -= t.mean()
    return t / np.dot(t, t)


def slope_difference(smoothed: np.ndarray, fit_n: int, circular: bool = False) -> np.ndarray:
    """Right-window slope minus left-window slope at every bin.

    Bins whose windows would leave the histogram are NaN unless ``circular``.
    """
    y = np.asarray(smoothed, dtype=np.float64)
    n = len(y)
    k = _slope_kernel(fit_n)
    if circular:
        idx = np.arange(n)[:, None] + np.arange(fit_n + 1)[None, :]
        right = y[idx % n] @ k
        left = y[(idx - fit_n) % n] @ k
        return right - left
    out = np.full(n, np.nan)
    x = np.arange(fit_n, n - fit_n)
    idx = x[:, None] + np.arange(fit_n + 1)[None, :]
    out[x] = y[idx] @ k - y[idx - fit_n] @ k
    return out


def _local_extrema(s: np.ndarray, circular: bool) -> tuple[list[int], list[int]]:
    """Indices of strict local maxima and minima, plateaus reduced to their middle."""
    valid = ~np.isnan(s)
    idx = np.flatnonzero(valid)
    if idx.size < 3:
        return [], []
    vals = s[idx]
    # collapse runs of equal values
    starts = np.concatenate([[0], np.flatnonzero(np.diff(vals) != 0) + 1])
    ends = np.concatenate([starts[1:], [len(vals)]])
    run_vals = vals[starts]
    m = len(run_vals)
    maxima, minima = [], []
    if circular and m < 3:
        return maxima, minima
    for r in range(m):
        if circular:
            prev, nxt = run_vals[(r - 1) % m], run_vals[(r + 1) % m]
        else:
            if r == 0 or r == m - 1:
                continue
            prev, nxt = run_vals[r - 1], run_vals[r + 1]
        centre = int(idx[(starts[r] + ends[r] - 1) // 2])
        if run_vals[r] > prev and run_vals[r] > nxt:
            maxima.append(centre)
        elif run_vals[r] < prev and run_vals[r] < nxt:
            minima.append(centre)
    return maxima, minima


def _gap_minimum(density: np.ndarray, lo: int, hi: int) -> int:
    """Lowest bin strictly between ``lo`` and ``hi`` (circular), middle of ties."""
    n = len(density)
    width = (hi - lo) % n or n
    span = np.arange(lo + 1, lo + width) % n
    if span.size == 0:
        return int(lo)
    vals = density[span]
    ties = span[vals <= vals.min()]
    return int(ties[len(ties) // 2])


PEAK_PROMINENCE = 1.5  # a cluster centre must exceed both neighbouring gaps by this factor
GAP_FLOOR = 0.002  # gaps emptier than this fraction of the highest density count as this


def _span_min(density: np.ndarray, lo: int | None, hi: int | None) -> float:
    """Minimum density strictly between two bins; ``None`` means the histogram edge."""
    n = len(density)
    if lo is None:
        seg = density[:hi]
    elif hi is None:
        seg = density[lo + 1 :]
    else:
        width = (hi - lo) % n or n
        seg = density[np.arange(lo + 1, lo + width) % n]
    return float(seg.min()) if seg.size else 0.0


def _prune_ripple_peaks(merged: list, density: np.ndarray, circular: bool) -> list:
    """Drop cluster centres that do not rise above the gaps around them.

    Low-pass ringing next to a narrow mode shows up as extra slope-difference
    extrema inside an empty gap or on the flank of a wide mode; the density at
    such a centre is no higher than the gap beside it.
    """
    n = len(density)
    floor = GAP_FLOOR * float(density.max())
    while True:
        pos = [j for j, (k, _) in enumerate(merged) if k == "p"]
        if len(pos) <= 1:
            return merged
        idx = [merged[j][1] for j in pos]
        scores = []
        for m, i in enumerate(idx):
            height = float(density[i])
            if circular:
                lo, hi = idx[m - 1], idx[(m + 1) % len(idx)]
            else:
                lo = idx[m - 1] if m > 0 else None
                hi = idx[m + 1] if m + 1 < len(idx) else None
            gap = max(_span_min(density, lo, i), _span_min(density, i, hi), floor)
            scores.append(height / gap if gap > 0 else np.inf)
        worst = int(np.argmin(scores))
        if scores[worst] >= PEAK_PROMINENCE:
            return merged
        j = pos[worst]
        del merged[j]
        # the valley groups on either side now describe one gap
        if 0 < j < len(merged) and merged[j - 1][0] == "v" and merged[j][0] == "v":
            merged[j - 1][1].extend(merged.pop(j)[1])
        elif circular and j == len(merged) and merged and merged[0][0] == "v" and merged[-1][0] == "v" \
                and len(merged) > 1:
            merged[0][1] = merged.pop()[1] + merged[0][1]


def _pair_up(valleys: list[int], peaks: list[int], s: np.ndarray, density: np.ndarray,
             circular: bool, edge_lo: int, edge_hi: int):
    """Reduce raw extrema to alternating cluster centres and partition points.

    Runs of consecutive peaks keep the deepest one. Valley candidates between
    two consecutive peaks are evidence of one low-density gap; the partition
    point is the lowest ``density`` bin strictly between those peaks. For
    well separated modes the slope difference alone marks the two feet of
    the gap rather than its bottom. In the linear case, candidates before the first peak (after
    the last) only survive when the box-smoothed histogram rises to at least
    twice its candidate value towards the edge, i.e. a cluster sits at the
    edge of the analysable range rather than a plain tail; the edge is then
    reported as that cluster's centre.
    """
    events = sorted([(i, "v") for i in valleys] + [(i, "p") for i in peaks])
    merged: list[list] = []  # ["p", idx] or ["v", [candidates]]
    for i, kind in events:
        if kind == "p":
            if merged and merged[-1][0] == "p":
                if s[i] < s[merged[-1][1]]:
                    merged[-1][1] = i
            else:
                merged.append(["p", i])
        else:
            if merged and merged[-1][0] == "v":
                merged[-1][1].append(i)
            else:
                merged.append(["v", [i]])
    merged = _prune_ripple_peaks(merged, density, circular)

    if circular:
        if len(merged) > 1 and merged[0][0] == merged[-1][0]:
            first, last = merged[0], merged.pop()
            if first[0] == "v":
                first[1] = last[1] + first[1]
            elif s[last[1]] < s[first[1]]:
                first[1] = last[1]
        if not any(k == "p" for k, _ in merged):
            return [], [], []
    else:
        floor = 0.01 * density.max()
        if merged and merged[0][0] == "v":
            c = merged[0][1][0]
            if density[:c].max() > max(2.0 * density[c], floor):
                merged.insert(0, ["p", edge_lo])
            else:
                merged.pop(0)
        if merged and merged[-1][0] == "v":
            c = merged[-1][1][-1]
            if density[c + 1 :].max() > max(2.0 * density[c], floor):
                merged.append(["p", edge_hi])
            else:
                merged.pop()

    peaks_at = [(j, i) for j, (k, i) in enumerate(merged) if k == "p"]
    out_v, strength = [], []
    for j, (k, cands) in enumerate(merged):
        if k != "v":
            continue
        before = [i for jj, i in peaks_at if jj < j]
        after = [i for jj, i in peaks_at if jj > j]
        lo = before[-1] if before else peaks_at[-1][1]
        hi = after[0] if after else peaks_at[0][1]
        out_v.append(_gap_minimum(density, lo, hi))
        strength.append(float(max(s[c] for c in cands)))
    order = np.argsort(out_v, kind="stable")
    out_p = sorted(i for k, i in merged if k == "p")
    return [out_v[o] for o in order], out_p, [strength[o] for o in order]


def sdd_analyze(hist: Histogram, params: SddParams = SddParams(),
                circular: bool = False, rel_tol: float = 0.02) -> SddResult:
    """Slope difference distribution of a histogram.

    Local maxima of the slope difference mark histogram valleys, local
    minima mark cluster centres. Extrema with the wrong sign or a magnitude
    below ``rel_tol`` times the largest magnitude are smoothing ripple and
    are discarded. ``circular`` treats the bins as periodic (hue).
    """
    if hist.total <= 0:
        raise ValueError("empty histogram")
    bins = np.asarray(hist.bins, dtype=np.float64)
    smoothed = lowpass(bins, params.bandwidth_w)
    s = slope_difference(smoothed, params.fit_n, circular=circular)

    nonzero = np.flatnonzero(bins)
    if nonzero.size == 1:
        return SddResult(smoothed, s, [], [int(nonzero[0])])

    maxima, minima = _local_extrema(s, circular)
    scale = np.nanmax(np.abs(s))
    floor = rel_tol * scale if scale > 0 else 0.0
    valleys = [i for i in maxima if s[i] > floor]
    peaks = [i for i in minima if s[i] < -floor]
    n = params.fit_n
    # light box smoothing keeps sampling noise from picking an arbitrary
    # empty bin inside a wide gap
    density = ndimage.uniform_filter1d(bins, GAP_SMOOTHING,
                                       mode="wrap" if circular else "nearest")
    valleys, peaks, strength = _pair_up(valleys, peaks, s, density, circular,
                                        n, len(bins) - 1 - n)
    return SddResult(smoothed, s, valleys, peaks, strength)


def select_roi_threshold(result: SddResult) -> float:
    """Pick the valley with the strongest slope difference as a [0, 1] threshold."""
    if not result.valleys:
        raise ValueError("ROI threshold not found")
    strength = result.valley_strength or [result.slope_diff[i] for i in result.valleys]
    best = result.valleys[int(np.argmax(strength))]
    return best / 255.0


def threshold_binary(img: np.ndarray, t: float) -> np.ndarray:
    return np.asarray(img) >= t


def threshold_band(img: np.ndarray, low: float, high: float,
                   roi: np.ndarray | None = None) -> np.ndarray:
    """Inclusive band ``low <= img <= high``; ``low > high`` wraps around 0."""
    img = np.asarray(img)
    if low <= high:
        out = (img >= low) & (img <= high)
    else:
        out = (img >= low) | (img <= high)
    if roi is not None:
        out &= np.asarray(roi, dtype=bool)
    return out


def box_filter(img: np.ndarray, size: int = 5) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if min(img.shape) < size:
        raise ValueError(f"image must be at least {size}x{size}")
    return ndimage.uniform_filter(img, size=size, mode="nearest")


def disk(radius: int) -> np.ndarray:
    """Discrete disk footprint. Radius 1 is the 5-pixel cross."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= r * r


def morph_open(img: np.ndarray, radius: int = 1) -> np.ndarray:
    fp = disk(radius)
    img = np.asarray(img, dtype=np.float64)
    eroded = ndimage.grey_erosion(img, footprint=fp, mode="nearest")
    return ndimage.grey_dilation(eroded, footprint=fp, mode="nearest")


def binary_close(mask: np.ndarray, radius: float) -> np.ndarray:
    """Binary closing by a Euclidean disk, computed with distance transforms.

    The image border is not treated as background, so regions touching the
    border are not eroded away.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    # work inside the bounding box grown by the radius plus a background ring
    pad = int(np.ceil(radius)) + 2
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1 = max(rows[0] - pad, 0), min(rows[-1] + pad + 1, mask.shape[0])
    c0, c1 = max(cols[0] - pad, 0), min(cols[-1] + pad + 1, mask.shape[1])
    crop = mask[r0:r1, c0:c1]
    dilated = ndimage.distance_transform_edt(~crop) <= radius
    out = np.zeros_like(mask)
    if dilated.all():
        out[r0:r1, c0:c1] = dilated
    else:
        out[r0:r1, c0:c1] = ndimage.distance_transform_edt(dilated) > radius
    return out


def fill_holes(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool))


def _neighbour_views(a: np.ndarray, pad_value):
    """Yield the 8 shifted copies of ``a`` (neighbour values at each pixel)."""
    h, w = a.shape
    p = np.pad(a, 1, mode="constant", constant_values=pad_value)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            yield p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]


def regional_maxima(img: np.ndarray, roi: np.ndarray | None = None) -> np.ndarray:
    """8-connected plateaus inside ``roi`` with no higher neighbour inside ``roi``."""
    img = np.asarray(img, dtype=np.float64)
    roi = np.ones(img.shape, dtype=bool) if roi is None else np.asarray(roi, dtype=bool)
    if roi.shape != img.shape:
        raise ValueError("roi shape does not match image")
    if not roi.any():
        return np.zeros(img.shape, dtype=bool)

    # a pixel with a strictly greater in-roi neighbour can never be a maximum
    vals = np.where(roi, img, -np.inf)
    neighbour_max = np.full(img.shape, -np.inf)
    for view in _neighbour_views(vals, -np.inf):
        np.maximum(neighbour_max, view, out=neighbour_max)
    cand = roi & (img >= neighbour_max)

    # adjacent candidates are necessarily equal-valued, so candidate components
    # are pieces of plateaus; a piece touching an equal non-candidate is not maximal
    spoiled = np.zeros(img.shape, dtype=bool)
    noncand_vals = np.where(roi & ~cand, img, np.nan)
    for view in _neighbour_views(noncand_vals, np.nan):
        spoiled |= view == img
    spoiled &= cand

    labels, n = ndimage.label(cand, structure=_EIGHT)
    if n == 0:
        return cand
    bad = np.zeros(n + 1, dtype=bool)
    bad[np.unique(labels[spoiled])] = True
    bad[0] = True
    return ~bad[labels]


def connected_components(mask: np.ndarray) -> LabeledImage:
    """8-connected labelling; labels follow raster-scan first-encounter order."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_EIGHT)
    return LabeledImage(labels=labels.astype(np.int32, copy=False), count=int(n))


def component_centroids(labels: LabeledImage) -> np.ndarray:
    """(count, 2) array of (x, y) member-pixel means, row k-1 for label k."""
    if labels.count == 0:
        return np.zeros((0, 2))
    lab = labels.labels.ravel()
    ys, xs = np.indices(labels.shape)
    n = labels.count + 1
    counts = np.bincount(lab, minlength=n)[1:].astype(np.float64)
    sx = np.bincount(lab, weights=xs.ravel(), minlength=n)[1:]
    sy = np.bincount(lab, weights=ys.ravel(), minlength=n)[1:]
    return np.column_stack([sx / counts, sy / counts])
