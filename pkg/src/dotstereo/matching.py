"""Stereo correspondence between two extracted dot sets.

Shifts are signed: ``total_shift`` is the horizontal displacement that
carries the left view onto the right one, so a left point ``x`` is expected
near ``x + total_shift`` in the right image.

Pipeline:

1. align the two illuminated regions horizontally
2. match green and blue blocks by label overlap after the shift
3. match dots inside every block pair (seed correspondences)
4. repeat: fit a left->right mapping from two colours, re-match the third
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import imgproc as ip
from .dots import COLORS, Color, DotSet
from .interp import ScatteredField

SEED_COLORS = (Color.GREEN, Color.BLUE)


@dataclass(frozen=True)
class MatchConfig:
    roi_delta: int = 10
    dot_delta: int = 5
    gate_factor: float = 0.5
    max_iterations: int = 20
    block_preshift: bool = True  # pre-shift each block pair by its own mean offset

    def __post_init__(self):
        if self.roi_delta < 1 or self.dot_delta < 1:
            raise ValueError("search windows must be positive")
        if not self.gate_factor > 0:
            raise ValueError("gate_factor must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


# -- correspondences ---------------------------------------------------------


@dataclass
class CorrespondenceSet:
    left: DotSet
    right: DotSet
    pairs: np.ndarray  # (K, 2) int: left index, right index

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.intp).reshape(-1, 2)
        if len(self.pairs):
            li, ri = self.pairs[:, 0], self.pairs[:, 1]
            if len(np.unique(li)) != len(li) or len(np.unique(ri)) != len(ri):
                raise ValueError("correspondences are not one-to-one")
            if np.any(self.left.color[li] != self.right.color[ri]):
                raise ValueError("paired dots differ in colour")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def left_xy(self) -> np.ndarray:
        return self.left.xy[self.pairs[:, 0]]

    @property
    def right_xy(self) -> np.ndarray:
        return self.right.xy[self.pairs[:, 1]]

    @property
    def color(self) -> np.ndarray:
        return self.left.color[self.pairs[:, 0]]

    def key(self) -> frozenset:
        return frozenset(map(tuple, self.pairs.tolist()))

    def to_dict(self) -> dict:
        return {"pairs": [
            {"lx": float(a[0]), "ly": float(a[1]), "rx": float(b[0]), "ry": float(b[1]),
             "color": Color(int(c)).label}
            for a, b, c in zip(self.left_xy, self.right_xy, self.color)
        ]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lx", "ly", "rx", "ry", "color"])
        for row in self.to_dict()["pairs"]:
            w.writerow([repr(row["lx"]), repr(row["ly"]), repr(row["rx"]), repr(row["ry"]), row["color"]])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "CorrespondenceSet":
        rows = d["pairs"]
        color = np.array([int(Color.parse(p["color"])) for p in rows], dtype=np.int8)
        lxy = np.array([[p["lx"], p["ly"]] for p in rows], dtype=np.float64).reshape(-1, 2)
        rxy = np.array([[p["rx"], p["ry"]] for p in rows], dtype=np.float64).reshape(-1, 2)
        zeros = np.zeros(len(rows), dtype=np.int32)
        idx = np.arange(len(rows))
        return cls(DotSet(lxy, color, zeros, "left"), DotSet(rxy, color, zeros, "right"),
                   np.column_stack([idx, idx]))

    @classmethod
    def from_json(cls, text: str) -> "CorrespondenceSet":
        return cls.from_dict(json.loads(text))


# -- ROI alignment -----------------------------------------------------------


@dataclass(frozen=True)
class RoiAlignment:
    base_shift: int
    delta: int
    overlap: int = 0

    @property
    def total_shift(self) -> int:
        return self.base_shift + self.delta


def shift_x(a: np.ndarray, dx: int, fill=0) -> np.ndarray:
    """Translate an image horizontally by an integer number of pixels."""
    out = np.full_like(a, fill)
    w = a.shape[1]
    if dx >= 0:
        if dx < w:
            out[:, dx:] = a[:, : w - dx]
    elif -dx < w:
        out[:, :dx] = a[:, -dx:]
    return out


def _overlap(left: np.ndarray, right: np.ndarray, dx: int) -> int:
    w = left.shape[1]
    if abs(dx) >= w:
        return 0
    if dx >= 0:
        return int(np.count_nonzero(left[:, : w - dx] & right[:, dx:]))
    return int(np.count_nonzero(left[:, -dx:] & right[:, : w + dx]))


def align_rois(roi_left: np.ndarray, roi_right: np.ndarray, max_delta: int = 10) -> RoiAlignment:
    """Centroid shift refined by the integer offset that maximises ROI overlap."""
    roi_left = np.asarray(roi_left, dtype=bool)
    roi_right = np.asarray(roi_right, dtype=bool)
    if roi_left.shape != roi_right.shape:
        raise ValueError("ROI masks differ in size")
    if not roi_left.any() or not roi_right.any():
        raise ValueError("empty ROI")
    xl = np.nonzero(roi_left)[1].mean()
    xr = np.nonzero(roi_right)[1].mean()
    base = int(math.floor(xr - xl + 0.5))
    best = None
    for delta in sorted(range(-max_delta, max_delta + 1), key=lambda d: (abs(d), d)):
        ov = _overlap(roi_left, roi_right, base + delta)
        if best is None or ov > best[1]:
            best = (delta, ov)
    return RoiAlignment(base, best[0], best[1])


# -- block matching ----------------------------------------------------------


@dataclass(frozen=True)
class BlockMatch:
    left_label: int
    right_label: int
    overlap: int


def label_digits(n_right: int) -> int:
    """Decimal digits reserved for right labels: ``1 + floor(log10 n_right)``."""
    if n_right < 1:
        raise ValueError("need at least one right label")
    return len(str(int(n_right)))


def encode_labels(left: np.ndarray, right: np.ndarray, n_right: int) -> np.ndarray:
    """Composite labels ``left * 10**rho + right``."""
    return np.asarray(left, dtype=np.int64) * 10 ** label_digits(n_right) + np.asarray(right, dtype=np.int64)


def decode_labels(code: np.ndarray, n_right: int) -> tuple[np.ndarray, np.ndarray]:
    scale = 10 ** label_digits(n_right)
    code = np.asarray(code, dtype=np.int64)
    return code // scale, code % scale


def _as_labels(x) -> ip.LabeledImage:
    if isinstance(x, ip.LabeledImage):
        return x
    return ip.connected_components(np.asarray(x, dtype=bool))


def match_blocks(c_left, c_right, shift: RoiAlignment | int) -> list[BlockMatch]:
    """One-to-one block pairs by overlap of the shifted left labels with the right labels.

    Masks are labelled in their own image coordinates, so the labels agree
    with the block labels stored on extracted dots.
    """
    dx = shift.total_shift if isinstance(shift, RoiAlignment) else int(shift)
    ll = _as_labels(c_left)
    lr = _as_labels(c_right)
    if lr.count == 0 or ll.count == 0:
        return []
    moved = shift_x(ll.labels, dx)
    both = (moved > 0) & (lr.labels > 0)
    codes, votes = np.unique(encode_labels(moved[both], lr.labels[both], lr.count), return_counts=True)
    a, b = decode_labels(codes, lr.count)
    order = sorted(range(len(codes)), key=lambda k: (-votes[k], a[k], b[k]))
    used_l, used_r, out = set(), set(), []
    for k in order:
        if a[k] in used_l or b[k] in used_r:
            continue
        used_l.add(int(a[k]))
        used_r.add(int(b[k]))
        out.append(BlockMatch(int(a[k]), int(b[k]), int(votes[k])))
    return out


# -- dot matching ------------------------------------------------------------


def median_spacing(xy: np.ndarray) -> float:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if len(xy) < 2:
        return math.inf
    d, _ = cKDTree(xy).query(xy, k=2)
    return float(np.median(d[:, 1]))


def greedy_pairs(a: np.ndarray, b: np.ndarray, gate: float, k: int = 8) -> np.ndarray:
    """One-to-one nearest pairs between point sets, shortest distance first.

    Only pairs closer than ``gate`` are considered; ties break on indices.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=np.intp)
    k = min(k, len(b))
    d, j = cKDTree(b).query(a, k=k, distance_upper_bound=gate)
    d = d.reshape(len(a), k)
    j = j.reshape(len(a), k)
    i = np.repeat(np.arange(len(a)), k)
    d, j = d.ravel(), j.ravel()
    ok = np.isfinite(d) & (d <= gate)
    i, j, d = i[ok], j[ok], d[ok]
    order = np.lexsort((j, i, d))
    used_a = np.zeros(len(a), bool)
    used_b = np.zeros(len(b), bool)
    out = []
    for t in order:
        if used_a[i[t]] or used_b[j[t]]:
            continue
        used_a[i[t]] = used_b[j[t]] = True
        out.append((i[t], j[t]))
    return np.array(out, dtype=np.intp).reshape(-1, 2)


def block_offset(left_xy: np.ndarray, right_xy: np.ndarray, max_delta: int = 5) -> int:
    """Integer residual shift minimising the all-pairs distance sum.

    Left points are moved by ``-delta`` along x; ties go to the smallest
    ``|delta|``.
    """
    left_xy = np.asarray(left_xy, dtype=np.float64).reshape(-1, 2)
    right_xy = np.asarray(right_xy, dtype=np.float64).reshape(-1, 2)
    dy = left_xy[:, None, 1] - right_xy[None, :, 1]
    best, best_sum = 0, None
    for delta in sorted(range(-max_delta, max_delta + 1), key=lambda d: (abs(d), d)):
        dx = left_xy[:, None, 0] - delta - right_xy[None, :, 0]
        total = float(np.sqrt(dx * dx + dy * dy).sum())
        if best_sum is None or total < best_sum - 1e-9 * max(1.0, best_sum):
            best, best_sum = delta, total
    return best


def match_dots_in_block(left_xy: np.ndarray, right_xy: np.ndarray, total_shift: float = 0.0,
                        max_delta: int = 5, gate: float | None = None,
                        gate_factor: float = 0.5, fallback_gate: float = math.inf):
    """Pair dots of one matched block pair.

    ``left_xy`` is in left-image coordinates; it is moved by ``total_shift``
    and then by the best residual ``-delta``. The default gate is
    ``gate_factor`` times the median nearest-neighbour spacing of the right
    dots, or ``fallback_gate`` for blocks with a single right dot.

    Returns ``(pairs, delta)``.
    """
    left_xy = np.asarray(left_xy, dtype=np.float64).reshape(-1, 2)
    right_xy = np.asarray(right_xy, dtype=np.float64).reshape(-1, 2)
    if len(left_xy) == 0 or len(right_xy) == 0:
        return np.zeros((0, 2), dtype=np.intp), 0
    moved = left_xy + np.array([total_shift, 0.0])
    delta = block_offset(moved, right_xy, max_delta)
    if gate is None:
        spacing = median_spacing(right_xy)
        gate = gate_factor * spacing if math.isfinite(spacing) else fallback_gate
    return greedy_pairs(moved - np.array([delta, 0.0]), right_xy, gate), delta


# -- mapping fields ----------------------------------------------------------


class MappingField:
    """Left-to-right coordinate map interpolated through matched dots.

    The displacement ``right - left`` is what gets interpolated, so outside
    the hull of the sites a query inherits the shift of its nearest site
    instead of collapsing onto that site's right position.
    """

    def __init__(self, left_xy: np.ndarray, right_xy: np.ndarray):
        self.sites = np.asarray(left_xy, dtype=np.float64).reshape(-1, 2)
        self.values = np.asarray(right_xy, dtype=np.float64).reshape(-1, 2)
        self._field = ScatteredField(self.sites, self.values - self.sites)
        self._tree = cKDTree(self.sites)

    def __call__(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Predicted right coordinates and an inside-hull flag per query."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        shift, inside = self._field(xy)
        out = xy + shift
        dist, nearest = self._tree.query(xy)
        exact = dist == 0
        out[exact] = self.values[nearest[exact]]
        return out, inside

    @property
    def values_x(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def values_y(self) -> np.ndarray:
        return self.values[:, 1]


def build_mapping(corr: CorrespondenceSet, colors=None) -> MappingField:
    sel = np.ones(len(corr), bool) if colors is None else np.isin(corr.color, [int(c) for c in colors])
    return MappingField(corr.left_xy[sel], corr.right_xy[sel])


def match_by_fit(mapping: MappingField, left_xy: np.ndarray, right_xy: np.ndarray,
                 gate: float) -> np.ndarray:
    """Pair left dots with the right dots nearest to their mapped positions."""
    left_xy = np.asarray(left_xy, dtype=np.float64).reshape(-1, 2)
    if len(left_xy) == 0 or len(right_xy) == 0:
        return np.zeros((0, 2), dtype=np.intp)
    predicted, _ = mapping(left_xy)
    return greedy_pairs(predicted, right_xy, gate)


# -- iterative refinement ----------------------------------------------------


@dataclass
class MatchState:
    """Per-colour pairs as (left index, right index) arrays into the full DotSets."""

    pairs: dict = field(default_factory=dict)

    def get(self, c: Color) -> np.ndarray:
        return self.pairs.get(c, np.zeros((0, 2), dtype=np.intp))

    def key(self) -> tuple:
        return tuple(tuple(sorted(map(tuple, self.get(c).tolist()))) for c in COLORS)

    def all_pairs(self) -> np.ndarray:
        parts = [self.get(c) for c in COLORS]
        out = np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.intp)
        return out[np.lexsort((out[:, 1], out[:, 0]))] if len(out) else out.reshape(-1, 2)

    def count(self) -> int:
        return sum(len(self.get(c)) for c in COLORS)


@dataclass
class MatchResult:
    correspondences: CorrespondenceSet
    alignment: RoiAlignment | None
    blocks: dict  # Color -> list[BlockMatch]
    seed: CorrespondenceSet
    cycles: int
    converged: bool
    block_deltas: dict = field(default_factory=dict)  # (Color, left label) -> residual delta


def _block_preshifts(left: DotSet, right: DotSet, pairs: list, shift: int) -> list[int]:
    """Integer preshift per block pair from the difference of dot centroids.

    A block cut by an image border or a contour has fewer dots in one view,
    which moves its centroid by a fraction of the block. Such blocks borrow
    the preshift of the nearest block seen whole in both views.
    """
    whole, cut, out = [], [], []
    for li, ri in pairs:
        c = left.xy[li].mean(axis=0)
        if len(li) == len(ri):
            whole.append(c)
            out.append(int(math.floor(right.xy[ri, 0].mean() - c[0] + 0.5)))
        else:
            cut.append(len(out))
            out.append(shift)
    if whole and cut:
        tree = cKDTree(np.array(whole))
        ref = [v for (li, ri), v in zip(pairs, out) if len(li) == len(ri)]
        for k in cut:
            _, j = tree.query(left.xy[pairs[k][0]].mean(axis=0))
            out[k] = ref[j]
    return out


def seed_matches(left: DotSet, right: DotSet, blocks: dict, shift: int,
                 cfg: MatchConfig = MatchConfig()) -> tuple[MatchState, dict]:
    """Intra-block matches for every matched green and blue block pair."""
    fallback = cfg.gate_factor * median_spacing(right.xy)
    state = MatchState()
    deltas = {}
    for c in SEED_COLORS:
        found, members, labels = [], [], []
        for bm in blocks.get(c, []):
            li = left.indices(c, bm.left_label)
            ri = right.indices(c, bm.right_label)
            if len(li) and len(ri):
                members.append((li, ri))
                labels.append(bm.left_label)
        if cfg.block_preshift:
            pres = _block_preshifts(left, right, members, shift)
        else:
            pres = [shift] * len(members)
        for (li, ri), label, pre in zip(members, labels, pres):
            pairs, delta = match_dots_in_block(left.xy[li], right.xy[ri], pre, cfg.dot_delta,
                                               gate_factor=cfg.gate_factor, fallback_gate=fallback)
            deltas[(c, label)] = delta
            if len(pairs):
                found.append(np.column_stack([li[pairs[:, 0]], ri[pairs[:, 1]]]))
        state.pairs[c] = np.concatenate(found) if found else np.zeros((0, 2), dtype=np.intp)
    return state, deltas


def drop_inconsistent(left: DotSet, right: DotSet, state: MatchState, gate: float,
                      neighbours: int = 6) -> MatchState:
    """Remove pairs whose displacement departs from their neighbours' median by more than ``gate``.

    A block that lost a dot in one view can be matched one pitch off; its
    displacement then disagrees with the surrounding blocks.
    """
    pairs = state.all_pairs()
    if len(pairs) <= neighbours:
        return state
    lxy = left.xy[pairs[:, 0]]
    disp = right.xy[pairs[:, 1]] - lxy
    _, nn = cKDTree(lxy).query(lxy, k=neighbours + 1)
    local = np.median(disp[nn[:, 1:]], axis=1)
    bad = np.hypot(*(disp - local).T) > gate
    if not bad.any():
        return state
    drop = set(map(tuple, pairs[bad].tolist()))
    out = MatchState()
    for c, p in state.pairs.items():
        keep = np.array([tuple(r) not in drop for r in p.tolist()], dtype=bool)
        out.pairs[c] = p[keep] if len(p) else p
    return out


_REFINE_STEPS = (
    (Color.RED, (Color.GREEN, Color.BLUE)),
    (Color.BLUE, (Color.RED, Color.GREEN)),
    (Color.GREEN, (Color.RED, Color.BLUE)),
)


def refine(left: DotSet, right: DotSet, state: MatchState, gate: float) -> MatchState:
    """One cycle: re-match each colour through the map fitted on the other two."""
    new = MatchState(dict(state.pairs))
    for target, sources in _REFINE_STEPS:
        sel = [new.get(c) for c in sources]
        src = np.concatenate(sel) if sel else np.zeros((0, 2), dtype=np.intp)
        try:
            mapping = MappingField(left.xy[src[:, 0]], right.xy[src[:, 1]])
        except ValueError:
            continue
        li = left.indices(target)
        ri = right.indices(target)
        pairs = match_by_fit(mapping, left.xy[li], right.xy[ri], gate)
        new.pairs[target] = np.column_stack([li[pairs[:, 0]], ri[pairs[:, 1]]]) if len(pairs) \
            else np.zeros((0, 2), dtype=np.intp)
    return new


def iterate_to_fixed_point(left: DotSet, right: DotSet, state: MatchState, gate: float,
                           max_iterations: int = 20) -> tuple[MatchState, int, bool]:
    """Refine until a full cycle changes nothing; returns (state, cycles, converged)."""
    changed = 0
    for _ in range(max_iterations):
        nxt = refine(left, right, state, gate)
        if nxt.key() == state.key():
            return state, max(changed, 1), True
        state = nxt
        changed += 1
    return state, changed, False


def iterative_match(left: DotSet, right: DotSet, blocks: dict, shift: RoiAlignment | int,
                    cfg: MatchConfig = MatchConfig()) -> MatchResult:
    total = shift.total_shift if isinstance(shift, RoiAlignment) else int(shift)
    seed, deltas = seed_matches(left, right, blocks, total, cfg)
    gate = cfg.gate_factor * median_spacing(right.xy)
    seed = drop_inconsistent(left, right, seed, gate)
    if seed.count() < 3:
        raise ValueError("insufficient seed matches")
    state, cycles, converged = iterate_to_fixed_point(left, right, seed, gate, cfg.max_iterations)
    return MatchResult(CorrespondenceSet(left, right, state.all_pairs()),
                       shift if isinstance(shift, RoiAlignment) else None, blocks,
                       CorrespondenceSet(left, right, seed.all_pairs()), cycles, converged, deltas)


def match_views(left: DotSet, right: DotSet, left_art, right_art,
                cfg: MatchConfig = MatchConfig()) -> MatchResult:
    """Full matching from two extractions (dots plus their artifacts)."""
    align = align_rois(left_art.roi, right_art.roi, cfg.roi_delta)
    blocks = {c: match_blocks(left_art.blocks[c], right_art.blocks[c], align) for c in SEED_COLORS}
    return iterative_match(left, right, blocks, align, cfg)


def match_dotsets(left: DotSet, right: DotSet, cfg: MatchConfig = MatchConfig(),
                  raster: float = 1.0) -> MatchResult:
    """Matching from dot sets alone.

    The ROIs and block masks are rebuilt from the dots: each dot is stamped
    as a disk, blocks are the union of their dots' convex cover. Used when
    only the JSON dot files are available.
    """
    shape = (left.image_size[1], left.image_size[0])
    if shape != (right.image_size[1], right.image_size[0]) or 0 in shape:
        raise ValueError("dot sets must carry the same non-zero image size")
    pitch = max(median_spacing(left.xy), median_spacing(right.xy))
    if not math.isfinite(pitch):
        raise ValueError("insufficient seed matches")

    def masks(ds: DotSet):
        roi = np.zeros(shape, bool)
        yi = np.clip(np.rint(ds.xy[:, 1]).astype(int), 0, shape[0] - 1)
        xi = np.clip(np.rint(ds.xy[:, 0]).astype(int), 0, shape[1] - 1)
        roi[yi, xi] = True
        roi = ip.fill_holes(ip.binary_close(roi, pitch))
        blk = {}
        for c in SEED_COLORS:
            lab = np.zeros(shape, np.int32)
            for b in np.unique(ds.block[ds.color == int(c)]):
                sel = ds.indices(c, int(b))
                m = np.zeros(shape, bool)
                m[yi[sel], xi[sel]] = True
                m = ip.binary_close(m, 0.75 * pitch) if len(sel) > 1 else m
                lab[m & (lab == 0)] = int(b)
            blk[c] = ip.LabeledImage(lab, int(lab.max()))
        return roi, blk

    roi_l, blk_l = masks(left)
    roi_r, blk_r = masks(right)
    align = align_rois(roi_l, roi_r, cfg.roi_delta)
    blocks = {c: match_blocks(blk_l[c], blk_r[c], align) for c in SEED_COLORS}
    return iterative_match(left, right, blocks, align, cfg)
