"""RGB block-dot pattern generation.

Dots sit on a square lattice. The lattice is cut into super-tiles; inside
each super-tile one ``green_block`` x ``green_block`` patch of dots is green,
one ``blue_block`` x ``blue_block`` patch is blue and everything else is red.
Every green and blue patch is ringed by red dots, so after hue segmentation
the green and blue patches form isolated blocks while the red dots form one
connected region.

Super-tile layout for ``tile_period = 1`` (G green, B blue, r red)::

    G G G G r B B r
    G G G G r B B r
    G G G G r r r r
    G G G G r r r r
    r r r r r r r r
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .dots import RGB, Color, DotSet


@dataclass(frozen=True)
class PatternSpec:
    width: int = 1024
    height: int = 768
    dot_pitch: int = 16
    dot_radius: float = 3.0
    green_block: int = 4
    blue_block: int = 2
    tile_period: int = 1
    background: int = 0
    blur_sigma: float = 0.0

    def validate(self) -> None:
        if self.dot_radius <= 0:
            raise ValueError("dot_radius must be positive")
        if self.dot_pitch < 2:
            raise ValueError("dot_pitch must be at least 2")
        if self.dot_radius >= self.dot_pitch / 2:
            raise ValueError("blocks not red-separated: dot_radius must be < dot_pitch/2")
        if not (self.green_block > self.blue_block >= 1):
            raise ValueError("need green_block > blue_block >= 1")
        if self.tile_period < 1:
            raise ValueError("tile_period must be >= 1")
        if not 0 <= self.background <= 255:
            raise ValueError("background must be an 8-bit level")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        tw, th = self.tile_shape
        cols, rows = self.lattice_shape
        if cols < tw or rows < th:
            raise ValueError(
                f"canvas {self.width}x{self.height} too small for one {tw}x{th}-dot super-tile"
            )

    @property
    def tile_shape(self) -> tuple[int, int]:
        """Super-tile size in dots as (columns, rows)."""
        g, b = self.green_block, self.blue_block
        return self.tile_period * (g + b + 2), self.tile_period * (g + 1)

    @property
    def origin(self) -> float:
        return self.dot_pitch / 2.0

    @property
    def lattice_shape(self) -> tuple[int, int]:
        """Number of lattice (columns, rows) that fit entirely on the canvas."""
        o, p, r = self.origin, self.dot_pitch, self.dot_radius
        cols = int(np.floor((self.width - 1 - r - o) / p)) + 1
        rows = int(np.floor((self.height - 1 - r - o) / p)) + 1
        return max(cols, 0), max(rows, 0)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "PatternSpec":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown PatternSpec key: {sorted(unknown)[0]}")
        kwargs = {}
        for key, value in d.items():
            want = int if known[key].type in ("int", int) else float
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"PatternSpec key {key!r} must be a number")
            if want is int and float(value) != int(value):
                raise ValueError(f"PatternSpec key {key!r} must be an integer")
            kwargs[key] = want(value)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "PatternSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed PatternSpec JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ValueError("PatternSpec JSON must be an object")
        return cls.from_dict(d)


@dataclass(frozen=True)
class Lattice:
    centres: np.ndarray  # (N, 2) x, y in pattern pixels, row-major over the lattice
    color: np.ndarray  # (N,) Color codes
    block: np.ndarray  # (N,) block label within the colour class
    shape: tuple[int, int]  # (columns, rows)

    def color_grid(self) -> np.ndarray:
        cols, rows = self.shape
        return self.color.reshape(rows, cols)


def _colour_of(spec: PatternSpec, col: np.ndarray, row: np.ndarray) -> np.ndarray:
    """Colour code per lattice dot; patches the canvas would cut stay red."""
    tw, th = spec.tile_shape
    cols, rows = spec.lattice_shape
    u, v = col % tw, row % th
    c0, r0 = col - u, row - v
    g, b = spec.green_block, spec.blue_block
    out = np.full(col.shape, int(Color.RED), dtype=np.int8)
    green = (u < g) & (v < g) & (c0 + g <= cols) & (r0 + g <= rows)
    blue = (u >= g + 1) & (u < g + 1 + b) & (v < b) & (c0 + g + 1 + b <= cols) & (r0 + b <= rows)
    out[green] = int(Color.GREEN)
    out[blue] = int(Color.BLUE)
    return out


def pattern_lattice(spec: PatternSpec) -> Lattice:
    spec.validate()
    cols, rows = spec.lattice_shape
    row, col = np.mgrid[0:rows, 0:cols]
    row, col = row.ravel(), col.ravel()
    centres = np.column_stack([spec.origin + col * spec.dot_pitch,
                               spec.origin + row * spec.dot_pitch]).astype(np.float64)
    color = _colour_of(spec, col, row)

    # blocks are numbered in raster order of their top-left dot, which is the
    # order a raster-scan labelling of the rendered image encounters them
    tw, th = spec.tile_shape
    block = np.ones(len(color), dtype=np.int32)
    for c in (Color.GREEN, Color.BLUE):
        sel = color == int(c)
        tile_key = (row[sel] // th) * (cols // tw + 2) + col[sel] // tw
        _, inverse = np.unique(tile_key, return_inverse=True)
        block[sel] = inverse + 1
    return Lattice(centres, color, block, (cols, rows))


def pattern_ground_truth(spec: PatternSpec) -> DotSet:
    lat = pattern_lattice(spec)
    return DotSet(lat.centres, lat.color, lat.block, source="pattern",
                  image_size=(spec.width, spec.height))


def generate_pattern(spec: PatternSpec) -> np.ndarray:
    """Render the pattern as an (H, W, 3) uint8 image of filled disks."""
    lat = pattern_lattice(spec)
    img = np.full((spec.height, spec.width, 3), spec.background, dtype=np.float64)

    r = spec.dot_radius
    k = int(np.ceil(r))
    dy, dx = np.mgrid[-k : k + 1, -k : k + 1]
    inside = dx * dx + dy * dy <= r * r
    ox, oy = dx[inside], dy[inside]
    # lattice centres fall on pixel centres whenever dot_pitch is even
    cx = np.rint(lat.centres[:, 0]).astype(np.intp)
    cy = np.rint(lat.centres[:, 1]).astype(np.intp)
    px = (cx[:, None] + ox[None, :]).ravel()
    py = (cy[:, None] + oy[None, :]).ravel()
    rgb = np.array([RGB[Color(c)] for c in range(3)], dtype=np.float64)
    img[py, px] = np.repeat(rgb[lat.color], len(ox), axis=0)

    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(spec.blur_sigma, spec.blur_sigma, 0))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
