"""Dot containers shared by the pattern, extraction and matching stages."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, NamedTuple

import numpy as np


class Color(IntEnum):
    RED = 0
    GREEN = 1
    BLUE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "Color":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


COLORS = (Color.RED, Color.GREEN, Color.BLUE)
HUE_CENTRES = {Color.RED: 0.0, Color.GREEN: 1.0 / 3.0, Color.BLUE: 2.0 / 3.0}
RGB = {Color.RED: (255, 0, 0), Color.GREEN: (0, 255, 0), Color.BLUE: (0, 0, 255)}


class Dot(NamedTuple):
    x: float
    y: float
    color: Color
    block: int


@dataclass
class DotSet:
    """Sub-pixel dot centroids of one view, stored column-wise."""

    xy: np.ndarray  # (N, 2) float64, columns x, y
    color: np.ndarray  # (N,) int8 Color codes
    block: np.ndarray  # (N,) int32 component label within the colour class
    source: str = "left"
    image_size: tuple[int, int] = (0, 0)  # (width, height)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.color = np.asarray(self.color, dtype=np.int8).reshape(-1)
        self.block = np.asarray(self.block, dtype=np.int32).reshape(-1)
        if not (len(self.xy) == len(self.color) == len(self.block)):
            raise ValueError("xy, color and block must have the same length")
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    def __len__(self) -> int:
        return len(self.xy)

    def __iter__(self) -> Iterator[Dot]:
        for (x, y), c, b in zip(self.xy, self.color, self.block):
            yield Dot(float(x), float(y), Color(int(c)), int(b))

    def __getitem__(self, i: int) -> Dot:
        x, y = self.xy[i]
        return Dot(float(x), float(y), Color(int(self.color[i])), int(self.block[i]))

    @classmethod
    def empty(cls, source: str = "left", image_size=(0, 0)) -> "DotSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0), source, image_size)

    def indices(self, color: Color, block: int | None = None) -> np.ndarray:
        sel = self.color == int(color)
        if block is not None:
            sel &= self.block == block
        return np.flatnonzero(sel)

    def flipped_lr(self) -> "DotSet":
        """Mirror image about the vertical centre line."""
        xy = self.xy.copy()
        xy[:, 0] = self.image_size[0] - 1 - xy[:, 0]
        return DotSet(xy, self.color.copy(), self.block.copy(), self.source, self.image_size)

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "width": self.image_size[0],
            "height": self.image_size[1],
            "dots": [
                {"x": float(x), "y": float(y), "color": Color(int(c)).label, "block": int(b)}
                for (x, y), c, b in zip(self.xy, self.color, self.block)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DotSet":
        dots = d["dots"]
        xy = np.array([[p["x"], p["y"]] for p in dots], dtype=np.float64).reshape(-1, 2)
        color = np.array([int(Color.parse(p["color"])) for p in dots], dtype=np.int8)
        block = np.array([int(p["block"]) for p in dots], dtype=np.int32)
        return cls(xy, color, block, d.get("source", "left"), (d["width"], d["height"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DotSet":
        return cls.from_dict(json.loads(text))
