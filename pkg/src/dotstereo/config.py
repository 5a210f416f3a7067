"""Pipeline configuration shared by the library entry points and the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .extraction import FILTERS, ExtractConfig
from .geometry import DEFAULT_RESIDUAL_GATE
from .imgproc import SddParams
from .matching import MatchConfig

METHODS = ("analytic", "midpoint", "disparity")


@dataclass(frozen=True)
class PipelineConfig:
    sdd: SddParams = field(default_factory=SddParams)
    filter: str = "opening"
    roi_delta: int = 10
    dot_delta: int = 5
    gate_factor: float = 0.5
    residual_gate: float = DEFAULT_RESIDUAL_GATE  # mm
    max_iterations: int = 20
    block_preshift: bool = True
    method: str = "analytic"
    min_area_ratio: float = 0.7
    roi_close_factor: float = 1.0
    block_close_factor: float = 0.7

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise ValueError(f"filter must be one of {FILTERS}, got {self.filter!r}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.roi_delta < 1 or self.dot_delta < 1:
            raise ValueError("search windows must be positive")
        if not (self.gate_factor > 0 and self.residual_gate > 0):
            raise ValueError("gates must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    @property
    def extract(self) -> ExtractConfig:
        return ExtractConfig(sdd=self.sdd, filter=self.filter, min_area_ratio=self.min_area_ratio,
                             roi_close_factor=self.roi_close_factor,
                             block_close_factor=self.block_close_factor)

    @property
    def match(self) -> MatchConfig:
        return MatchConfig(self.roi_delta, self.dot_delta, self.gate_factor, self.max_iterations,
                           self.block_preshift)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown PipelineConfig key: {sorted(extra)[0]}")
        d = dict(d)
        if "sdd" in d:
            sdd = d["sdd"]
            bad = set(sdd) - {"bandwidth_w", "fit_n"}
            if bad:
                raise ValueError(f"unknown sdd key: {sorted(bad)[0]}")
            d["sdd"] = SddParams(**sdd)
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed PipelineConfig JSON: {exc}") from None
        return cls.from_dict(d)
