"""Tracker configuration: every tunable with its default and valid range."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import ParseError, ValidationError


@dataclass(frozen=True)
class TrackerConfig:
    # orientation features and templates
    magnitude_threshold: float = 30.0
    spread_radius: int = 3
    base_box: float = 40.0
    reference_depth: float = 100.0
    max_features: int = 64
    min_features: int = 8
    # matching
    k: int = 5
    nms_radius: int = 4
    search_half: int = 48
    min_match_score: float = 0.5
    refine_locations: bool = True
    # geometric verification
    angular_bin: float = 30.0
    radial_bin: float = 10.0
    inlier_threshold: int = 4
    max_iterations: int = 100
    partial_fusion: bool = False
    # filter
    q_diag: tuple = (1e-6, 1e-6, 1e-6, 0.25, 0.25, 0.25)
    p0_diag: tuple = (0.01, 0.01, 0.01, 25.0, 25.0, 25.0)
    pixel_var: float = 4.0
    gating: bool = True
    gate_sigma: float = 3.0
    # initialization
    init_scales: tuple = (0.8, 1.0, 1.2)
    init_rotations: tuple = (-15.0, 0.0, 15.0)
    init_max_frames: int = 25
    init_refine_iterations: int = 10
    init_search_margin: int = 150
    init_max_rms: float = 6.0
    reinit_after: int = 10
    reset_residual_px: float = 25.0
    # pipeline
    threads: int = 2
    render_lag: int = 2

    def __post_init__(self):
        for name in ("q_diag", "p0_diag", "init_scales", "init_rotations"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def need(cond, name, reason):
            if not cond:
                raise ValidationError(name, reason)

        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float):
                need(math.isfinite(v), f.name, "must be finite")
        need(self.magnitude_threshold >= 0, "magnitude_threshold", "must be >= 0")
        need(0 <= self.spread_radius <= 16, "spread_radius", "must be in [0, 16]")
        need(self.base_box > 0, "base_box", "must be positive")
        need(self.reference_depth > 0, "reference_depth", "must be positive")
        need(8 <= self.min_features <= self.max_features <= 64, "max_features", "need 8 <= min_features <= max_features <= 64")
        need(self.k >= 1, "k", "must be >= 1")
        need(self.nms_radius >= 0, "nms_radius", "must be >= 0")
        need(self.search_half >= 1, "search_half", "must be >= 1")
        need(0.0 <= self.min_match_score <= 1.0, "min_match_score", "must be in [0, 1]")
        need(self.angular_bin > 0 and abs(360.0 / self.angular_bin - round(360.0 / self.angular_bin)) < 1e-9,
             "angular_bin", "must divide 360")
        need(self.radial_bin > 0, "radial_bin", "must be positive")
        need(self.inlier_threshold >= 2, "inlier_threshold", "must be >= 2")
        need(self.max_iterations >= 1, "max_iterations", "must be >= 1")
        need(len(self.q_diag) == 6 and all(v >= 0 for v in self.q_diag), "q_diag", "six non-negative values")
        need(len(self.p0_diag) == 6 and all(v > 0 for v in self.p0_diag), "p0_diag", "six positive values")
        need(self.pixel_var > 0, "pixel_var", "must be positive")
        need(self.gate_sigma > 0, "gate_sigma", "must be positive")
        need(len(self.init_scales) >= 1 and all(s > 0 for s in self.init_scales), "init_scales", "positive scales")
        need(len(self.init_rotations) >= 1, "init_rotations", "at least one rotation")
        need(self.init_max_frames >= 1, "init_max_frames", "must be >= 1")
        need(self.init_refine_iterations >= 0, "init_refine_iterations", "must be >= 0")
        need(self.init_search_margin >= 0, "init_search_margin", "must be >= 0")
        need(self.init_max_rms > 0, "init_max_rms", "must be positive")
        need(self.reinit_after >= 0, "reinit_after", "must be >= 0 (0 disables)")
        need(self.reset_residual_px >= 0, "reset_residual_px", "must be >= 0 (0 disables)")
        need(self.threads in (1, 2), "threads", "1 (sequential) or 2 (two-stage)")
        need(self.render_lag >= 1, "render_lag", "must be >= 1")

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.q_diag)

    @property
    def P0(self) -> np.ndarray:
        return np.diag(self.p0_diag)

    @property
    def gate(self):
        return self.gate_sigma if self.gating else None

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ValidationError(key, "unknown configuration key")
            default = getattr(cls(), key)
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ValidationError(key, "must be true or false")
            elif isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ValidationError(key, "must be an integer")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ValidationError(key, "must be a number")
                value = float(value)
            elif isinstance(default, tuple):
                if not isinstance(value, list) or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
                ):
                    raise ValidationError(key, "must be a list of numbers")
            kwargs[key] = value
        return cls(**kwargs)

    def merged(self, **overrides) -> "TrackerConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def load_config(path) -> TrackerConfig:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}", exc.msg) from None
    if not isinstance(data, dict):
        raise ParseError(str(path), "configuration must be a JSON object")
    return TrackerConfig.from_dict(data)


def dump_config(config: TrackerConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)
