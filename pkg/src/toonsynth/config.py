"""Run configuration. Every constant of the data recipe lives here with its default."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    warp_prob: float = 0.5
    rotation_max_deg: float = 30.0
    grid_cells: int = 5
    grid_limit: tuple[float, float] = (-0.3, 0.3)
    long_side_range: tuple[float, float] = (0.15, 0.75)


@dataclass
class ExtractConfig:
    target_fps: float = 3.0
    bilateral_diameter: int = 17
    bilateral_sigma: float = 80.0
    hue_bins: int = 200
    hue_half_window: float = 0.025
    key_gate: float = 0.95
    extract_gate: float = 0.90
    min_area: int = 16
    key_mode: str = "per_frame"  # or "per_video"


@dataclass
class LossConfig:
    box_weight: float = 2.0
    conf_weight: float = 1.0
    mask_weight: float = 2.0
    qfl_beta: float = 2.0
    dice_eps: float = 1e-6
    dice_size: int = 320
    ppa_level_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 5.0)
    ppa_pool_size: int = 31
    ppa_boundary_gain: float = 5.0
    clip_eps: float = 1e-7
    input_size: int = 720
    grid_sizes: tuple[int, ...] = (80, 40, 20)

    @property
    def n_candidates(self) -> int:
        return sum(g * g for g in self.grid_sizes)


@dataclass
class RunConfig:
    master_seed: int = 0
    sample_count: int = 100
    canvas: int = 720
    poisson_lambda: float = 2.5
    max_subjects: int = 12
    strategy_weights: dict[str, float] = field(
        default_factory=lambda: {"photo_guided": 0.5, "side_by_side": 0.5}
    )
    harmonization_weights: dict[str, float] = field(
        default_factory=lambda: {"none": 1 / 3, "quantize": 1 / 3, "histogram_match": 1 / 3}
    )
    quantize_k_choices: tuple[int, ...] = (12, 16, 32)
    kmeans_max_iter: int = 50
    kmeans_tol: float = 1e-4
    iou_window: tuple[float, float] = (0.15, 0.8)
    side_by_side_against_all: bool = False
    guide_long_side_cap: float = 0.75
    placement_retries: int = 10
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    workers: int = 1
    foreground_manifest: str | None = None
    background_dir: str | None = None
    guide_boxes: str | None = None

    def validate(self) -> None:
        if self.canvas <= 0:
            raise ValueError("canvas must be positive")
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")
        for name in ("strategy_weights", "harmonization_weights"):
            weights = getattr(self, name)
            if any(w < 0 for w in weights.values()) or not math.isclose(sum(weights.values()), 1.0, abs_tol=1e-9):
                raise ValueError(f"{name} must be non-negative and sum to 1, got {weights}")
        if set(self.strategy_weights) - {"photo_guided", "side_by_side"}:
            raise ValueError(f"unknown strategy in {self.strategy_weights}")
        if set(self.harmonization_weights) - {"none", "quantize", "histogram_match"}:
            raise ValueError(f"unknown harmonization mode in {self.harmonization_weights}")
        lo, hi = self.iou_window
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"invalid iou_window {self.iou_window}")
        a = self.augment
        for p in (a.flip_prob, a.warp_prob):
            if not 0 <= p <= 1:
                raise ValueError("augmentation probabilities must lie in [0, 1]")
        if a.grid_limit[0] > a.grid_limit[1]:
            raise ValueError("grid_limit must satisfy lo <= hi")
        if not 0 < a.long_side_range[0] <= a.long_side_range[1]:
            raise ValueError("invalid long_side_range")
        if self.max_subjects < 1:
            raise ValueError("max_subjects must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: str | Path | None = None) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        aug = data.pop("augment", None) or {}
        aug_known = {f.name for f in fields(AugmentConfig)}
        if set(aug) - aug_known:
            raise ValueError(f"unknown augment keys: {sorted(set(aug) - aug_known)}")
        for key in ("grid_limit", "long_side_range"):
            if key in aug:
                aug[key] = tuple(aug[key])
        for key in ("iou_window", "quantize_k_choices"):
            if key in data:
                data[key] = tuple(data[key])
        cfg = cls(**data, augment=AugmentConfig(**aug))
        if base_dir is not None:
            for key in ("foreground_manifest", "background_dir", "guide_boxes"):
                value = getattr(cfg, key)
                if value is not None and not Path(value).is_absolute():
                    setattr(cfg, key, str(Path(base_dir) / value))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), base_dir=path.parent)
