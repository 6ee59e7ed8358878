"""Small value types shared by the compositor, evaluator and dataset IO."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, half-open on the max edges."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def aspect(self) -> float:
        return self.width / self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def as_tuple(self) -> tuple:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_xywh(self) -> list:
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoundingBox":
        return cls(x, y, x + w, y + h)

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)

    def intersection_area(self, other: "BoundingBox") -> float:
        iw = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        ih = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if iw <= 0 or ih <= 0:
            return 0.0
        return iw * ih

    def intersects(self, other: "BoundingBox") -> bool:
        return self.intersection_area(other) > 0


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, areas in continuous pixels."""
    inter = float(a.intersection_area(b))
    union = float(a.area) + float(b.area) - inter
    return inter / union


def tight_box(mask: np.ndarray) -> BoundingBox | None:
    """Tight integer box around the true pixels of ``mask``; None if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


@dataclass
class InstanceAsset:
    """Background-free subject.

    ``rgba`` is float32 HxWx4 in [0, 1]; ``mask`` is the binary footprint
    (alpha > 0.5 unless supplied by the source).
    """

    rgba: np.ndarray
    mask: np.ndarray
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.rgba.shape[1]

    @property
    def height(self) -> int:
        return self.rgba.shape[0]

    @property
    def aspect(self) -> float:
        return self.width / self.height

    @classmethod
    def from_rgba(cls, rgba: np.ndarray, provenance: dict | None = None) -> "InstanceAsset":
        rgba = np.asarray(rgba, dtype=np.float32)
        return cls(rgba, rgba[..., 3] > 0.5, dict(provenance or {}))


@dataclass
class Instance:
    modal_mask: np.ndarray
    amodal_mask: np.ndarray
    bbox: BoundingBox
    asset_id: str


@dataclass
class AnnotatedSample:
    """Composite image (uint8 HxWx3) plus per-instance annotations."""

    image: np.ndarray
    instances: list[Instance]
    layout: dict[str, Any] | None = None
