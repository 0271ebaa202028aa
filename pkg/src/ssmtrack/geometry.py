"""Box geometry primitives shared across the toolkit.

Boxes use the top-left pixel convention (x, y, w, h). The center form
(cx, cy, w, h) is the working representation for motion deltas and the
Kalman filter state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, top-left corner plus width/height in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")
        if not all(map(math.isfinite, (self.x, self.y, self.w, self.h))):
            raise ValueError("box fields must be finite")

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class CenterBox:
    """Box in center form: center coordinates plus width/height."""

    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")


@dataclass(frozen=True)
class Detection:
    """One detector output row: frame index, box, and confidence in [0, 1]."""

    frame: int
    box: BBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0, 1]: {self.confidence}")


def bbox_to_center(box: BBox) -> CenterBox:
    return CenterBox(box.x + box.w / 2.0, box.y + box.h / 2.0, box.w, box.h)


def center_to_bbox(box: CenterBox) -> BBox:
    return BBox(box.cx - box.w / 2.0, box.cy - box.h / 2.0, box.w, box.h)


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    left = max(a.x, b.x)
    top = max(a.y, b.y)
    right = min(a.x + a.w, b.x + b.w)
    bottom = min(a.y + a.h, b.y + b.h)
    if right <= left or bottom <= top:
        return 0.0
    inter = (right - left) * (bottom - top)
    return inter / (a.area + b.area - inter)
