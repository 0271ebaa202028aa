"""Motion deltas, look-back feature windows, and tracklets.

The motion predictor consumes per-frame normalized offsets of the box
center/size rather than raw coordinates. Horizontal quantities (dcx, dw)
are normalized by image width, vertical ones (dcy, dh) by image height,
so the encoding is invertible given the image size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import BBox, CenterBox, ImageSize, bbox_to_center, center_to_bbox

# Trajectory entry provenance: a real detection, an occlusion patch that
# re-established a lost track, or a self-predicted placeholder.
SOURCE_DETECTED = "detected"
SOURCE_INFILLED = "infilled"
SOURCE_PREDICTED = "predicted"

STATE_ACTIVE = "active"
STATE_LOST = "lost"

MIN_BOX_SIDE = 1.0


@dataclass(frozen=True)
class MotionDelta:
    """Normalized inter-frame change of box center and size."""

    dcx: float
    dcy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dcx, self.dcy, self.dw, self.dh], dtype=np.float64)

    @staticmethod
    def zero() -> "MotionDelta":
        return MotionDelta(0.0, 0.0, 0.0, 0.0)


def delta_encode(prev: BBox, next: BBox, img: ImageSize) -> MotionDelta:
    """Offset from prev to next, normalized by image width/height."""
    a = bbox_to_center(prev)
    b = bbox_to_center(next)
    return MotionDelta(
        (b.cx - a.cx) / img.width,
        (b.cy - a.cy) / img.height,
        (b.w - a.w) / img.width,
        (b.h - a.h) / img.height,
    )


def delta_apply(box: BBox, delta: MotionDelta, img: ImageSize) -> BBox:
    """Inverse of delta_encode; width/height are clamped to 1 pixel."""
    c = bbox_to_center(box)
    return center_to_bbox(
        CenterBox(
            c.cx + delta.dcx * img.width,
            c.cy + delta.dcy * img.height,
            max(c.w + delta.dw * img.width, MIN_BOX_SIDE),
            max(c.h + delta.dh * img.height, MIN_BOX_SIDE),
        )
    )


@dataclass(frozen=True)
class TrajFeature:
    """Fixed-length window of motion deltas fed to the predictor.

    Exactly ``window`` slots; padded slots are all-zero deltas, come first,
    and are flagged False in ``mask``.
    """

    deltas: np.ndarray  # (window, 4) float64
    mask: np.ndarray  # (window,) bool, True for real slots

    def __post_init__(self):
        if self.deltas.ndim != 2 or self.deltas.shape[1] != 4:
            raise ValueError(f"deltas must be (window, 4), got {self.deltas.shape}")
        if self.mask.shape != (self.deltas.shape[0],):
            raise ValueError("mask length must match window")
        n_pad = int(np.argmax(self.mask)) if self.mask.any() else len(self.mask)
        if self.mask[n_pad:].any() and not self.mask[n_pad:].all():
            raise ValueError("padding must precede all real slots")

    @property
    def window(self) -> int:
        return self.deltas.shape[0]


def feature_from_deltas(deltas: list[MotionDelta], window: int) -> TrajFeature:
    """Left-pad a (possibly short) delta history to the full window."""
    if len(deltas) > window:
        deltas = deltas[-window:]
    n_pad = window - len(deltas)
    arr = np.zeros((window, 4), dtype=np.float64)
    for i, d in enumerate(deltas):
        arr[n_pad + i] = d.as_array()
    mask = np.zeros(window, dtype=bool)
    mask[n_pad:] = True
    return TrajFeature(arr, mask)


def feature_from_boxes(boxes: list[BBox], img: ImageSize, window: int) -> TrajFeature:
    """Feature window from the last ``window + 1`` boxes of a trajectory."""
    recent = boxes[-(window + 1):]
    deltas = [delta_encode(a, b, img) for a, b in zip(recent, recent[1:])]
    return feature_from_deltas(deltas, window)


@dataclass
class TrackletEntry:
    frame: int
    box: BBox
    source: str


@dataclass
class Tracklet:
    """Per-identity box history with lifecycle state.

    Frames are strictly increasing. An active tracklet was updated with a
    detection (or patch) in the current frame, so frames_since_update is 0.
    """

    id: int
    entries: list[TrackletEntry] = field(default_factory=list)
    state: str = STATE_ACTIVE
    frames_since_update: int = 0
    predicted_next: Optional[BBox] = None

    def append(self, frame: int, box: BBox, source: str) -> None:
        if self.entries and frame <= self.entries[-1].frame:
            raise ValueError(
                f"tracklet {self.id}: frame {frame} not after {self.entries[-1].frame}"
            )
        self.entries.append(TrackletEntry(frame, box, source))

    @property
    def last_box(self) -> BBox:
        if not self.entries:
            raise ValueError(f"tracklet {self.id} is empty")
        return self.entries[-1].box

    @property
    def last_frame(self) -> int:
        if not self.entries:
            raise ValueError(f"tracklet {self.id} is empty")
        return self.entries[-1].frame

    def boxes(self) -> list[BBox]:
        return [e.box for e in self.entries]

    def feature(self, img: ImageSize, window: int) -> TrajFeature:
        return feature_from_boxes(self.boxes(), img, window)
