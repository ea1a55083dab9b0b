"""
Box, tubelet and tube geometry.

Boxes are corner-encoded in continuous image coordinates; area is
(x_max - x_min) * (y_max - y_min) with no +1 pixel convention. All values are
immutable once built, so every function here is pure.
"""

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from mil_action.errors import GeometryError, NoTemporalOverlapError

DEFAULT_TUBELET_LENGTH = 16


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with a detector confidence."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max, self.score)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"Non-finite box: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(
                f"Degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError(f"Box score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy,
                           self.x_max + dx, self.y_max + dy, self.score)

    def with_score(self, score: float) -> "BoundingBox":
        return BoundingBox(self.x_min, self.y_min, self.x_max, self.y_max, score)

    def coords(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def interpolate_box(a: BoundingBox, b: BoundingBox, alpha: float) -> BoundingBox:
    """
    Linear interpolation between two boxes.

    Args:
        a: Box at alpha = 0
        b: Box at alpha = 1
        alpha: Blend factor in [0, 1]

    Returns:
        Interpolated box (a convex combination of valid boxes is valid)
    """
    def lerp(u, v):
        return u + (v - u) * alpha

    return BoundingBox(lerp(a.x_min, b.x_min), lerp(a.y_min, b.y_min),
                       lerp(a.x_max, b.x_max), lerp(a.y_max, b.y_max),
                       lerp(a.score, b.score))


def mean_box(boxes: Sequence[BoundingBox]) -> BoundingBox:
    """Coordinate-wise mean of a non-empty list of boxes."""
    if not boxes:
        raise GeometryError("Cannot average an empty list of boxes")
    n = len(boxes)
    return BoundingBox(sum(b.x_min for b in boxes) / n, sum(b.y_min for b in boxes) / n,
                       sum(b.x_max for b in boxes) / n, sum(b.y_max for b in boxes) / n,
                       sum(b.score for b in boxes) / n)


@dataclass(frozen=True)
class Tubelet:
    """
    A person detection tracked over consecutive frames.

    Box i covers frame start_frame + i. `actor_id` is the ground-truth person the
    underlying detections came from (-1 for spurious detections); it is kept for
    diagnostics only and never reaches the model.
    """

    start_frame: int
    boxes: Tuple[BoundingBox, ...]
    feature: np.ndarray = field(compare=False, repr=False)
    tubelet_id: int = 0
    clip_id: str = ""
    actor_id: int = -1

    def __post_init__(self):
        if len(self.boxes) < 1:
            raise GeometryError("Tubelet needs at least one box")
        if not isinstance(self.boxes, tuple):
            object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def length(self) -> int:
        return len(self.boxes)

    @property
    def end_frame(self) -> int:
        """Last covered frame (inclusive)."""
        return self.start_frame + len(self.boxes) - 1

    @property
    def center_frame(self) -> int:
        return self.start_frame + len(self.boxes) // 2

    @property
    def score(self) -> float:
        return float(np.mean([b.score for b in self.boxes]))

    def covers(self, frame: int) -> bool:
        return self.start_frame <= frame <= self.end_frame

    def box_at(self, frame: int) -> BoundingBox:
        if not self.covers(frame):
            raise GeometryError(f"Frame {frame} outside tubelet {self.tubelet_id}")
        return self.boxes[frame - self.start_frame]


@dataclass(frozen=True)
class Tube:
    """A class-labelled spatio-temporal track with contiguous frames."""

    segments: Tuple[Tuple[int, BoundingBox], ...]
    label: int
    score: float
    video_id: str = ""
    member_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        if not self.segments:
            raise GeometryError("Tube must have at least one segment")
        if not isinstance(self.segments, tuple):
            object.__setattr__(self, "segments", tuple(self.segments))
        frames = [f for f, _ in self.segments]
        for prev, cur in zip(frames, frames[1:]):
            if cur != prev + 1:
                raise GeometryError(f"Tube frames not contiguous at {prev} -> {cur}")

    @property
    def start_frame(self) -> int:
        return self.segments[0][0]

    @property
    def end_frame(self) -> int:
        return self.segments[-1][0]

    def __len__(self) -> int:
        return len(self.segments)

    def box_at(self, frame: int) -> BoundingBox:
        return self.segments[frame - self.start_frame][1]

    @classmethod
    def from_boxes(cls, start_frame: int, boxes: Iterable[BoundingBox], label: int,
                   score: float, video_id: str = "",
                   member_ids: Tuple[int, ...] = ()) -> "Tube":
        segments = tuple((start_frame + i, box) for i, box in enumerate(boxes))
        return cls(segments, label, score, video_id, member_ids)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """
    Spatial intersection over union of two boxes.

    Returns:
        |a ∩ b| / |a ∪ b| in [0, 1]; 0 for disjoint boxes
    """
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _corners(boxes: Sequence[BoundingBox]) -> np.ndarray:
    return np.array([b.coords() for b in boxes], dtype=np.float64).reshape(len(boxes), 4)


def pairwise_iou(boxes_a: Sequence[BoundingBox], boxes_b: Sequence[BoundingBox]) -> np.ndarray:
    """
    IoU matrix of shape (len(boxes_a), len(boxes_b)), broadcast over both sets.

    Entries equal `iou(a, b)` exactly.
    """
    a = _corners(boxes_a)[:, None, :]
    b = _corners(boxes_b)[None, :, :]
    ix = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    iy = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    overlapping = (ix > 0.0) & (iy > 0.0)
    inter = np.where(overlapping, ix * iy, 0.0)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return np.where(overlapping, inter / (area_a + area_b - inter), 0.0)


def _frame_overlap(a_start: int, a_end: int, b_start: int, b_end: int) -> Tuple[int, int]:
    return max(a_start, b_start), min(a_end, b_end)


def tube_iou(a: Tube, b: Tube) -> float:
    """
    Spatio-temporal overlap of two tubes.

    Temporal IoU of the frame ranges multiplied by the mean spatial IoU over the
    temporally shared frames; 0 when the ranges do not intersect.
    """
    lo, hi = _frame_overlap(a.start_frame, a.end_frame, b.start_frame, b.end_frame)
    if hi < lo:
        return 0.0
    inter = hi - lo + 1
    union = len(a) + len(b) - inter
    spatial = sum(iou(a.box_at(f), b.box_at(f)) for f in range(lo, hi + 1)) / inter
    return (inter / union) * spatial


def tubelet_spatial_overlap(a: Tubelet, b: Tubelet) -> float:
    """
    Mean per-frame IoU over the frames two tubelets share.

    Raises:
        NoTemporalOverlapError: if the tubelets share no frame
    """
    lo, hi = _frame_overlap(a.start_frame, a.end_frame, b.start_frame, b.end_frame)
    if hi < lo:
        raise NoTemporalOverlapError(
            f"Tubelets {a.tubelet_id} and {b.tubelet_id} share no frame"
        )
    return sum(iou(a.box_at(f), b.box_at(f)) for f in range(lo, hi + 1)) / (hi - lo + 1)


def tubelet_st_iou(a: Tubelet, b: Tubelet) -> float:
    """Spatio-temporal IoU of two tubelets, factorised like tube_iou."""
    lo, hi = _frame_overlap(a.start_frame, a.end_frame, b.start_frame, b.end_frame)
    if hi < lo:
        return 0.0
    inter = hi - lo + 1
    union = a.length + b.length - inter
    return (inter / union) * tubelet_spatial_overlap(a, b)


def tube_from_tubelets(tubelets: Sequence[Tubelet], label: int, scores: Sequence[float],
                       video_id: Optional[str] = None) -> Tube:
    """
    Merge temporally ordered tubelets into one contiguous tube.

    Frames covered by several members get the mean box; frames between members
    are filled by interpolating the last box before and the first box after.
    """
    if not tubelets:
        raise GeometryError("Cannot build a tube from no tubelets")
    per_frame = {}
    for t in tubelets:
        for offset, box in enumerate(t.boxes):
            per_frame.setdefault(t.start_frame + offset, []).append(box)

    start = min(per_frame)
    end = max(per_frame)
    boxes: List[Optional[BoundingBox]] = []
    for frame in range(start, end + 1):
        members = per_frame.get(frame)
        boxes.append(mean_box(members) if members else None)

    # fill gaps left by tolerated missing steps
    known = [i for i, b in enumerate(boxes) if b is not None]
    for left, right in zip(known, known[1:]):
        span = right - left
        for i in range(left + 1, right):
            boxes[i] = interpolate_box(boxes[left], boxes[right], (i - left) / span)

    score = float(np.mean(scores))
    vid = tubelets[0].clip_id if video_id is None else video_id
    return Tube.from_boxes(start, boxes, label, score, vid,
                           tuple(t.tubelet_id for t in tubelets))
