"""Axis-aligned box geometry in screenshot pixel coordinates.

Coordinates are continuous pixels with the origin at the top-left corner,
x growing rightward and y growing downward. Boxes are ``[x1, y1, x2, y2]``
with ``x1 < x2`` and ``y1 < y2``; membership tests and clipping treat the
intervals as closed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .errors import BoxError


@dataclass(frozen=True)
class BoundingBox:
    """A rectangle with strictly positive area.

    Corners may lie outside an image frame (clipping binds a box to a
    frame later); degenerate or non-finite boxes are rejected at
    construction and are invalid everywhere in the package.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise BoxError(f"{name} must be a number, got {type(value).__name__}")
            if not math.isfinite(value):
                raise BoxError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, float(value))
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise BoxError(
                "box [%r, %r, %r, %r] has no positive area"
                % (self.x1, self.y1, self.x2, self.y2)
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.x1, self.y1, self.x2, self.y2

    def scaled(self, sx: float, sy: float | None = None) -> "BoundingBox":
        """Scale about the origin; ``sy`` defaults to ``sx`` (uniform)."""
        sy = sx if sy is None else sy
        return BoundingBox(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def within_frame(self, width: float, height: float) -> bool:
        return 0.0 <= self.x1 and 0.0 <= self.y1 and self.x2 <= width and self.y2 <= height


def box_area(box: BoundingBox) -> float:
    """Area of a box. Degenerate boxes cannot be constructed, so this is > 0."""
    return box.area


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when disjoint."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def center_inside(pred: BoundingBox, gold: BoundingBox) -> bool:
    """True when the center of ``pred`` falls inside ``gold``.

    Boundary counts as inside: both intervals are closed.
    """
    cx, cy = pred.center
    return gold.x1 <= cx <= gold.x2 and gold.y1 <= cy <= gold.y2


def clip_to_frame(box: BoundingBox, width: float, height: float) -> BoundingBox | None:
    """Clip a box to the frame ``[0, width] x [0, height]``.

    Returns None when nothing with positive area remains; the caller
    discards such out-of-frame regions. Idempotent on already-clipped
    boxes.
    """
    if width <= 0 or height <= 0:
        raise BoxError(f"frame {width}x{height} has no area")
    x1 = max(box.x1, 0.0)
    y1 = max(box.y1, 0.0)
    x2 = min(box.x2, float(width))
    y2 = min(box.y2, float(height))
    if x1 >= x2 or y1 >= y2:
        return None
    return BoundingBox(x1, y1, x2, y2)


def union_bounds(boxes: Iterable[BoundingBox]) -> BoundingBox:
    """Tight bounding box around a non-empty collection of boxes."""
    boxes = list(boxes)
    if not boxes:
        raise BoxError("union of zero boxes is undefined")
    return BoundingBox(
        min(b.x1 for b in boxes),
        min(b.y1 for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )
