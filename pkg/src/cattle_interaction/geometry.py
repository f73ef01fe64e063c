"""Axis-aligned box arithmetic and the two-channel pair map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_IOU_BOUNDS = (0.2, 0.7)
DEFAULT_MAP_RESOLUTION = 64


class InvalidBoxError(ValueError):
    pass


class NoOverlapError(ValueError):
    pass


class InvalidResolutionError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Box with left-upper corner (x1, y1) and right-lower corner (x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite coordinates: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError(f"degenerate box: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)


def _intersection_area(b1: BoundingBox, b2: BoundingBox) -> float:
    w = min(b1.x2, b2.x2) - max(b1.x1, b2.x1)
    h = min(b1.y2, b2.y2) - max(b1.y1, b2.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(b1: BoundingBox, b2: BoundingBox) -> float:
    """Intersection over union of two boxes, 0.0 when they are disjoint."""
    inter = _intersection_area(b1, b2)
    if inter == 0.0:
        return 0.0
    return inter / (b1.area + b2.area - inter)


def interaction_region(b1: BoundingBox, b2: BoundingBox) -> BoundingBox:
    """Intersection rectangle of two overlapping boxes."""
    x1, y1 = max(b1.x1, b2.x1), max(b1.y1, b2.y1)
    x2, y2 = min(b1.x2, b2.x2), min(b1.y2, b2.y2)
    if not (x1 < x2 and y1 < y2):
        raise NoOverlapError(f"boxes do not overlap: {b1.as_tuple()} / {b2.as_tuple()}")
    return BoundingBox(x1, y1, x2, y2)


def union_box(b1: BoundingBox, b2: BoundingBox) -> BoundingBox:
    return BoundingBox(min(b1.x1, b2.x1), min(b1.y1, b2.y1),
                       max(b1.x2, b2.x2), max(b1.y2, b2.y2))


def passes_interaction_threshold(b1: BoundingBox, b2: BoundingBox,
                                 bounds: tuple[float, float] = DEFAULT_IOU_BOUNDS) -> bool:
    """True iff the pair's IoU lies strictly inside ``bounds``."""
    lo, hi = bounds
    return lo < iou(b1, b2) < hi


@dataclass(frozen=True, eq=False)
class GeometricMap:
    """Binary map of shape (2, R, R); channel 0 marks the first box, channel 1 the second."""

    data: np.ndarray
    pair: tuple | None = None

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 2 or self.data.shape[1] != self.data.shape[2]:
            raise ValueError(f"expected shape (2, R, R), got {self.data.shape}")

    @property
    def resolution(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, GeometricMap):
            return NotImplemented
        return self.pair == other.pair and np.array_equal(self.data, other.data)


def pair_frame(b1: BoundingBox, b2: BoundingBox) -> tuple[float, float, float]:
    """Square reference frame (x0, y0, side) around the union box, padded on the short axis."""
    u = union_box(b1, b2)
    side = max(u.width, u.height)
    x0 = u.x1 - (side - u.width) / 2
    y0 = u.y1 - (side - u.height) / 2
    return x0, y0, side


def rasterize_pair_map(b1: BoundingBox, b2: BoundingBox,
                       resolution: int = DEFAULT_MAP_RESOLUTION,
                       pair: tuple | None = None) -> GeometricMap:
    """Sample both boxes at pixel centres of the padded union frame.

    Membership is half-open (x1 <= c < x2) so shared edges are never claimed by both sides.
    """
    if not isinstance(resolution, (int, np.integer)) or resolution < 2:
        raise InvalidResolutionError(f"resolution must be an integer >= 2, got {resolution!r}")
    x0, y0, side = pair_frame(b1, b2)
    step = side / resolution
    centers = (np.arange(resolution) + 0.5) * step
    cx = x0 + centers
    cy = y0 + centers
    out = np.zeros((2, resolution, resolution), dtype=np.uint8)
    for ch, b in enumerate((b1, b2)):
        in_x = (cx >= b.x1) & (cx < b.x2)
        in_y = (cy >= b.y1) & (cy < b.y2)
        out[ch] = np.outer(in_y, in_x)
    return GeometricMap(out, pair)
