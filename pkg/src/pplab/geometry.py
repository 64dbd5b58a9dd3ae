"""Box and run-length-encoded mask primitives.

Boxes are axis-aligned with half-open pixel-edge coordinates: a box
``(x_min, y_min, x_max, y_max)`` covers ``[x_min, x_max) x [y_min, y_max)``,
so the bounding box of a one-pixel mask has area 1 and box/mask areas are
directly comparable.  Masks are run-length encoded column-major, starting
with a background run (the usual uncompressed COCO layout), which keeps the
files interchangeable with real segmentation tooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, ShapeMismatch


@dataclass(frozen=True)
class Point2D:
    """A point in pixel coordinates."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"point coordinates must be finite, got ({self.x}, {self.y})")

    def distance_to(self, other: "Point2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner form, half-open pixel-edge coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"box corners out of order: {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def center_size(self) -> tuple[float, float, float, float]:
        """Return (cx, cy, w, h)."""
        return (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
            self.width,
            self.height,
        )

    @classmethod
    def from_center_size(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def clipped(self, width: float, height: float) -> "Box":
        """Clip to the image extent [0, width) x [0, height)."""
        return Box(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )

    def contains_point(self, p: Point2D) -> bool:
        """Closed containment: points on the edge count as inside."""
        return self.x_min <= p.x <= self.x_max and self.y_min <= p.y <= self.y_max

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class MaskRLE:
    """Binary mask, run-length encoded column-major starting with background.

    ``runs`` alternate background/foreground lengths over the flattened
    column-major grid; they must sum to ``height * width``.
    """

    height: int
    width: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if self.height < 0 or self.width < 0:
            raise ValueError("mask extents must be non-negative")
        if any(r < 0 for r in self.runs):
            raise ValueError("run lengths must be non-negative")
        if sum(self.runs) != self.height * self.width:
            raise ValueError(
                f"runs sum to {sum(self.runs)}, expected {self.height * self.width}"
            )

    @classmethod
    def encode(cls, grid: np.ndarray) -> "MaskRLE":
        """Encode a boolean (H, W) grid."""
        grid = np.asarray(grid, dtype=bool)
        if grid.ndim != 2:
            raise ShapeMismatch(f"expected 2-d grid, got shape {grid.shape}")
        h, w = grid.shape
        flat = grid.ravel(order="F")
        if flat.size == 0:
            return cls(h, w, ())
        changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], changes, [flat.size]))
        runs = np.diff(bounds)
        if flat[0]:
            runs = np.concatenate(([0], runs))
        return cls(h, w, tuple(int(r) for r in runs))

    def decode(self) -> np.ndarray:
        """Decode to a boolean (H, W) grid; decode(encode(g)) == g."""
        flat = np.zeros(self.height * self.width, dtype=bool)
        pos = 0
        fg = False
        for run in self.runs:
            if fg:
                flat[pos : pos + run] = True
            pos += run
            fg = not fg
        return flat.reshape((self.height, self.width), order="F")

    @property
    def area(self) -> int:
        """Foreground pixel count."""
        return int(sum(self.runs[1::2]))

    def foreground_intervals(self) -> np.ndarray:
        """Foreground [start, end) intervals over the flat column-major index."""
        ends = np.cumsum(np.asarray(self.runs, dtype=np.int64))
        starts = ends - np.asarray(self.runs, dtype=np.int64)
        fg_starts = starts[1::2]
        fg_ends = ends[1::2]
        keep = fg_ends > fg_starts
        return np.stack([fg_starts[keep], fg_ends[keep]], axis=1)


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint or degenerate."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_contains(outer: Box, inner: Box) -> bool:
    """True iff every corner of ``inner`` lies inside-or-on ``outer``."""
    return (
        inner.x_min >= outer.x_min
        and inner.y_min >= outer.y_min
        and inner.x_max <= outer.x_max
        and inner.y_max <= outer.y_max
    )


def min_bounding_rect(m: MaskRLE) -> Box:
    """Tightest box covering all foreground pixels of ``m``.

    Raises ``EmptyMask`` when there is no foreground.  Works directly on the
    run intervals: an interval crossing a column boundary necessarily covers
    row 0 (start of the next column) and row H-1 (end of the previous one).
    """
    ivs = m.foreground_intervals()
    if ivs.shape[0] == 0:
        raise EmptyMask("mask has no foreground pixels")
    h = m.height
    start, end = ivs[:, 0], ivs[:, 1]
    col_lo = start // h
    col_hi = (end - 1) // h
    crosses = col_hi > col_lo
    row_lo = np.where(crosses, 0, start % h)
    row_hi = np.where(crosses, h - 1, (end - 1) % h)
    return Box(
        float(col_lo.min()),
        float(row_lo.min()),
        float(col_hi.max() + 1),
        float(row_hi.max() + 1),
    )


def _intersection_area(a: MaskRLE, b: MaskRLE) -> int:
    ia = a.foreground_intervals()
    ib = b.foreground_intervals()
    i = j = 0
    total = 0
    while i < ia.shape[0] and j < ib.shape[0]:
        s = max(ia[i, 0], ib[j, 0])
        e = min(ia[i, 1], ib[j, 1])
        if e > s:
            total += int(e - s)
        if ia[i, 1] <= ib[j, 1]:
            i += 1
        else:
            j += 1
    return total


def mask_iou(a: MaskRLE, b: MaskRLE) -> float:
    """Pixel IoU of two same-extent masks; 0 when both are empty."""
    if (a.height, a.width) != (b.height, b.width):
        raise ShapeMismatch(
            f"mask extents differ: {(a.height, a.width)} vs {(b.height, b.width)}"
        )
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


def dice_coeff(a: MaskRLE, b: MaskRLE) -> float:
    """Dice coefficient 2|A∩B| / (|A|+|B|); 0 when both masks are empty."""
    if (a.height, a.width) != (b.height, b.width):
        raise ShapeMismatch(
            f"mask extents differ: {(a.height, a.width)} vs {(b.height, b.width)}"
        )
    denom = a.area + b.area
    if denom == 0:
        return 0.0
    return 2.0 * _intersection_area(a, b) / denom


def weighted_box_merge(p: Box, s: Box, w_p: float, w_s: float) -> Box:
    """Coordinate-wise weighted average of two boxes."""
    total = w_p + w_s
    if total <= 0.0:
        raise ValueError(f"weights must sum to a positive value, got {w_p} + {w_s}")
    return Box(
        (w_p * p.x_min + w_s * s.x_min) / total,
        (w_p * p.y_min + w_s * s.y_min) / total,
        (w_p * p.x_max + w_s * s.x_max) / total,
        (w_p * p.y_max + w_s * s.y_max) / total,
    )
