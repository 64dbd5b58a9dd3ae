"""Distance-based score penalty for proposals that swallow neighbors.

A proposal overlapping other annotated points of the same class gets its
score damped: the damping weight is the summed Euclidean distance from the
object's own point to every overlapped same-class point, and the score is
``sigmoid(1/w) ** d`` (exactly 1 when nothing is overlapped).  A clamped
exponential variant ``min(1, scale * exp(d/w))`` is available for ablation.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .data_model import AnnotatedPoint
from .geometry import Box, Point2D

VARIANT_SIGMOID = "sigmoid"
VARIANT_LITERAL = "literal"


def overlap_indicators(box: Box, points: Sequence[Point2D]) -> np.ndarray:
    """Closed-containment indicator per point (edges count as inside)."""
    return np.array([box.contains_point(p) for p in points], dtype=bool)


def distance_weight(origin: Point2D, points: Sequence[Point2D],
                    indicators: np.ndarray) -> float:
    """Sum of distances from ``origin`` to every indicated point."""
    total = 0.0
    for p, hit in zip(points, indicators):
        if hit:
            total += origin.distance_to(p)
    return total


def distance_score(w: float, d: float, variant: str = VARIANT_SIGMOID,
                   literal_scale: float = 0.5) -> float:
    """Map a distance weight to a score in (0, 1]; 1 exactly when w == 0."""
    if w < 0.0:
        raise ValueError(f"distance weight must be non-negative, got {w}")
    if w == 0.0:
        return 1.0
    if variant == VARIANT_SIGMOID:
        x = 1.0 / w
        sig = 1.0 / (1.0 + math.exp(-x))
        return sig**d
    if variant == VARIANT_LITERAL:
        log_val = math.log(literal_scale) + d / w
        if log_val >= 0.0:
            return 1.0
        return math.exp(log_val)
    raise ValueError(f"unknown variant {variant!r}")


def same_class_other_points(annotations: Sequence[AnnotatedPoint],
                            object_index: int) -> list[Point2D]:
    me = annotations[object_index]
    return [
        a.point
        for j, a in enumerate(annotations)
        if j != object_index and a.class_id == me.class_id
    ]


def box_distance_scores(boxes: Sequence[Box], annotations: Sequence[AnnotatedPoint],
                        object_index: int, d: float, variant: str = VARIANT_SIGMOID,
                        literal_scale: float = 0.5) -> np.ndarray:
    """Distance score for each box of one object's bag (or any box list)."""
    origin = annotations[object_index].point
    others = same_class_other_points(annotations, object_index)
    out = np.ones(len(boxes), dtype=np.float64)
    if not others:
        return out
    for m, box in enumerate(boxes):
        t = overlap_indicators(box, others)
        w = distance_weight(origin, others, t)
        out[m] = distance_score(w, d, variant, literal_scale)
    return out
