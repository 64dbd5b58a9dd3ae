"""Positive expansion and negative sampling around stage-one selections.

Positive expansion jitters the selected box into scaled/shifted variants
appended to the object's bag.  Negative sampling draws background boxes
over the whole image (rejected when they overlap any positive proposal too
much) and small part boxes inside the selected box; both samplers are
deterministic under their generator and cap rejection attempts so they
always terminate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .geometry import Box, box_iou

KIND_BACKGROUND = "background"
KIND_PART = "part"

_ATTEMPT_FACTOR = 50
_MIN_SIDE = 4.0

# (size sign, shift sign) combinations used by the box expansion.
_EXPAND_SIGNS = ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0))


@dataclass(frozen=True)
class NegativeSet:
    """Sampled negative boxes with their provenance kind."""

    proposals: tuple[Box, ...]
    kinds: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.proposals)


def expand_positive_boxes(box: Box, dist_score: float, v: float, scene_width: float,
                          scene_height: float, count: int = 4) -> list[Box]:
    """Scaled/shifted variants of ``box``: sizes times (1 +/- v/dist_score),
    centers shifted by +/- half the size change; clipped to the scene."""
    if dist_score <= 0.0:
        raise ConfigError(f"dist_score must be positive, got {dist_score}")
    ratio = v / dist_score
    if ratio >= 1.0:
        raise ConfigError(f"v/dist_score = {ratio} >= 1 would collapse box sizes")
    if not (0 <= count <= len(_EXPAND_SIGNS)):
        raise ConfigError(f"count must lie in [0, {len(_EXPAND_SIGNS)}], got {count}")
    cx, cy, w0, h0 = box.center_size()
    out = []
    for size_sign, shift_sign in _EXPAND_SIGNS[:count]:
        w = (1.0 + size_sign * ratio) * w0
        h = (1.0 + size_sign * ratio) * h0
        x = cx + shift_sign * (w - w0) / 2.0
        y = cy + shift_sign * (h - h0) / 2.0
        out.append(Box.from_center_size(x, y, w, h).clipped(scene_width, scene_height))
    return out


def sample_background_negatives(scene_width: float, scene_height: float,
                                positive_boxes: Sequence[Box], t_neg1: float, budget: int,
                                rng: np.random.Generator) -> list[Box]:
    """Background boxes: uniform centers, log-uniform sides, max IoU against
    every positive below ``t_neg1``.  May return fewer than ``budget``."""
    out: list[Box] = []
    if budget <= 0:
        return out
    hi_w = max(_MIN_SIDE * 1.001, 0.9 * scene_width)
    hi_h = max(_MIN_SIDE * 1.001, 0.9 * scene_height)
    attempts = 0
    cap = _ATTEMPT_FACTOR * budget
    while len(out) < budget and attempts < cap:
        attempts += 1
        w = math.exp(rng.uniform(math.log(_MIN_SIDE), math.log(hi_w)))
        h = math.exp(rng.uniform(math.log(_MIN_SIDE), math.log(hi_h)))
        cx = rng.uniform(0.0, scene_width)
        cy = rng.uniform(0.0, scene_height)
        box = Box.from_center_size(cx, cy, w, h).clipped(scene_width, scene_height)
        if box.area <= 0.0:
            continue
        if all(box_iou(box, p) < t_neg1 for p in positive_boxes):
            out.append(box)
    return out


def sample_part_negatives(selected: Box, t_neg2: float, budget: int,
                          rng: np.random.Generator) -> list[Box]:
    """Small boxes inside ``selected`` with IoU against it below ``t_neg2``.

    Side fractions stay at or below half the selected box so the samples
    read as object fragments rather than near-copies of the selection.
    """
    out: list[Box] = []
    if budget <= 0 or selected.area <= 0.0:
        return out
    w0, h0 = selected.width, selected.height
    attempts = 0
    cap = _ATTEMPT_FACTOR * budget
    while len(out) < budget and attempts < cap:
        attempts += 1
        w = rng.uniform(0.15, 0.5) * w0
        h = rng.uniform(0.15, 0.5) * h0
        x0 = selected.x_min + rng.uniform(0.0, w0 - w)
        y0 = selected.y_min + rng.uniform(0.0, h0 - h)
        box = Box(x0, y0, x0 + w, y0 + h)
        if box_iou(box, selected) < t_neg2:
            out.append(box)
    return out


def build_negative_set(scene_width: float, scene_height: float,
                       positive_boxes: Sequence[Box], selected_boxes: Sequence[Box],
                       t_neg1: float, t_neg2: float, background_budget: int,
                       part_budget_per_object: int, rng: np.random.Generator) -> NegativeSet:
    """Sample one scene's negative set: background first, then per-object parts."""
    boxes: list[Box] = []
    kinds: list[str] = []
    for b in sample_background_negatives(
        scene_width, scene_height, positive_boxes, t_neg1, background_budget, rng
    ):
        boxes.append(b)
        kinds.append(KIND_BACKGROUND)
    for sel in selected_boxes:
        for b in sample_part_negatives(sel, t_neg2, part_budget_per_object, rng):
            boxes.append(b)
            kinds.append(KIND_PART)
    return NegativeSet(proposals=tuple(boxes), kinds=tuple(kinds))
