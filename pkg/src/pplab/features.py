"""Pluggable feature extraction for boxes.

The engine never sees a backbone: proposal features arrive precomputed in
the scene files, and anything generated at runtime (expanded positives,
negative samples) gets features from a provider.  The synthetic provider
reads a class-label image: the feature is the class-occupancy histogram of
the box window (background last) concatenated with six box geometry stats.
"""

from __future__ import annotations

import math
from typing import Protocol

import numpy as np

from .data_model import Scene
from .errors import MissingGT
from .geometry import Box

GEOMETRY_STATS = 6


def feature_dim_for_classes(num_classes: int) -> int:
    """Histogram over classes + background, plus the geometry stats."""
    return num_classes + 1 + GEOMETRY_STATS


class FeatureProvider(Protocol):
    dim: int

    def features_for_box(self, box: Box) -> np.ndarray: ...


class LabelImageFeatures:
    """Histogram + geometry features from an integer class-label image.

    ``label_image`` holds a class id per pixel, -1 for background.  With a
    positive ``noise`` level, Gaussian noise from ``rng`` is added to the
    histogram bins (used only at corpus generation time).
    """

    def __init__(self, label_image: np.ndarray, num_classes: int,
                 noise: float = 0.0, rng: np.random.Generator | None = None):
        self.label_image = np.asarray(label_image)
        self.num_classes = num_classes
        self.noise = noise
        self.rng = rng
        self.dim = feature_dim_for_classes(num_classes)
        if noise > 0.0 and rng is None:
            raise ValueError("noise > 0 requires an rng")

    def features_for_box(self, box: Box) -> np.ndarray:
        h, w = self.label_image.shape
        c0 = max(0, int(math.floor(box.x_min)))
        c1 = min(w, int(math.ceil(box.x_max)))
        r0 = max(0, int(math.floor(box.y_min)))
        r1 = min(h, int(math.ceil(box.y_max)))
        hist = np.zeros(self.num_classes + 1, dtype=np.float64)
        if c1 > c0 and r1 > r0:
            window = self.label_image[r0:r1, c0:c1]
            counts = np.bincount(window.ravel() + 1, minlength=self.num_classes + 1)
            total = window.size
            hist[: self.num_classes] = counts[1 : self.num_classes + 1] / total
            hist[self.num_classes] = counts[0] / total
        if self.noise > 0.0:
            hist = hist + self.rng.normal(0.0, self.noise, size=hist.shape)

        bw, bh = box.width, box.height
        geom = np.array(
            [
                (box.x_min + box.x_max) / (2.0 * w),
                (box.y_min + box.y_max) / (2.0 * h),
                bw / w,
                bh / h,
                (bw * bh) / (w * h),
                math.log(bw / bh) if bw > 0.0 and bh > 0.0 else 0.0,
            ],
            dtype=np.float64,
        )
        return np.concatenate([hist, geom])


def render_label_image(scene: Scene) -> np.ndarray:
    """Class-label image reconstructed from ground truth masks."""
    if scene.ground_truth is None:
        raise MissingGT("scene carries no ground truth to render from")
    class_by_instance = {a.instance_id: a.class_id for a in scene.annotations}
    label = np.full((scene.height, scene.width), -1, dtype=np.int16)
    for gt in scene.ground_truth:
        cls = class_by_instance.get(gt.instance_id)
        if cls is None:
            continue
        label[gt.mask.decode()] = cls
    return label


def provider_from_ground_truth(scene: Scene) -> LabelImageFeatures:
    """Noise-free provider matching the generator's feature layout."""
    return LabelImageFeatures(render_label_image(scene), scene.num_classes)
