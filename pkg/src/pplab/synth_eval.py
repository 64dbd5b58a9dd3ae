"""Synthetic scene oracle and corpus-level evaluation metrics.

The generator renders non-overlapping class-labelled shapes (ellipses and
rectangles), samples one annotated point inside each, and builds a proposal
bag per object that deliberately reproduces the two failure modes the
pipeline exists to fix:

* ``part`` proposals are solid interior rectangles of an ellipse, so their
  mask fills their box completely; any scorer favouring foreground-dominant
  regions will prefer them over the whole object.
* ``group`` proposals are unions of two adjacent same-class objects, so
  they always contain at least two same-class annotated points.

Ground truth travels with each scene, which makes the corpus an oracle for
mean box IoU and for the mask-to-box occupancy gap metric.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .data_model import (
    AnnotatedPoint,
    CorpusManifest,
    GroundTruthObject,
    Proposal,
    ProposalBag,
    PseudoLabel,
    Scene,
    save_manifest,
    save_scene,
)
from .errors import ConfigError, MissingGT, ZeroAreaBox
from .features import LabelImageFeatures, feature_dim_for_classes
from .geometry import Box, MaskRLE, Point2D, box_iou, min_bounding_rect

KIND_TRUE = "true"
KIND_JITTER = "jitter"
KIND_PART = "part"
KIND_GROUP = "group"
KIND_DISTRACT = "distract"


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator knobs; rates are per-object probabilities."""

    num_scenes: int = 20
    width: int = 128
    height: int = 128
    num_classes: int = 4
    min_objects: int = 2
    max_objects: int = 5
    adjacency_rate: float = 0.3
    part_rate: float = 0.5
    proposals_per_bag: int = 8
    feature_dim: int = 11
    feature_noise: float = 0.02
    box_jitter: float = 0.04
    rect_fraction: float = 0.15
    seed: int = 42

    def validate(self) -> None:
        if self.num_scenes < 1:
            raise ConfigError(f"num_scenes must be >= 1, got {self.num_scenes}")
        if self.width < 32 or self.height < 32:
            raise ConfigError(f"width/height must be >= 32, got {self.width}x{self.height}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ConfigError(
                f"need 1 <= min_objects <= max_objects, got {self.min_objects}..{self.max_objects}"
            )
        for name in ("adjacency_rate", "part_rate", "rect_fraction"):
            val = getattr(self, name)
            if not (0.0 <= val <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {val}")
        if self.proposals_per_bag < 1:
            raise ConfigError(f"proposals_per_bag must be >= 1, got {self.proposals_per_bag}")
        expected = feature_dim_for_classes(self.num_classes)
        if self.feature_dim != expected:
            raise ConfigError(
                f"feature_dim must equal num_classes + {expected - self.num_classes}"
                f" = {expected}, got {self.feature_dim}"
            )
        if self.feature_noise < 0.0:
            raise ConfigError(f"feature_noise must be >= 0, got {self.feature_noise}")
        if not (0.0 < self.box_jitter <= 0.2):
            raise ConfigError(f"box_jitter must lie in (0, 0.2], got {self.box_jitter}")

    def to_json_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "SyntheticConfig":
        if not isinstance(data, dict):
            raise ConfigError("synthetic config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class SceneTrace:
    """Generation provenance used by audits: proposal kinds per object."""

    kinds: tuple[tuple[str, ...], ...]
    part_trapped: tuple[bool, ...]
    group_partners: tuple[tuple[int, ...], ...]


@dataclass
class _PlacedObject:
    class_id: int
    shape: str  # "ellipse" | "rect"
    cx: float
    cy: float
    a: float  # semi-width
    b: float  # semi-height
    mask: np.ndarray | None = None
    box: Box | None = None


def _raster(shape: str, cx: float, cy: float, a: float, b: float,
            grid_x: np.ndarray, grid_y: np.ndarray) -> np.ndarray:
    if shape == "ellipse":
        return ((grid_x - cx) / a) ** 2 + ((grid_y - cy) / b) ** 2 <= 1.0
    return (
        (grid_x >= cx - a) & (grid_x < cx + a) & (grid_y >= cy - b) & (grid_y < cy + b)
    )


def _boxes_overlap(b1: tuple[float, float, float, float],
                   b2: tuple[float, float, float, float], margin: float) -> bool:
    return not (
        b1[2] + margin <= b2[0]
        or b2[2] + margin <= b1[0]
        or b1[3] + margin <= b2[1]
        or b2[3] + margin <= b1[1]
    )


def _place_objects(cfg: SyntheticConfig, rng: np.random.Generator
                   ) -> tuple[list[_PlacedObject], list[bool], list[set[int]]]:
    w, h = cfg.width, cfg.height
    s_lo = 0.06 * min(w, h)
    s_hi = 0.12 * min(w, h)
    n_target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed: list[_PlacedObject] = []
    part_trapped: list[bool] = []
    partners: list[set[int]] = []

    for _ in range(n_target):
        trap_part = rng.random() < cfg.part_rate
        want_adjacent = rng.random() < cfg.adjacency_rate and placed
        neighbor_idx = int(rng.integers(len(placed))) if want_adjacent else -1
        if want_adjacent:
            class_id = placed[neighbor_idx].class_id
        else:
            class_id = int(rng.integers(cfg.num_classes))
        shape = "ellipse"
        if not trap_part and rng.random() < cfg.rect_fraction:
            shape = "rect"
        a = rng.uniform(s_lo, s_hi)
        b = rng.uniform(s_lo, s_hi)

        accepted = None
        adjacent_ok = False
        for attempt in range(40):
            use_adjacent = want_adjacent and attempt < 15
            if use_adjacent:
                nb = placed[neighbor_idx]
                direction = int(rng.integers(4))
                gap = rng.uniform(2.0, 5.0)
                if direction == 0:
                    cx, cy = nb.cx + nb.a + gap + a, nb.cy + rng.uniform(-0.3, 0.3) * nb.b
                elif direction == 1:
                    cx, cy = nb.cx - nb.a - gap - a, nb.cy + rng.uniform(-0.3, 0.3) * nb.b
                elif direction == 2:
                    cx, cy = nb.cx + rng.uniform(-0.3, 0.3) * nb.a, nb.cy + nb.b + gap + b
                else:
                    cx, cy = nb.cx + rng.uniform(-0.3, 0.3) * nb.a, nb.cy - nb.b - gap - b
            else:
                cx = rng.uniform(a + 1.0, w - a - 1.0)
                cy = rng.uniform(b + 1.0, h - b - 1.0)
            if not (a + 1.0 <= cx <= w - a - 1.0 and b + 1.0 <= cy <= h - b - 1.0):
                continue
            cand = (cx - a, cy - b, cx + a, cy + b)
            if any(
                _boxes_overlap(cand, (p.cx - p.a, p.cy - p.b, p.cx + p.a, p.cy + p.b), 1.5)
                for p in placed
            ):
                continue
            accepted = (cx, cy)
            adjacent_ok = use_adjacent
            break
        if accepted is None:
            continue
        idx = len(placed)
        placed.append(_PlacedObject(class_id, shape, accepted[0], accepted[1], a, b))
        part_trapped.append(trap_part)
        partners.append(set())
        if adjacent_ok:
            partners[idx].add(neighbor_idx)
            partners[neighbor_idx].add(idx)
    return placed, part_trapped, partners


def _true_proposal(obj: _PlacedObject, jitter: float, rng: np.random.Generator,
                   grid_x: np.ndarray, grid_y: np.ndarray) -> np.ndarray:
    # Outward-only scaling keeps the tight proposal's IoU bound analytic.
    sx = rng.uniform(1.0, 1.0 + jitter)
    sy = rng.uniform(1.0, 1.0 + jitter)
    return _raster(obj.shape, obj.cx, obj.cy, obj.a * sx, obj.b * sy, grid_x, grid_y)


def _jitter_proposal(obj: _PlacedObject, jitter: float, rng: np.random.Generator,
                     grid_x: np.ndarray, grid_y: np.ndarray) -> np.ndarray:
    j = 2.0 * jitter
    sx = rng.uniform(1.0 - j, 1.0 + j)
    sy = rng.uniform(1.0 - j, 1.0 + j)
    dx = rng.uniform(-j, j) * obj.a
    dy = rng.uniform(-j, j) * obj.b
    return _raster(obj.shape, obj.cx + dx, obj.cy + dy, obj.a * sx, obj.b * sy, grid_x, grid_y)


def _part_proposal(obj: _PlacedObject, rng: np.random.Generator,
                   grid_x: np.ndarray, grid_y: np.ndarray) -> np.ndarray:
    # Interior rectangle of the ellipse: fa^2 + fb^2 <= 0.95 keeps every
    # pixel centre strictly inside, so the mask fills its box (occupancy 1).
    fa = rng.uniform(0.55, 0.68)
    fb_hi = min(0.68, math.sqrt(max(0.30, 0.95 - fa * fa)))
    fb = rng.uniform(0.55, fb_hi) if fb_hi > 0.55 else fb_hi
    return _raster("rect", obj.cx, obj.cy, fa * obj.a, fb * obj.b, grid_x, grid_y)


def _distract_proposal(obj: _PlacedObject, rng: np.random.Generator,
                       grid_x: np.ndarray, grid_y: np.ndarray) -> np.ndarray:
    sx = rng.uniform(1.5, 2.2)
    sy = rng.uniform(1.5, 2.2)
    dx = rng.uniform(-0.25, 0.25) * obj.a
    dy = rng.uniform(-0.25, 0.25) * obj.b
    return _raster("ellipse", obj.cx + dx, obj.cy + dy, obj.a * sx, obj.b * sy, grid_x, grid_y)


def generate_scene_with_trace(cfg: SyntheticConfig, scene_seed: int) -> tuple[Scene, SceneTrace]:
    """Deterministically build one scene plus its generation provenance."""
    cfg.validate()
    rng = np.random.default_rng(scene_seed)
    w, h = cfg.width, cfg.height
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)

    placed, part_trapped, partners = _place_objects(cfg, rng)
    if not placed:
        # Degenerate dice roll; force one central object so scenes are never empty.
        placed = [_PlacedObject(0, "ellipse", w / 2.0, h / 2.0, 0.1 * w, 0.1 * h)]
        part_trapped = [False]
        partners = [set()]

    label_image = np.full((h, w), -1, dtype=np.int16)
    for idx, obj in enumerate(placed):
        mask = _raster(obj.shape, obj.cx, obj.cy, obj.a, obj.b, grid_x, grid_y)
        if not mask.any():
            mask = _raster("rect", obj.cx, obj.cy, max(obj.a, 1.5), max(obj.b, 1.5), grid_x, grid_y)
        obj.mask = mask
        obj.box = min_bounding_rect(MaskRLE.encode(mask))
        label_image[mask] = obj.class_id

    provider = LabelImageFeatures(
        label_image, cfg.num_classes, noise=cfg.feature_noise,
        rng=rng if cfg.feature_noise > 0.0 else None,
    )

    annotations = []
    for idx, obj in enumerate(placed):
        rows, cols = np.nonzero(obj.mask)
        pick = int(rng.integers(rows.size))
        annotations.append(
            AnnotatedPoint(
                point=Point2D(float(cols[pick]) + 0.5, float(rows[pick]) + 0.5),
                class_id=obj.class_id,
                instance_id=idx,
            )
        )

    bags = []
    trace_kinds: list[tuple[str, ...]] = []
    for idx, obj in enumerate(placed):
        kinds = [KIND_TRUE]
        if part_trapped[idx] and obj.shape == "ellipse":
            kinds.append(KIND_PART)
        if partners[idx]:
            kinds.append(KIND_GROUP)
        kinds.append(KIND_DISTRACT)
        while len(kinds) < cfg.proposals_per_bag:
            kinds.append(KIND_JITTER)
        kinds = kinds[: cfg.proposals_per_bag]
        order = rng.permutation(len(kinds))
        kinds = [kinds[i] for i in order]

        proposals = []
        for kind in kinds:
            if kind == KIND_TRUE:
                mask = _true_proposal(obj, cfg.box_jitter, rng, grid_x, grid_y)
            elif kind == KIND_JITTER:
                mask = _jitter_proposal(obj, cfg.box_jitter, rng, grid_x, grid_y)
            elif kind == KIND_PART:
                mask = _part_proposal(obj, rng, grid_x, grid_y)
            elif kind == KIND_GROUP:
                partner = placed[sorted(partners[idx])[0]]
                mask = obj.mask | partner.mask
            else:
                mask = _distract_proposal(obj, rng, grid_x, grid_y)
            if not mask.any():
                mask = obj.mask
            rle = MaskRLE.encode(mask)
            box = min_bounding_rect(rle)
            feature = provider.features_for_box(box)
            proposals.append(Proposal(box=box, mask=rle, feature=tuple(float(v) for v in feature)))
        bags.append(ProposalBag(owner=idx, proposals=tuple(proposals)))
        trace_kinds.append(tuple(kinds))

    ground_truth = tuple(
        GroundTruthObject(instance_id=idx, box=obj.box, mask=MaskRLE.encode(obj.mask))
        for idx, obj in enumerate(placed)
    )
    scene = Scene(
        width=w,
        height=h,
        num_classes=cfg.num_classes,
        feature_dim=cfg.feature_dim,
        annotations=tuple(annotations),
        bags=tuple(bags),
        ground_truth=ground_truth,
    )
    trace = SceneTrace(
        kinds=tuple(trace_kinds),
        part_trapped=tuple(part_trapped),
        group_partners=tuple(tuple(sorted(p)) for p in partners),
    )
    return scene, trace


def generate_scene(cfg: SyntheticConfig, scene_seed: int) -> Scene:
    return generate_scene_with_trace(cfg, scene_seed)[0]


def scene_seeds(cfg: SyntheticConfig) -> list[int]:
    state = np.random.SeedSequence(cfg.seed).generate_state(cfg.num_scenes, dtype=np.uint64)
    return [int(s) for s in state]


def generate_corpus(cfg: SyntheticConfig, out_dir: str) -> CorpusManifest:
    """Write scene files plus manifest.json into ``out_dir``."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, seed in enumerate(scene_seeds(cfg)):
        scene = generate_scene(cfg, seed)
        name = f"scene_{i:05d}.json"
        save_scene(scene, os.path.join(out_dir, name))
        names.append(name)
    manifest = CorpusManifest(
        scenes=tuple(names), num_classes=cfg.num_classes, feature_dim=cfg.feature_dim
    )
    save_manifest(manifest, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    miou_box: float | None
    t_rv: float | None
    gap: float | None
    gap_abs: float | None
    qualifying_count: int
    num_scenes: int
    num_objects: int
    per_scene: tuple[dict[str, Any], ...]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "miou_box": self.miou_box,
            "t_rv": self.t_rv,
            "gap": self.gap,
            "gap_abs": self.gap_abs,
            "qualifying_count": self.qualifying_count,
            "num_scenes": self.num_scenes,
            "num_objects": self.num_objects,
            "per_scene": list(self.per_scene),
        }


@dataclass(frozen=True)
class GapMetrics:
    t_rv: float
    gap_single: float
    gap_our: float
    qualifying_count: int


def rv_ratio(mask: MaskRLE, box: Box) -> float:
    """Foreground pixel count over box area."""
    if box.area <= 0.0:
        raise ZeroAreaBox(f"box {box.as_list()} has zero area")
    return mask.area / box.area


def miou_box(labels: Sequence[PseudoLabel],
             gt_by_instance: Mapping[int, GroundTruthObject]) -> float:
    """Mean IoU between final label boxes and ground truth boxes."""
    if not labels:
        return 0.0
    total = 0.0
    for label in labels:
        gt = gt_by_instance.get(label.instance_id)
        if gt is None:
            raise MissingGT(f"instance {label.instance_id} absent from ground truth")
        total += box_iou(label.box_prm, gt.box)
    return total / len(labels)


def bag_rv_max(bag: ProposalBag) -> float | None:
    """Largest mask-to-box occupancy among the bag's masked proposals."""
    best = None
    for p in bag.proposals:
        if p.mask is None or p.box.area <= 0.0:
            continue
        rv = rv_ratio(p.mask, p.box)
        if best is None or rv > best:
            best = rv
    return best


def compute_t_rv(scenes: Sequence[Scene]) -> float | None:
    """Corpus mean of the per-object occupancy maxima."""
    values = []
    for scene in scenes:
        for bag in scene.bags:
            rv = bag_rv_max(bag)
            if rv is not None:
                values.append(rv)
    if not values:
        return None
    return float(np.mean(values))


def _qualifying_objects(scenes: Sequence[Scene], t_rv: float) -> list[tuple[int, int]]:
    out = []
    for s_idx, scene in enumerate(scenes):
        for o_idx, bag in enumerate(scene.bags):
            rv = bag_rv_max(bag)
            if rv is not None and rv > t_rv:
                out.append((s_idx, o_idx))
    return out


def gap_for_labels(scenes: Sequence[Scene], labels_per_scene: Sequence[Sequence[PseudoLabel]],
                   t_rv: float) -> tuple[float, float, int]:
    """Signed and absolute mean occupancy deviation over qualifying objects.

    Deviation per object is rv(selected mask, selected box) - rv(gt mask, gt
    box); objects qualify when their bag's occupancy maximum exceeds
    ``t_rv``.  An empty qualifying set reports (0.0, 0.0, 0).
    """
    devs = []
    for s_idx, o_idx in _qualifying_objects(scenes, t_rv):
        scene = scenes[s_idx]
        gt_map = scene.gt_by_instance()
        instance_id = scene.annotations[o_idx].instance_id
        gt = gt_map.get(instance_id)
        if gt is None:
            raise MissingGT(f"instance {instance_id} absent from ground truth")
        label = next(
            (l for l in labels_per_scene[s_idx] if l.instance_id == instance_id), None
        )
        if label is None:
            continue
        devs.append(rv_ratio(label.mask_prm, label.box_prm) - rv_ratio(gt.mask, gt.box))
    if not devs:
        return 0.0, 0.0, 0
    arr = np.asarray(devs)
    return float(arr.mean()), float(np.abs(arr).mean()), len(devs)


def gap_metrics(scenes: Sequence[Scene],
                labels_single: Sequence[Sequence[PseudoLabel]],
                labels_our: Sequence[Sequence[PseudoLabel]]) -> GapMetrics:
    """Occupancy-gap comparison between two label sets over one corpus."""
    t_rv = compute_t_rv(scenes)
    if t_rv is None:
        raise MissingGT("corpus has no masked proposals to derive the threshold from")
    gap_s, _, count = gap_for_labels(scenes, labels_single, t_rv)
    gap_o, _, _ = gap_for_labels(scenes, labels_our, t_rv)
    return GapMetrics(t_rv=t_rv, gap_single=gap_s, gap_our=gap_o, qualifying_count=count)


def evaluate_run(scenes: Sequence[Scene], names: Sequence[str],
                 labels_per_scene: Sequence[Sequence[PseudoLabel]]) -> EvalReport:
    """Per-run report; metrics are None when the corpus carries no ground truth."""
    per_scene = []
    ious = []
    num_objects = 0
    have_gt = all(s.ground_truth is not None for s in scenes) and len(scenes) > 0
    for scene, name, labels in zip(scenes, names, labels_per_scene):
        num_objects += len(labels)
        entry: dict[str, Any] = {"scene": name, "objects": len(labels)}
        if scene.ground_truth is not None:
            scene_miou = miou_box(labels, scene.gt_by_instance()) if labels else 0.0
            entry["miou_box"] = scene_miou
            ious.extend(
                box_iou(l.box_prm, scene.gt_by_instance()[l.instance_id].box) for l in labels
            )
        per_scene.append(entry)
    if have_gt:
        t_rv = compute_t_rv(scenes)
        gap = gap_abs = None
        qualifying = 0
        if t_rv is not None:
            gap, gap_abs, qualifying = gap_for_labels(scenes, labels_per_scene, t_rv)
        return EvalReport(
            miou_box=float(np.mean(ious)) if ious else 0.0,
            t_rv=t_rv,
            gap=gap,
            gap_abs=gap_abs,
            qualifying_count=qualifying,
            num_scenes=len(scenes),
            num_objects=num_objects,
            per_scene=tuple(per_scene),
        )
    return EvalReport(
        miou_box=None,
        t_rv=None,
        gap=None,
        gap_abs=None,
        qualifying_count=0,
        num_scenes=len(scenes),
        num_objects=num_objects,
        per_scene=tuple(per_scene),
    )
