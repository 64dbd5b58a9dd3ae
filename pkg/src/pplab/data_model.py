"""Scene/corpus schema, validation, and JSON persistence.

A corpus is a directory of scene files plus ``manifest.json`` naming them
and fixing the class count K and feature dimension D.  Features travel with
the proposals (precomputed), so the engine never touches a backbone.
Serialization uses Python's shortest round-trip float representation, which
reloads bit-exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any

from .errors import (
    ConfigError,
    FeatureDimMismatch,
    ParseError,
    ValidationError,
    Violation,
)
from .geometry import Box, MaskRLE, Point2D, min_bounding_rect

_BOX_BBOX_TOL = 1e-9


@dataclass(frozen=True)
class AnnotatedPoint:
    """One click annotation: a point, its class, and a scene-unique id."""

    point: Point2D
    class_id: int
    instance_id: int


@dataclass(frozen=True)
class Proposal:
    """One candidate region: box, optional mask, and a feature vector."""

    box: Box
    mask: MaskRLE | None
    feature: tuple[float, ...]


@dataclass(frozen=True)
class ProposalBag:
    """All proposals generated for one annotated object."""

    owner: int
    proposals: tuple[Proposal, ...]


@dataclass(frozen=True)
class GroundTruthObject:
    instance_id: int
    box: Box
    mask: MaskRLE


@dataclass(frozen=True)
class Scene:
    """An image extent with aligned annotations and proposal bags."""

    width: int
    height: int
    num_classes: int
    feature_dim: int
    annotations: tuple[AnnotatedPoint, ...]
    bags: tuple[ProposalBag, ...]
    ground_truth: tuple[GroundTruthObject, ...] | None = None

    def gt_by_instance(self) -> dict[int, GroundTruthObject]:
        if self.ground_truth is None:
            return {}
        return {g.instance_id: g for g in self.ground_truth}


@dataclass(frozen=True)
class ScoreRecord:
    """Per-object diagnostics, enough to replay box mining from the file."""

    psm_index: int
    psm_score: float
    select_index: int
    select_score: float
    psm_bag_gt: float
    prm_scores: tuple[float, ...]
    ppg_boxes: tuple[Box, ...]


@dataclass(frozen=True)
class PseudoLabel:
    """Final box+mask for one object, with full stage provenance."""

    instance_id: int
    class_id: int
    box_prm: Box
    mask_prm: MaskRLE
    aux_masks: tuple[MaskRLE, ...]
    psm_box: Box
    select_box: Box
    scores: ScoreRecord


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for the two-stage pipeline.

    Defaults embed the published hyperparameters (the ``paper_defaults``
    preset): d=0.015, alpha=0.25, lambda=0.25, gamma=0.25, t_neg1=0.3,
    t_neg2=0.5, t_min1=0.6, t_min2=0.3, k=3.
    """

    d: float = 0.015
    v: float = 0.1
    alpha: float = 0.25
    lambda_: float = 0.25
    gamma: float = 0.25
    focal_gamma: float = 2.0
    t_neg1: float = 0.3
    t_neg2: float = 0.5
    t_min1: float = 0.6
    t_min2: float = 0.3
    k: int = 3
    learning_rate: float = 0.01
    epochs: int = 30
    hidden_width: int = 64
    seed: int = 0
    neg_background: int = 16
    neg_part: int = 8
    ppg_count: int = 4
    pdg: bool = True
    pnpg: bool = True
    prm: bool = True
    bms: bool = True
    mps: bool = True
    pdg_variant: str = "sigmoid"
    pdg_literal_scale: float = 0.5

    def validate(self) -> None:
        for name in ("t_neg1", "t_neg2", "t_min1", "t_min2"):
            val = getattr(self, name)
            if not (0.0 <= val <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {val}")
        for name in ("d", "v", "learning_rate", "pdg_literal_scale"):
            val = getattr(self, name)
            if not (val > 0.0 and math.isfinite(val)):
                raise ConfigError(f"{name} must be a positive finite float, got {val}")
        for name in ("alpha", "gamma"):
            val = getattr(self, name)
            if not (0.0 <= val <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {val}")
        if self.lambda_ < 0.0:
            raise ConfigError(f"lambda must be non-negative, got {self.lambda_}")
        if self.focal_gamma < 0.0:
            raise ConfigError(f"focal_gamma must be non-negative, got {self.focal_gamma}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.hidden_width < 1:
            raise ConfigError(f"hidden_width must be >= 1, got {self.hidden_width}")
        for name in ("neg_background", "neg_part"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not (0 <= self.ppg_count <= 4):
            raise ConfigError(f"ppg_count must lie in [0, 4], got {self.ppg_count}")
        if self.pdg_variant not in ("sigmoid", "literal"):
            raise ConfigError(f"pdg_variant must be 'sigmoid' or 'literal', got {self.pdg_variant!r}")

    def to_json_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            key = "lambda" if f.name == "lambda_" else f.name
            out[key] = getattr(self, f.name)
        return out

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("pipeline config must be a JSON object")
        data = dict(data)
        preset = data.pop("preset", None)
        if preset is not None and preset != "paper_defaults":
            raise ConfigError(f"unknown preset {preset!r}")
        known = {f.name for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, val in data.items():
            name = "lambda_" if key == "lambda" else key
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = val
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class CorpusManifest:
    scenes: tuple[str, ...]
    num_classes: int
    feature_dim: int


# ---------------------------------------------------------------------------
# JSON (de)serialization helpers
# ---------------------------------------------------------------------------


def _rle_to_json(m: MaskRLE | None) -> dict[str, Any] | None:
    if m is None:
        return None
    return {"h": m.height, "w": m.width, "runs": list(m.runs)}


def _rle_from_json(data: Any, path: str) -> MaskRLE | None:
    if data is None:
        return None
    try:
        return MaskRLE(int(data["h"]), int(data["w"]), tuple(int(r) for r in data["runs"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad RLE at {path}: {exc}") from exc


def _box_from_json(data: Any, path: str) -> Box:
    try:
        x0, y0, x1, y1 = (float(v) for v in data)
        return Box(x0, y0, x1, y1)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad box at {path}: {exc}") from exc


def scene_to_json_dict(scene: Scene) -> dict[str, Any]:
    return {
        "width": scene.width,
        "height": scene.height,
        "num_classes": scene.num_classes,
        "feature_dim": scene.feature_dim,
        "annotations": [
            {
                "instance_id": a.instance_id,
                "class_id": a.class_id,
                "x": a.point.x,
                "y": a.point.y,
            }
            for a in scene.annotations
        ],
        "bags": [
            {
                "instance_id": bag.owner,
                "proposals": [
                    {
                        "box": p.box.as_list(),
                        "rle": _rle_to_json(p.mask),
                        "feature": list(p.feature),
                    }
                    for p in bag.proposals
                ],
            }
            for bag in scene.bags
        ],
        "ground_truth": None
        if scene.ground_truth is None
        else [
            {"instance_id": g.instance_id, "box": g.box.as_list(), "rle": _rle_to_json(g.mask)}
            for g in scene.ground_truth
        ],
    }


def scene_from_json_dict(data: Any, source: str = "<memory>") -> Scene:
    if not isinstance(data, dict):
        raise ParseError(f"{source}: scene must be a JSON object")
    try:
        width = int(data["width"])
        height = int(data["height"])
        num_classes = int(data["num_classes"])
        feature_dim = int(data["feature_dim"])
        raw_annos = data["annotations"]
        raw_bags = data["bags"]
        raw_gt = data.get("ground_truth")
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{source}: missing or malformed top-level field: {exc}") from exc

    annotations = []
    for i, a in enumerate(raw_annos):
        try:
            annotations.append(
                AnnotatedPoint(
                    point=Point2D(float(a["x"]), float(a["y"])),
                    class_id=int(a["class_id"]),
                    instance_id=int(a["instance_id"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{source}: bad annotation at index {i}: {exc}") from exc

    bags = []
    for i, b in enumerate(raw_bags):
        try:
            proposals = tuple(
                Proposal(
                    box=_box_from_json(p["box"], f"bags[{i}].proposals[{j}].box"),
                    mask=_rle_from_json(p.get("rle"), f"bags[{i}].proposals[{j}].rle"),
                    feature=tuple(float(v) for v in p["feature"]),
                )
                for j, p in enumerate(b["proposals"])
            )
            bags.append(ProposalBag(owner=int(b["instance_id"]), proposals=proposals))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{source}: bad bag at index {i}: {exc}") from exc

    ground_truth = None
    if raw_gt is not None:
        gt_items = []
        for i, g in enumerate(raw_gt):
            try:
                mask = _rle_from_json(g["rle"], f"ground_truth[{i}].rle")
                if mask is None:
                    raise ParseError(f"{source}: ground_truth[{i}] lacks a mask")
                gt_items.append(
                    GroundTruthObject(
                        instance_id=int(g["instance_id"]),
                        box=_box_from_json(g["box"], f"ground_truth[{i}].box"),
                        mask=mask,
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{source}: bad ground truth at index {i}: {exc}") from exc
        ground_truth = tuple(gt_items)

    return Scene(
        width=width,
        height=height,
        num_classes=num_classes,
        feature_dim=feature_dim,
        annotations=tuple(annotations),
        bags=tuple(bags),
        ground_truth=ground_truth,
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_scene(scene: Scene) -> list[Violation]:
    """Check every scene invariant; returns violations as data, never raises."""
    out: list[Violation] = []
    if scene.width < 1 or scene.height < 1:
        out.append(Violation("BadExtent", "width/height", f"{scene.width}x{scene.height}"))
    if scene.num_classes < 1:
        out.append(Violation("BadClassCount", "num_classes", str(scene.num_classes)))
    if scene.feature_dim < 1:
        out.append(Violation("BadFeatureDim", "feature_dim", str(scene.feature_dim)))

    seen_ids: set[int] = set()
    for i, a in enumerate(scene.annotations):
        path = f"annotations[{i}]"
        if not (0 <= a.class_id < scene.num_classes):
            out.append(Violation("BadClassId", f"{path}.class_id", f"{a.class_id} not in [0, {scene.num_classes})"))
        if not (0 <= a.point.x < scene.width and 0 <= a.point.y < scene.height):
            out.append(Violation("PointOutOfScene", f"{path}.point", f"({a.point.x}, {a.point.y})"))
        if a.instance_id in seen_ids:
            out.append(Violation("DuplicateInstanceId", f"{path}.instance_id", str(a.instance_id)))
        seen_ids.add(a.instance_id)

    if len(scene.bags) != len(scene.annotations):
        out.append(
            Violation(
                "BagAnnotationCountMismatch",
                "bags",
                f"{len(scene.bags)} bags vs {len(scene.annotations)} annotations",
            )
        )
    for i, bag in enumerate(scene.bags):
        path = f"bags[{i}]"
        if i < len(scene.annotations) and bag.owner != scene.annotations[i].instance_id:
            out.append(
                Violation(
                    "BagOwnerMismatch",
                    f"{path}.instance_id",
                    f"{bag.owner} != annotation {scene.annotations[i].instance_id}",
                )
            )
        if len(bag.proposals) < 1:
            out.append(Violation("EmptyBag", f"{path}.proposals", "bag must hold >= 1 proposal"))
        for j, p in enumerate(bag.proposals):
            ppath = f"{path}.proposals[{j}]"
            if len(p.feature) != scene.feature_dim:
                out.append(
                    Violation(
                        "FeatureDimMismatch",
                        f"{ppath}.feature",
                        f"length {len(p.feature)} != feature_dim {scene.feature_dim}",
                    )
                )
            if any(not math.isfinite(v) for v in p.feature):
                out.append(Violation("NonFiniteFeature", f"{ppath}.feature", "feature has NaN/Inf"))
            if p.mask is not None:
                if (p.mask.height, p.mask.width) != (scene.height, scene.width):
                    out.append(
                        Violation(
                            "MaskExtentMismatch",
                            f"{ppath}.rle",
                            f"{p.mask.height}x{p.mask.width} != scene {scene.height}x{scene.width}",
                        )
                    )
                elif p.mask.area == 0:
                    out.append(Violation("EmptyProposalMask", f"{ppath}.rle", "no foreground"))
                else:
                    bbox = min_bounding_rect(p.mask)
                    if (
                        abs(bbox.x_min - p.box.x_min) > _BOX_BBOX_TOL
                        or abs(bbox.y_min - p.box.y_min) > _BOX_BBOX_TOL
                        or abs(bbox.x_max - p.box.x_max) > _BOX_BBOX_TOL
                        or abs(bbox.y_max - p.box.y_max) > _BOX_BBOX_TOL
                    ):
                        out.append(
                            Violation(
                                "BoxMaskMismatch",
                                f"{ppath}.box",
                                f"stored {p.box.as_list()} != mask bbox {bbox.as_list()}",
                            )
                        )

    if scene.ground_truth is not None:
        for i, g in enumerate(scene.ground_truth):
            path = f"ground_truth[{i}]"
            if g.instance_id not in seen_ids:
                out.append(Violation("UnknownGtInstance", f"{path}.instance_id", str(g.instance_id)))
            if (g.mask.height, g.mask.width) != (scene.height, scene.width):
                out.append(
                    Violation(
                        "MaskExtentMismatch",
                        f"{path}.rle",
                        f"{g.mask.height}x{g.mask.width} != scene {scene.height}x{scene.width}",
                    )
                )
    return out


def _raise_for_violations(violations: list[Violation]) -> None:
    if not violations:
        return
    if all(v.code == "FeatureDimMismatch" for v in violations):
        raise FeatureDimMismatch(violations)
    raise ValidationError(violations)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _dump_json(data: Any, path: str) -> None:
    text = json.dumps(data, separators=(",", ":"), allow_nan=False)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")


def _load_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def save_scene(scene: Scene, path: str) -> None:
    _dump_json(scene_to_json_dict(scene), path)


def load_scene(path: str) -> Scene:
    """Load and fully validate one scene file."""
    scene = scene_from_json_dict(_load_json(path), source=path)
    _raise_for_violations(validate_scene(scene))
    return scene


def save_manifest(manifest: CorpusManifest, corpus_dir: str) -> None:
    _dump_json(
        {
            "scenes": list(manifest.scenes),
            "num_classes": manifest.num_classes,
            "feature_dim": manifest.feature_dim,
        },
        os.path.join(corpus_dir, "manifest.json"),
    )


def load_manifest(corpus_dir: str) -> CorpusManifest:
    path = os.path.join(corpus_dir, "manifest.json")
    data = _load_json(path)
    try:
        return CorpusManifest(
            scenes=tuple(str(s) for s in data["scenes"]),
            num_classes=int(data["num_classes"]),
            feature_dim=int(data["feature_dim"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed manifest: {exc}") from exc


def _score_record_to_json(rec: ScoreRecord) -> dict[str, Any]:
    return {
        "psm_index": rec.psm_index,
        "psm_score": rec.psm_score,
        "select_index": rec.select_index,
        "select_score": rec.select_score,
        "psm_bag_gt": rec.psm_bag_gt,
        "prm_scores": list(rec.prm_scores),
        "ppg_boxes": [b.as_list() for b in rec.ppg_boxes],
    }


def _score_record_from_json(data: Any, path: str) -> ScoreRecord:
    try:
        return ScoreRecord(
            psm_index=int(data["psm_index"]),
            psm_score=float(data["psm_score"]),
            select_index=int(data["select_index"]),
            select_score=float(data["select_score"]),
            psm_bag_gt=float(data["psm_bag_gt"]),
            prm_scores=tuple(float(v) for v in data["prm_scores"]),
            ppg_boxes=tuple(_box_from_json(b, f"{path}.ppg_boxes") for b in data["ppg_boxes"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad score record at {path}: {exc}") from exc


def pseudo_label_to_json_dict(label: PseudoLabel) -> dict[str, Any]:
    return {
        "instance_id": label.instance_id,
        "class_id": label.class_id,
        "box_prm": label.box_prm.as_list(),
        "mask_prm": _rle_to_json(label.mask_prm),
        "aux_masks": [_rle_to_json(m) for m in label.aux_masks],
        "psm_box": label.psm_box.as_list(),
        "select_box": label.select_box.as_list(),
        "scores": _score_record_to_json(label.scores),
    }


def pseudo_label_from_json_dict(data: Any, path: str = "<memory>") -> PseudoLabel:
    try:
        mask = _rle_from_json(data["mask_prm"], f"{path}.mask_prm")
        if mask is None:
            raise ParseError(f"{path}: mask_prm must be present")
        aux = []
        for i, m in enumerate(data["aux_masks"]):
            rle = _rle_from_json(m, f"{path}.aux_masks[{i}]")
            if rle is None:
                raise ParseError(f"{path}.aux_masks[{i}]: null mask")
            aux.append(rle)
        return PseudoLabel(
            instance_id=int(data["instance_id"]),
            class_id=int(data["class_id"]),
            box_prm=_box_from_json(data["box_prm"], f"{path}.box_prm"),
            mask_prm=mask,
            aux_masks=tuple(aux),
            psm_box=_box_from_json(data["psm_box"], f"{path}.psm_box"),
            select_box=_box_from_json(data["select_box"], f"{path}.select_box"),
            scores=_score_record_from_json(data["scores"], f"{path}.scores"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad pseudo label: {exc}") from exc


def save_pseudo_labels(labels: list[PseudoLabel], path: str) -> None:
    _dump_json([pseudo_label_to_json_dict(l) for l in labels], path)


def load_pseudo_labels(path: str) -> list[PseudoLabel]:
    data = _load_json(path)
    if not isinstance(data, list):
        raise ParseError(f"{path}: expected a JSON array of labels")
    return [pseudo_label_from_json_dict(d, f"{path}[{i}]") for i, d in enumerate(data)]
