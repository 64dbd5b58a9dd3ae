"""End-to-end orchestration: selection, augmentation, refinement, labeling.

Training is phased: the stage-one head trains to completion over the whole
corpus, its outputs (selected boxes and frozen bag scores) seed positive
expansion and negative sampling, then the stage-two head trains.  Labeling
afterwards is pure per scene, so it can fan out across processes; results
merge in manifest order regardless of worker count.

The single-MIL baseline is the same corpus run with every stage beyond the
first disabled (no distance penalty, no augmentation, no second head, no
box mining, no auxiliary masks).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import mil_head, point_distance, proposal_gen, refinement, selection
from .data_model import (
    PipelineConfig,
    ProposalBag,
    PseudoLabel,
    Scene,
    ScoreRecord,
    load_manifest,
    load_scene,
)
from .errors import PplabError
from .features import provider_from_ground_truth
from .geometry import Box
from .mil_head import BagInstance, LossBreakdown, MilParams, make_breakdown
from .synth_eval import EvalReport, evaluate_run


@dataclass(frozen=True)
class PreparedObject:
    instance_id: int
    class_id: int
    onehot: np.ndarray
    boxes: tuple[Box, ...]
    features: np.ndarray  # (M, D)
    dist: np.ndarray      # (M,)
    bag: ProposalBag


@dataclass(frozen=True)
class PreparedScene:
    name: str
    scene: Scene
    objects: tuple[PreparedObject, ...]


@dataclass(frozen=True)
class StageOneResult:
    index: int
    box: Box
    score: float
    bag_gt: float
    dist_at_index: float


@dataclass(frozen=True)
class ScenePlan:
    """Everything labeling needs for one scene once heads are trained."""

    prepared: PreparedScene
    stage1: tuple[StageOneResult, ...]
    ppg_boxes: tuple[tuple[Box, ...], ...]
    ppg_features: tuple[np.ndarray, ...]
    ppg_dist: tuple[np.ndarray, ...]
    negatives: proposal_gen.NegativeSet
    negative_features: np.ndarray


@dataclass(frozen=True)
class TrainedHeads:
    selection: MilParams
    refinement: MilParams | None


@dataclass
class CorpusResult:
    names: list[str]
    labels: list[list[PseudoLabel]]
    diagnostics: list[str]
    report: EvalReport
    selection_curve: list[float]
    refinement_curve: list[float]
    losses: LossBreakdown
    heads: TrainedHeads
    config: PipelineConfig


BASELINE_OVERRIDES = dict(pdg=False, pnpg=False, prm=False, bms=False, mps=False)


def baseline_config(config: PipelineConfig) -> PipelineConfig:
    return replace(config, **BASELINE_OVERRIDES)


def prepare_scene(scene: Scene, config: PipelineConfig, name: str = "<scene>") -> PreparedScene:
    objects = []
    for i, (anno, bag) in enumerate(zip(scene.annotations, scene.bags)):
        boxes = tuple(p.box for p in bag.proposals)
        features = np.array([p.feature for p in bag.proposals], dtype=np.float64)
        if config.pdg:
            dist = point_distance.box_distance_scores(
                boxes, scene.annotations, i, config.d, config.pdg_variant,
                config.pdg_literal_scale,
            )
        else:
            dist = np.ones(len(boxes), dtype=np.float64)
        onehot = np.zeros(scene.num_classes, dtype=np.float64)
        onehot[anno.class_id] = 1.0
        objects.append(
            PreparedObject(
                instance_id=anno.instance_id,
                class_id=anno.class_id,
                onehot=onehot,
                boxes=boxes,
                features=features,
                dist=dist,
                bag=bag,
            )
        )
    return PreparedScene(name=name, scene=scene, objects=tuple(objects))


def _stage1_results(params: MilParams, prepared: PreparedScene) -> tuple[StageOneResult, ...]:
    out = []
    for obj in prepared.objects:
        st = mil_head.forward_scores(params, obj.features, obj.dist)
        col = st.fused[:, obj.class_id]
        idx = int(np.argmax(col))
        out.append(
            StageOneResult(
                index=idx,
                box=obj.boxes[idx],
                score=float(col[idx]),
                bag_gt=float(st.bag[obj.class_id]),
                dist_at_index=float(obj.dist[idx]),
            )
        )
    return tuple(out)


def build_scene_plan(prepared: PreparedScene, stage1: tuple[StageOneResult, ...],
                     config: PipelineConfig, scene_index: int) -> ScenePlan:
    """Expand positives and sample negatives for one scene (stage two inputs)."""
    scene = prepared.scene
    n_obj = len(prepared.objects)
    empty = np.zeros((0, scene.feature_dim), dtype=np.float64)
    if not (config.pnpg and config.prm and n_obj > 0):
        return ScenePlan(
            prepared=prepared,
            stage1=stage1,
            ppg_boxes=tuple(() for _ in range(n_obj)),
            ppg_features=tuple(empty for _ in range(n_obj)),
            ppg_dist=tuple(np.zeros(0, dtype=np.float64) for _ in range(n_obj)),
            negatives=proposal_gen.NegativeSet((), ()),
            negative_features=empty,
        )

    provider = provider_from_ground_truth(scene)
    ppg_boxes = []
    ppg_features = []
    ppg_dist = []
    for i, (obj, st1) in enumerate(zip(prepared.objects, stage1)):
        boxes = proposal_gen.expand_positive_boxes(
            st1.box, st1.dist_at_index, config.v, scene.width, scene.height,
            count=config.ppg_count,
        )
        feats = (
            np.stack([provider.features_for_box(b) for b in boxes])
            if boxes
            else empty
        )
        if config.pdg and boxes:
            dist = point_distance.box_distance_scores(
                boxes, scene.annotations, i, config.d, config.pdg_variant,
                config.pdg_literal_scale,
            )
        else:
            dist = np.ones(len(boxes), dtype=np.float64)
        ppg_boxes.append(tuple(boxes))
        ppg_features.append(feats)
        ppg_dist.append(dist)

    positive_boxes = [
        b
        for obj, extra in zip(prepared.objects, ppg_boxes)
        for b in list(obj.boxes) + list(extra)
    ]
    rng = np.random.default_rng(config.seed ^ scene_index)
    negatives = proposal_gen.build_negative_set(
        scene.width, scene.height, positive_boxes,
        [st1.box for st1 in stage1],
        config.t_neg1, config.t_neg2, config.neg_background, config.neg_part, rng,
    )
    neg_features = (
        np.stack([provider.features_for_box(b) for b in negatives.proposals])
        if len(negatives)
        else empty
    )
    return ScenePlan(
        prepared=prepared,
        stage1=stage1,
        ppg_boxes=tuple(ppg_boxes),
        ppg_features=tuple(ppg_features),
        ppg_dist=tuple(ppg_dist),
        negatives=negatives,
        negative_features=neg_features,
    )


def _augmented_object(plan: ScenePlan, i: int) -> tuple[tuple[Box, ...], np.ndarray, np.ndarray]:
    obj = plan.prepared.objects[i]
    boxes = obj.boxes + plan.ppg_boxes[i]
    feats = (
        np.vstack([obj.features, plan.ppg_features[i]])
        if plan.ppg_features[i].size
        else obj.features
    )
    dist = np.concatenate([obj.dist, plan.ppg_dist[i]])
    return boxes, feats, dist


def refinement_batch(plan: ScenePlan) -> refinement.SceneRefinementBatch:
    objects = []
    for i in range(len(plan.prepared.objects)):
        _, feats, dist = _augmented_object(plan, i)
        objects.append(
            BagInstance(features=feats, dist=dist, onehot=plan.prepared.objects[i].onehot)
        )
    return refinement.SceneRefinementBatch(
        objects=tuple(objects),
        select_weights=tuple(st1.bag_gt for st1 in plan.stage1),
        negative_features=plan.negative_features,
    )


def label_scene_plan(plan: ScenePlan, config: PipelineConfig,
                     heads: TrainedHeads) -> tuple[list[PseudoLabel], list[str]]:
    """Pure per-scene labeling; failures become diagnostics, never aborts."""
    labels: list[PseudoLabel] = []
    diagnostics: list[str] = []
    for i, (obj, st1) in enumerate(zip(plan.prepared.objects, plan.stage1)):
        try:
            if config.prm and heads.refinement is not None:
                boxes_plus, feats_plus, dist_plus = _augmented_object(plan, i)
                st = mil_head.forward_scores(heads.refinement, feats_plus, dist_plus)
                col = st.fused[:, obj.class_id]
            else:
                boxes_plus = obj.boxes
                st = mil_head.forward_scores(heads.selection, obj.features, obj.dist)
                col = st.fused[:, obj.class_id]
            select_index = int(np.argmax(col))
            box_select = boxes_plus[select_index]
            if config.bms:
                # Mining pools the original proposals only: expanded
                # near-copies of the selection would otherwise win the
                # overlap branch and block the containment rescue.
                m = len(obj.bag.proposals)
                box_prm = refinement.mine_box(
                    obj.boxes, col[:m], box_select, config.k, config.t_min1, config.t_min2
                )
            else:
                box_prm = box_select
            mask_prm, _ = refinement.map_mask(box_prm, obj.bag)
            if config.mps:
                aux = refinement.pick_aux_masks(
                    obj.bag, col[: len(obj.bag.proposals)], mask_prm
                )
            else:
                aux = []
            labels.append(
                PseudoLabel(
                    instance_id=obj.instance_id,
                    class_id=obj.class_id,
                    box_prm=box_prm,
                    mask_prm=mask_prm,
                    aux_masks=tuple(aux),
                    psm_box=st1.box,
                    select_box=box_select,
                    scores=ScoreRecord(
                        psm_index=st1.index,
                        psm_score=st1.score,
                        select_index=select_index,
                        select_score=float(col[select_index]),
                        psm_bag_gt=st1.bag_gt,
                        prm_scores=tuple(float(v) for v in col),
                        ppg_boxes=plan.ppg_boxes[i],
                    ),
                )
            )
        except PplabError as exc:
            diagnostics.append(
                f"{plan.prepared.name}: object {obj.instance_id}: {type(exc).__name__}: {exc}"
            )
    return labels, diagnostics


def _label_payload(args) -> tuple[list[PseudoLabel], list[str]]:
    plan, config, heads = args
    return label_scene_plan(plan, config, heads)


def _final_losses(plans: Sequence[ScenePlan], heads: TrainedHeads,
                  config: PipelineConfig) -> LossBreakdown:
    sel_losses = []
    pos_losses = []
    neg_losses = []
    for plan in plans:
        if not plan.prepared.objects:
            continue
        per_obj = []
        for obj in plan.prepared.objects:
            st = mil_head.forward_scores(heads.selection, obj.features, obj.dist)
            per_obj.append(mil_head.selection_loss(st.bag, obj.onehot))
        sel_losses.append(float(np.mean(per_obj)))
        if config.prm and heads.refinement is not None:
            batch = refinement_batch(plan)
            bags = []
            for inst in batch.objects:
                st = mil_head.forward_scores(heads.refinement, inst.features, inst.dist)
                bags.append(st.bag)
            pos_losses.append(
                mil_head.positive_bag_loss(
                    bags, batch.select_weights,
                    [inst.onehot for inst in batch.objects], config.focal_gamma,
                )
            )
            if batch.negative_features.size:
                cls = mil_head.class_scores(heads.refinement, batch.negative_features)
                neg_losses.append(mil_head.negative_loss(cls, batch.beta))
            else:
                neg_losses.append(0.0)
    sel = float(np.mean(sel_losses)) if sel_losses else 0.0
    pos = float(np.mean(pos_losses)) if pos_losses else 0.0
    neg = float(np.mean(neg_losses)) if neg_losses else 0.0
    return make_breakdown(sel, pos, neg, config.alpha, config.lambda_)


def run_prepared_corpus(names: Sequence[str], scenes: Sequence[Scene],
                        config: PipelineConfig, jobs: int = 1) -> CorpusResult:
    config.validate()
    prepared = [prepare_scene(s, config, n) for n, s in zip(names, scenes)]

    seed_seq = np.random.SeedSequence(config.seed)
    sel_ss, ref_ss = seed_seq.spawn(2)
    feature_dim = scenes[0].feature_dim if scenes else 1
    num_classes = scenes[0].num_classes if scenes else 1

    sel_params, sel_curve = selection.train_selection_head(
        [p.objects for p in prepared], feature_dim, config.hidden_width, num_classes,
        config.learning_rate, config.epochs, np.random.default_rng(sel_ss),
    )
    stage1 = [_stage1_results(sel_params, p) for p in prepared]
    plans = [
        build_scene_plan(p, s1, config, idx)
        for idx, (p, s1) in enumerate(zip(prepared, stage1))
    ]

    ref_params = None
    ref_curve: list[float] = []
    if config.prm:
        batches = [refinement_batch(plan) for plan in plans]
        ref_params, ref_curve = refinement.train_refinement_head(
            batches, feature_dim, config.hidden_width, num_classes, config.alpha,
            config.focal_gamma, config.learning_rate, config.epochs,
            np.random.default_rng(ref_ss),
        )
    heads = TrainedHeads(selection=sel_params, refinement=ref_params)

    payloads = [(plan, config, heads) for plan in plans]
    if jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_label_payload, payloads))
    else:
        results = [_label_payload(p) for p in payloads]

    labels = [r[0] for r in results]
    diagnostics = [d for r in results for d in r[1]]
    report = evaluate_run(scenes, names, labels)
    losses = _final_losses(plans, heads, config)
    return CorpusResult(
        names=list(names),
        labels=labels,
        diagnostics=diagnostics,
        report=report,
        selection_curve=sel_curve,
        refinement_curve=ref_curve,
        losses=losses,
        heads=heads,
        config=config,
    )


def run_corpus(corpus_dir: str, config: PipelineConfig, jobs: int = 1) -> CorpusResult:
    manifest = load_manifest(corpus_dir)
    scenes = [load_scene(os.path.join(corpus_dir, name)) for name in manifest.scenes]
    return run_prepared_corpus(list(manifest.scenes), scenes, config, jobs=jobs)


def run_single_mil_baseline(corpus_dir: str, config: PipelineConfig,
                            jobs: int = 1) -> CorpusResult:
    """Stage-one-only labeling with the distance penalty forced off."""
    return run_corpus(corpus_dir, baseline_config(config), jobs=jobs)


def run_scene(scene: Scene, config: PipelineConfig, heads: TrainedHeads,
              name: str = "<scene>", scene_index: int = 0
              ) -> tuple[list[PseudoLabel], list[str]]:
    """Label one scene with already-trained heads."""
    prepared = prepare_scene(scene, config, name)
    stage1 = _stage1_results(heads.selection, prepared)
    plan = build_scene_plan(prepared, stage1, config, scene_index)
    return label_scene_plan(plan, config, heads)
