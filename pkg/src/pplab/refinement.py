"""Stage-two refinement: second MIL head, box mining, and mask mapping.

The refinement head trains on the expanded positive bags against the
sampled negative set; its focal bag loss is weighted per object by the
(frozen) stage-one bag score of the labelled class.  After selection, box
mining merges the chosen box with larger high-scoring proposals, and the
final box is mapped back to the best-matching original mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import mil_head
from .data_model import ProposalBag
from .errors import EmptyBag, NoMaskAvailable
from .geometry import Box, MaskRLE, box_contains, box_iou, mask_iou, weighted_box_merge
from .mil_head import BagInstance, MilParams


@dataclass(frozen=True)
class SceneRefinementBatch:
    """Everything the stage-two loss needs for one scene.

    ``select_weights`` are the stage-one bag scores of the labelled class,
    taken as plain floats so no gradient can flow back into stage one.
    """

    objects: tuple[BagInstance, ...]
    select_weights: tuple[float, ...]
    negative_features: np.ndarray  # (n, D); may be empty

    @property
    def beta(self) -> float:
        """Scene-mean stage-one bag score, weighting the negative loss."""
        if not self.select_weights:
            return 0.0
        return float(np.mean(self.select_weights))


def scene_refinement_builder(batch: SceneRefinementBatch, alpha: float,
                             focal_gamma: float) -> mil_head.LossBuilder:
    consts = [
        (ad.constant(o.features), ad.constant(o.dist[:, None]), o.onehot, w)
        for o, w in zip(batch.objects, batch.select_weights)
    ]
    neg_feats = ad.constant(batch.negative_features) if batch.negative_features.size else None
    beta = batch.beta

    def builder(pv: dict[str, ad.Var]) -> ad.Var:
        pos_terms = []
        for feats, dist_col, onehot, weight in consts:
            g = mil_head.score_graph(pv, feats, dist_col)
            fl = mil_head.focal_loss_graph(g["bag"], onehot, focal_gamma)
            pos_terms.append(ad.scale(fl, weight))
        l_pos = ad.scale(ad.add_many(pos_terms), 1.0 / max(1, len(consts)))
        if neg_feats is not None:
            cls = mil_head.class_score_graph(pv, neg_feats)
            l_neg = mil_head.negative_loss_graph(cls, beta)
        else:
            l_neg = ad.constant(0.0)
        return ad.add(ad.scale(l_pos, alpha), ad.scale(l_neg, 1.0 - alpha))

    return builder


def train_refinement_head(batches: Sequence[SceneRefinementBatch], feature_dim: int,
                          hidden_width: int, num_classes: int, alpha: float,
                          focal_gamma: float, learning_rate: float, epochs: int,
                          rng: np.random.Generator) -> tuple[MilParams, list[float]]:
    params = MilParams.init(feature_dim, hidden_width, num_classes, rng)
    builders = [
        scene_refinement_builder(b, alpha, focal_gamma) for b in batches if b.objects
    ]
    if not builders:
        return params, []
    return mil_head.sgd_train(params, builders, learning_rate, epochs)


def mine_box(boxes: Sequence[Box], scores: Sequence[float], box_select: Box, k: int,
             t_min1: float, t_min2: float) -> Box:
    """Merge ``box_select`` with larger high-scoring proposals.

    Walks the top-k proposals in descending score order.  A larger proposal
    overlapping above ``t_min1`` merges in with weight 1 against the IoU and
    raises the bar; failing that, while no such merge has happened, a larger
    proposal fully containing the selection and overlapping above ``t_min2``
    merges with the transposed weights and raises that bar instead.  When no
    branch ever fires the selection is returned unchanged.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[:k]
    box_prm = box_select
    count = 0
    for j in order:
        proposal = boxes[j]
        if proposal.area <= box_select.area:
            continue
        iou = box_iou(proposal, box_select)
        if iou > t_min1:
            box_prm = weighted_box_merge(proposal, box_select, 1.0, iou)
            t_min1 = iou
            count += 1
        elif count == 0 and box_contains(proposal, box_select) and iou > t_min2:
            box_prm = weighted_box_merge(proposal, box_select, iou, 1.0)
            t_min2 = iou
    return box_prm


def map_mask(box_prm: Box, bag: ProposalBag) -> tuple[MaskRLE, int]:
    """Mask of the original proposal whose box best overlaps ``box_prm``.

    Ties resolve to the lowest proposal index; proposals without masks are
    skipped.  Raises ``NoMaskAvailable`` when the bag has no masks at all.
    """
    best_idx = -1
    best_iou = -1.0
    for idx, p in enumerate(bag.proposals):
        if p.mask is None:
            continue
        iou = box_iou(p.box, box_prm)
        if iou > best_iou:
            best_iou = iou
            best_idx = idx
    if best_idx < 0:
        raise NoMaskAvailable("no proposal in the bag carries a mask")
    return bag.proposals[best_idx].mask, best_idx


def pick_aux_masks(bag: ProposalBag, scores: Sequence[float],
                   mask_prm: MaskRLE) -> list[MaskRLE]:
    """Highest-, median-, and lowest-scored masks other than ``mask_prm``.

    Median is the lower median for even candidate counts; fewer than three
    distinct candidates yield a shorter list, zero candidates an empty one.
    """
    candidates = [
        (idx, float(scores[idx]), p.mask)
        for idx, p in enumerate(bag.proposals)
        if p.mask is not None and mask_iou(p.mask, mask_prm) < 1.0
    ]
    if not candidates:
        return []
    candidates.sort(key=lambda t: (-t[1], t[0]))
    n = len(candidates)
    median_pos = n - 1 - (n - 1) // 2
    picked_indices: list[int] = []
    out: list[MaskRLE] = []
    for pos in (0, median_pos, n - 1):
        idx, _, mask = candidates[pos]
        if idx not in picked_indices:
            picked_indices.append(idx)
            out.append(mask)
    return out


def select_from_bag(params: MilParams, boxes: Sequence[Box], features: np.ndarray,
                    dist: np.ndarray, class_id: int) -> tuple[Box, int, float]:
    """Argmax of the stage-two fused score over the expanded bag."""
    if features.shape[0] == 0:
        raise EmptyBag("cannot select from an empty bag")
    st = mil_head.forward_scores(params, features, dist)
    col = st.fused[:, class_id]
    idx = int(np.argmax(col))
    return boxes[idx], idx, float(col[idx])
