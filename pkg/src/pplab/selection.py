"""Stage-one proposal selection: train the first MIL head and pick a box."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import mil_head
from .data_model import ProposalBag
from .errors import EmptyBag
from .geometry import Box
from .mil_head import BagInstance, MilParams


@dataclass(frozen=True)
class SelectionResult:
    box: Box
    index: int
    score: float


def scene_selection_builder(objects: Sequence[BagInstance]) -> mil_head.LossBuilder:
    """Mean bag BCE over one scene's objects, as a differentiable builder."""
    consts = [
        (ad.constant(o.features), ad.constant(o.dist[:, None]), o.onehot)
        for o in objects
    ]

    def builder(pv: dict[str, ad.Var]) -> ad.Var:
        terms = []
        for feats, dist_col, onehot in consts:
            g = mil_head.score_graph(pv, feats, dist_col)
            terms.append(mil_head.selection_loss_graph(g["bag"], onehot))
        return ad.scale(ad.add_many(terms), 1.0 / len(consts))

    return builder


def train_selection_head(scene_objects: Sequence[Sequence[BagInstance]], feature_dim: int,
                         hidden_width: int, num_classes: int, learning_rate: float,
                         epochs: int, rng: np.random.Generator) -> tuple[MilParams, list[float]]:
    """Train the stage-one head over per-scene batches; deterministic by seed."""
    params = MilParams.init(feature_dim, hidden_width, num_classes, rng)
    builders = [scene_selection_builder(objs) for objs in scene_objects if len(objs) > 0]
    if not builders:
        return params, []
    return mil_head.sgd_train(params, builders, learning_rate, epochs)


def argmax_proposal(params: MilParams, features: np.ndarray, dist: np.ndarray,
                    class_id: int) -> tuple[int, float]:
    """Index of the highest fused score in the label's class column.

    Exact ties resolve to the lowest index (argmax takes the first max).
    """
    if features.shape[0] == 0:
        raise EmptyBag("cannot select from an empty bag")
    st = mil_head.forward_scores(params, features, dist)
    col = st.fused[:, class_id]
    idx = int(np.argmax(col))
    return idx, float(col[idx])


def select_box(params: MilParams, bag: ProposalBag, features: np.ndarray,
               dist: np.ndarray, class_id: int) -> SelectionResult:
    idx, score = argmax_proposal(params, features, dist, class_id)
    return SelectionResult(box=bag.proposals[idx].box, index=idx, score=score)
