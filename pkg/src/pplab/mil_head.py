"""Two-branch MIL scorer and its training losses.

One head owns a two-layer rectified trunk and two affine output branches.
The classification branch is softmaxed over classes per proposal, the
instance branch over proposals per class; the fused per-proposal score is
their product further damped by a per-proposal distance score.  Bag scores
sum fused scores over proposals and feed binary cross-entropy (stage one)
or a focal/negative-suppression pair (stage two).

All gradients run through the reverse-mode tape in :mod:`pplab.autodiff`;
``finite_diff_grads`` provides the independent numerical check.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NonFiniteGradient, NonFiniteLoss, ShapeMismatch

PROB_EPS = 1e-7

_PARAM_NAMES = ("w1", "b1", "w2", "b2", "w_cls", "b_cls", "w_ins", "b_ins")


@dataclass
class MilParams:
    """Learnable parameters of one MIL head."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_ins: np.ndarray
    b_ins: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_width(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[1]

    @classmethod
    def init(cls, feature_dim: int, hidden_width: int, num_classes: int,
             rng: np.random.Generator) -> "MilParams":
        """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""

        def layer(fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            return w, b

        w1, b1 = layer(feature_dim, hidden_width)
        w2, b2 = layer(hidden_width, hidden_width)
        w_cls, b_cls = layer(hidden_width, num_classes)
        w_ins, b_ins = layer(hidden_width, num_classes)
        return cls(w1, b1, w2, b2, w_cls, b_cls, w_ins, b_ins)

    def copy(self) -> "MilParams":
        return MilParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_NAMES}


@dataclass(frozen=True)
class ScoreTensor:
    """All per-proposal and per-bag scores for one bag."""

    cls_scores: np.ndarray   # (M, K), rows sum to 1
    ins_scores: np.ndarray   # (M, K), columns sum to 1
    dist_scores: np.ndarray  # (M,), in (0, 1]
    fused: np.ndarray        # (M, K), cls * ins * dist
    bag: np.ndarray          # (K,), column sums of fused


@dataclass(frozen=True)
class LossBreakdown:
    """Diagnostic record of every loss term for one evaluation."""

    selection: float
    positive: float
    negative: float
    refinement: float
    total: float
    gradients: dict[str, np.ndarray] | None = None


def make_breakdown(selection: float, positive: float, negative: float,
                   alpha: float, selection_weight: float,
                   gradients: dict[str, np.ndarray] | None = None) -> LossBreakdown:
    refinement = alpha * positive + (1.0 - alpha) * negative
    return LossBreakdown(
        selection=selection,
        positive=positive,
        negative=negative,
        refinement=refinement,
        total=selection_weight * selection + refinement,
        gradients=gradients,
    )


@dataclass(frozen=True)
class BagInstance:
    """One object's training view: stacked features, distance scores, label."""

    features: np.ndarray  # (M, D)
    dist: np.ndarray      # (M,)
    onehot: np.ndarray    # (K,)


# ---------------------------------------------------------------------------
# Graph builders (shared by value ops and training)
# ---------------------------------------------------------------------------


def param_vars(params: MilParams) -> dict[str, ad.Var]:
    return {name: ad.Var(arr) for name, arr in params.as_dict().items()}


def trunk_graph(pv: dict[str, ad.Var], x: ad.Var) -> ad.Var:
    h1 = ad.relu(ad.add(ad.matmul(x, pv["w1"]), pv["b1"]))
    return ad.relu(ad.add(ad.matmul(h1, pv["w2"]), pv["b2"]))


def score_graph(pv: dict[str, ad.Var], features: ad.Var, dist_col: ad.Var) -> dict[str, ad.Var]:
    """Forward graph for one bag; ``dist_col`` is the (M, 1) distance column."""
    h = trunk_graph(pv, features)
    z_cls = ad.add(ad.matmul(h, pv["w_cls"]), pv["b_cls"])
    z_ins = ad.add(ad.matmul(h, pv["w_ins"]), pv["b_ins"])
    s_cls = ad.softmax(z_cls, axis=1)
    s_ins = ad.softmax(z_ins, axis=0)
    fused = ad.mul(ad.mul(s_cls, s_ins), dist_col)
    bag = ad.sum_axis(fused, axis=0)
    return {"cls": s_cls, "ins": s_ins, "fused": fused, "bag": bag}


def class_score_graph(pv: dict[str, ad.Var], features: ad.Var) -> ad.Var:
    """Classification-branch-only scores (used for negative proposals)."""
    h = trunk_graph(pv, features)
    z = ad.add(ad.matmul(h, pv["w_cls"]), pv["b_cls"])
    return ad.softmax(z, axis=1)


def selection_loss_graph(bag: ad.Var, onehot: np.ndarray) -> ad.Var:
    """Per-object bag BCE: sum_k -(c log p + (1-c) log(1-p))."""
    p = ad.clamp(bag, PROB_EPS, 1.0 - PROB_EPS)
    c = ad.constant(onehot)
    one = ad.constant(np.ones_like(onehot))
    pos = ad.mul(c, ad.log(p))
    neg = ad.mul(ad.sub(one, c), ad.log(ad.sub(one, p)))
    return ad.neg(ad.sum_all(ad.add(pos, neg)))


def focal_loss_graph(p: ad.Var, onehot: np.ndarray, focal_gamma: float) -> ad.Var:
    """Binary focal loss summed over classes, focusing exponent ``focal_gamma``."""
    pc = ad.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    c = ad.constant(onehot)
    one = ad.constant(np.ones_like(onehot))
    q = ad.sub(one, pc)
    pos = ad.mul(c, ad.mul(ad.pow_const(q, focal_gamma), ad.neg(ad.log(pc))))
    neg = ad.mul(ad.sub(one, c), ad.mul(ad.pow_const(pc, focal_gamma), ad.neg(ad.log(q))))
    return ad.sum_all(ad.add(pos, neg))


def negative_loss_graph(cls_scores: ad.Var, beta: float) -> ad.Var:
    """-beta/|U| * sum over negatives and classes of s^2 log(1-s)."""
    n = cls_scores.value.shape[0]
    if n == 0:
        return ad.constant(0.0)
    s = ad.clamp(cls_scores, PROB_EPS, 1.0 - PROB_EPS)
    one = ad.constant(np.ones_like(cls_scores.value))
    term = ad.mul(ad.pow_const(s, 2.0), ad.log(ad.sub(one, s)))
    return ad.scale(ad.sum_all(term), -beta / n)


# ---------------------------------------------------------------------------
# Value-level operations
# ---------------------------------------------------------------------------


def _check_bag_shapes(params: MilParams, features: np.ndarray, dist: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != params.feature_dim:
        raise ShapeMismatch(
            f"features shape {features.shape} incompatible with feature_dim {params.feature_dim}"
        )
    if dist.shape != (features.shape[0],):
        raise ShapeMismatch(f"dist shape {dist.shape} != ({features.shape[0]},)")


def forward_scores(params: MilParams, features: np.ndarray, dist: np.ndarray) -> ScoreTensor:
    """Score one bag of ``M`` feature rows with per-proposal distance scores."""
    features = np.asarray(features, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    _check_bag_shapes(params, features, dist)
    pv = param_vars(params)
    g = score_graph(pv, ad.constant(features), ad.constant(dist[:, None]))
    return ScoreTensor(
        cls_scores=g["cls"].value,
        ins_scores=g["ins"].value,
        dist_scores=dist,
        fused=g["fused"].value,
        bag=g["bag"].value,
    )


def class_scores(params: MilParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.feature_dim:
        raise ShapeMismatch(
            f"features shape {features.shape} incompatible with feature_dim {params.feature_dim}"
        )
    pv = param_vars(params)
    return class_score_graph(pv, ad.constant(features)).value


def selection_loss(bag_scores: np.ndarray, onehot: np.ndarray) -> float:
    """Bag-level BCE for one object (callers average over objects)."""
    return float(selection_loss_graph(ad.constant(bag_scores), np.asarray(onehot, dtype=np.float64)).value)


def focal_loss(p: np.ndarray, onehot: np.ndarray, focal_gamma: float = 2.0) -> float:
    return float(
        focal_loss_graph(ad.constant(p), np.asarray(onehot, dtype=np.float64), focal_gamma).value
    )


def positive_bag_loss(refine_bags: Sequence[np.ndarray], select_weights: Sequence[float],
                      onehots: Sequence[np.ndarray], focal_gamma: float = 2.0) -> float:
    """Mean over objects of (stage-one bag weight) * focal(stage-two bag).

    The weights are plain floats: no gradient ever reaches the stage-one
    head through them.
    """
    n = len(refine_bags)
    if n == 0:
        return 0.0
    total = 0.0
    for bag, w, onehot in zip(refine_bags, select_weights, onehots):
        total += float(w) * focal_loss(bag, onehot, focal_gamma)
    return total / n


def negative_loss(neg_cls_scores: np.ndarray, beta: float) -> float:
    """Suppression loss over the negative set; 0 when the set is empty."""
    neg_cls_scores = np.asarray(neg_cls_scores, dtype=np.float64)
    if neg_cls_scores.size == 0:
        return 0.0
    return float(negative_loss_graph(ad.constant(neg_cls_scores), beta).value)


def refinement_loss(l_pos: float, l_neg: float, alpha: float = 0.25) -> float:
    """Affine blend alpha * positive + (1 - alpha) * negative."""
    return alpha * l_pos + (1.0 - alpha) * l_neg


# ---------------------------------------------------------------------------
# Gradients and training
# ---------------------------------------------------------------------------

LossBuilder = Callable[[dict[str, ad.Var]], ad.Var]


def backprop_grads(params: MilParams, builder: LossBuilder) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``builder`` and return (loss, exact parameter gradients)."""
    pv = param_vars(params)
    loss = builder(pv)
    ad.backward(loss)
    grads = {name: pv[name].grad for name in _PARAM_NAMES}
    for name, g in grads.items():
        if g is None:
            grads[name] = np.zeros_like(getattr(params, name))
        elif not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient of {name} contains NaN/Inf")
    return float(loss.value), grads


def finite_diff_grads(params: MilParams, value_fn: Callable[[MilParams], float],
                      step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradients of ``value_fn`` w.r.t. every parameter."""
    out: dict[str, np.ndarray] = {}
    work = params.copy()
    for name in _PARAM_NAMES:
        arr = getattr(work, name)
        grad = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = value_fn(work)
            flat[i] = orig - step
            lo = value_fn(work)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        out[name] = grad
    return out


def sgd_train(params: MilParams, builders: Sequence[LossBuilder], learning_rate: float,
              epochs: int) -> tuple[MilParams, list[float]]:
    """Plain SGD, one step per builder per epoch, in a fixed order.

    Returns the trained parameters and the per-epoch mean loss.  Raises
    ``NonFiniteLoss`` (with the epoch index) if any loss leaves float range.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if learning_rate <= 0.0:
        raise ConfigError(f"learning_rate must be positive, got {learning_rate}")
    params = params.copy()
    curve: list[float] = []
    for epoch in range(epochs):
        losses = []
        for builder in builders:
            val, grads = backprop_grads(params, builder)
            if not np.isfinite(val):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}")
            for name in _PARAM_NAMES:
                getattr(params, name)[...] -= learning_rate * grads[name]
            losses.append(val)
        curve.append(float(np.mean(losses)) if losses else 0.0)
    return params, curve
