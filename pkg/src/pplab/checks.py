"""Self-verification: analytic gradients against central finite differences.

Builds small random head instances (D=8, H=16, K=3, M=5) for each of the
four losses and compares the tape gradients with two-sided differences at
step 1e-5.  Relative error uses a small absolute floor so exactly-zero
gradients (dead rectifier units) do not divide by noise.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import mil_head
from .mil_head import MilParams

GRADCHECK_DIMS = dict(feature_dim=8, hidden_width=16, num_classes=3, bag_size=5)
GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
_REL_FLOOR = 1e-3

LOSS_NAMES = ("selection", "positive", "negative", "refinement")


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _random_bag(rng: np.random.Generator, m: int, d: int, k: int):
    feats = rng.normal(0.0, 1.0, size=(m, d))
    dist = rng.uniform(0.5, 1.0, size=m)
    onehot = np.zeros(k)
    onehot[rng.integers(k)] = 1.0
    return feats, dist, onehot


def _builder_for(loss_name: str, rng: np.random.Generator) -> mil_head.LossBuilder:
    d = GRADCHECK_DIMS["feature_dim"]
    k = GRADCHECK_DIMS["num_classes"]
    m = GRADCHECK_DIMS["bag_size"]
    if loss_name == "selection":
        feats, dist, onehot = _random_bag(rng, m, d, k)
        f_c, d_c = ad.constant(feats), ad.constant(dist[:, None])

        def builder(pv):
            g = mil_head.score_graph(pv, f_c, d_c)
            return mil_head.selection_loss_graph(g["bag"], onehot)

        return builder

    if loss_name == "positive":
        bags = [_random_bag(rng, m, d, k) for _ in range(2)]
        weights = rng.uniform(0.2, 1.0, size=2)
        consts = [(ad.constant(f), ad.constant(dist[:, None]), onehot) for f, dist, onehot in bags]

        def builder(pv):
            terms = []
            for (f_c, d_c, onehot), w in zip(consts, weights):
                g = mil_head.score_graph(pv, f_c, d_c)
                terms.append(ad.scale(mil_head.focal_loss_graph(g["bag"], onehot, 2.0), w))
            return ad.scale(ad.add_many(terms), 1.0 / len(consts))

        return builder

    if loss_name == "negative":
        neg = rng.normal(0.0, 1.0, size=(6, d))
        beta = float(rng.uniform(0.2, 1.0))
        n_c = ad.constant(neg)

        def builder(pv):
            cls = mil_head.class_score_graph(pv, n_c)
            return mil_head.negative_loss_graph(cls, beta)

        return builder

    if loss_name == "refinement":
        pos_builder = _builder_for("positive", rng)
        neg_builder = _builder_for("negative", rng)
        alpha = 0.25

        def builder(pv):
            return ad.add(
                ad.scale(pos_builder(pv), alpha), ad.scale(neg_builder(pv), 1.0 - alpha)
            )

        return builder

    raise ValueError(f"unknown loss {loss_name!r}")


def run_gradient_check(seed: int = 0, instances: int = 10, step: float = GRADCHECK_STEP,
                       tolerance: float = GRADCHECK_TOLERANCE,
                       inject_fault: bool = False) -> tuple[bool, dict[str, float]]:
    """Max relative gradient error per loss over ``instances`` random cases."""
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for loss_name in LOSS_NAMES:
        worst = 0.0
        for _ in range(instances):
            params = MilParams.init(
                GRADCHECK_DIMS["feature_dim"], GRADCHECK_DIMS["hidden_width"],
                GRADCHECK_DIMS["num_classes"], rng,
            )
            builder = _builder_for(loss_name, rng)
            _, analytic = mil_head.backprop_grads(params, builder)
            if inject_fault:
                analytic["w1"] = analytic["w1"].copy()
                analytic["w1"][0, 0] += 1e-3

            def value_fn(p: MilParams) -> float:
                return float(builder(mil_head.param_vars(p)).value)

            numeric = mil_head.finite_diff_grads(params, value_fn, step=step)
            for name in analytic:
                worst = max(worst, _rel_error(analytic[name], numeric[name]))
        errors[loss_name] = worst
    passed = all(err <= tolerance for err in errors.values())
    return passed, errors
