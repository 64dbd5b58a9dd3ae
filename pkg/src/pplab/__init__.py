"""Point-prompted pseudo-label engine.

Given point annotations and per-object bags of class-agnostic mask/box
proposals with precomputed features, select and refine one semantically
correct box+mask per object through two stages of multiple-instance
learning, with distance-based score penalties, positive/negative proposal
generation, and box mining.  Ships a synthetic ground-truth corpus
generator and the corpus-level evaluation metrics.
"""

from .data_model import (
    AnnotatedPoint,
    CorpusManifest,
    GroundTruthObject,
    PipelineConfig,
    Proposal,
    ProposalBag,
    PseudoLabel,
    Scene,
    load_manifest,
    load_pseudo_labels,
    load_scene,
    save_pseudo_labels,
    save_scene,
    validate_scene,
)
from .geometry import (
    Box,
    MaskRLE,
    Point2D,
    box_contains,
    box_iou,
    dice_coeff,
    mask_iou,
    min_bounding_rect,
    weighted_box_merge,
)
from .pipeline import (
    CorpusResult,
    TrainedHeads,
    run_corpus,
    run_scene,
    run_single_mil_baseline,
)
from .synth_eval import (
    EvalReport,
    SyntheticConfig,
    gap_metrics,
    generate_corpus,
    generate_scene,
    miou_box,
    rv_ratio,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedPoint",
    "Box",
    "CorpusManifest",
    "CorpusResult",
    "EvalReport",
    "GroundTruthObject",
    "MaskRLE",
    "PipelineConfig",
    "Point2D",
    "Proposal",
    "ProposalBag",
    "PseudoLabel",
    "Scene",
    "SyntheticConfig",
    "TrainedHeads",
    "box_contains",
    "box_iou",
    "dice_coeff",
    "gap_metrics",
    "generate_corpus",
    "generate_scene",
    "load_manifest",
    "load_pseudo_labels",
    "load_scene",
    "mask_iou",
    "min_bounding_rect",
    "miou_box",
    "run_corpus",
    "run_scene",
    "run_single_mil_baseline",
    "rv_ratio",
    "save_pseudo_labels",
    "save_scene",
    "validate_scene",
    "weighted_box_merge",
]
