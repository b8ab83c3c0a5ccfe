"""Active-teaching engine: RoI comparison, pseudo-label weighting and
uncertainty/diversity selection for semi-supervised object detection."""

from .config import EngineConfig
from .geometry import iou, nms
from .prototypes import (
    GtRoiFeature,
    PrototypeBank,
    cosine_similarity,
    diversity_score,
    ema_update,
    local_prototypes,
    score_and_update_divergent,
    update_from_divergent,
)
from .roicm import PartitionResult, Verdict, canonicalize, match_rois, partition_image
from .scoring import MatchedPair, kl_divergence, pseudo_label_weight, uncertainty
from .selection import CandidateScore, SelectionPlan, fuse_scores, plan_round
from .structures import Box, ImagePrediction, RoiPrediction, Source

__version__ = "0.1.0"

__all__ = [
    "Box", "CandidateScore", "EngineConfig", "GtRoiFeature", "ImagePrediction", "MatchedPair",
    "PartitionResult", "PrototypeBank", "RoiPrediction", "SelectionPlan", "Source", "Verdict",
    "canonicalize", "cosine_similarity", "diversity_score", "ema_update", "fuse_scores", "iou",
    "kl_divergence", "local_prototypes", "match_rois", "nms", "partition_image", "plan_round",
    "pseudo_label_weight", "score_and_update_divergent", "uncertainty", "update_from_divergent",
]
