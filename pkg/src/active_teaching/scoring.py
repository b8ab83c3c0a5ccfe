"""Teacher/student divergence, pseudo-label weight and entropy uncertainty."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NoProposalsError, ValidationError
from .structures import RoiPrediction

DEFAULT_EPSILON = 1e-8


@dataclass(frozen=True)
class MatchedPair:
    teacher_roi: RoiPrediction
    student_roi: RoiPrediction
    iou: float


def _check_eps(epsilon: float) -> None:
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")


def _pair_arrays(pairs: Sequence[MatchedPair]) -> tuple[np.ndarray, np.ndarray]:
    p_t = np.stack([p.teacher_roi.class_probs for p in pairs])
    p_s = np.stack([p.student_roi.class_probs for p in pairs])
    if p_t.shape != p_s.shape:
        raise ValidationError("teacher and student class counts differ")
    return p_t, p_s


def kl_divergence(
    pairs: Sequence[MatchedPair],
    epsilon: float = DEFAULT_EPSILON,
    literal: bool = False,
) -> float:
    """Mean over matched boxes of KL(teacher || student), in nats.

    Both distributions are floored at ``epsilon`` inside the logarithm so a
    one-hot student cannot blow the divergence up. ``literal=True`` swaps the
    log-ratio for a ratio of logarithms, p_t * ln(p_t) / ln(p_s); that form is
    not a divergence and exists only for side-by-side comparison.
    """
    _check_eps(epsilon)
    if len(pairs) == 0:
        raise NoProposalsError("no matched proposals")
    p_t, p_s = _pair_arrays(pairs)
    if literal:
        hi = 1.0 - epsilon
        lt = np.log(np.clip(p_t, epsilon, hi))
        ls = np.log(np.clip(p_s, epsilon, hi))
        per_box = np.sum(p_t * lt / ls, axis=1)
    else:
        ratio = np.log(np.maximum(p_t, epsilon)) - np.log(np.maximum(p_s, epsilon))
        per_box = np.sum(p_t * ratio, axis=1)
    return float(np.mean(per_box))


def pseudo_label_weight(d_kl: float) -> float:
    """exp(-d_kl): 1 for perfect agreement, decaying with divergence."""
    if not d_kl >= 0:
        raise ValidationError(f"divergence must be non-negative, got {d_kl}")
    return math.exp(-d_kl)


def uncertainty(teacher_rois: Sequence[RoiPrediction], epsilon: float = DEFAULT_EPSILON) -> float:
    """Mean per-box Shannon entropy of the teacher class distributions."""
    _check_eps(epsilon)
    if len(teacher_rois) == 0:
        raise NoProposalsError("no proposals")
    p_t = np.stack([r.class_probs for r in teacher_rois])
    per_box = -np.sum(p_t * np.log(np.maximum(p_t, epsilon)), axis=1)
    return float(np.mean(per_box))
