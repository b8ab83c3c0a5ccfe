"""Box arithmetic and proposal canonicalization (confidence filter + NMS)."""

from __future__ import annotations

from typing import Iterable, Sequence

from .errors import ValidationError
from .structures import Box, RoiPrediction

DEFAULT_CONF_THRESH = 0.7
DEFAULT_IOU_THRESH = 0.5


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two valid boxes."""
    if a.area <= 0 or b.area <= 0:
        raise ValidationError("iou requires boxes with positive area")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def priority_key(roi: RoiPrediction):
    """Descending confidence, then lexicographically smaller box first."""
    return (-roi.confidence, roi.box.as_tuple())


def nms(
    rois: Iterable[RoiPrediction],
    iou_thresh: float = DEFAULT_IOU_THRESH,
    conf_thresh: float = DEFAULT_CONF_THRESH,
) -> list[RoiPrediction]:
    """Confidence filtering followed by greedy class-agnostic NMS.

    A candidate is suppressed when its IoU with an already kept box is
    strictly greater than ``iou_thresh``. Survivors come back in priority
    order (descending confidence, box coordinates as tie-break).
    """
    if not (0.0 < iou_thresh <= 1.0):
        raise ValidationError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    if not (0.0 <= conf_thresh < 1.0):
        raise ValidationError(f"conf_thresh must be in [0, 1), got {conf_thresh}")

    ordered = sorted((r for r in rois if r.confidence >= conf_thresh), key=priority_key)
    kept: list[RoiPrediction] = []
    for cand in ordered:
        if all(iou(cand.box, k.box) <= iou_thresh for k in kept):
            kept.append(cand)
    return kept


def pairwise_iou(a: Sequence[Box], b: Sequence[Box]) -> list[list[float]]:
    return [[iou(x, y) for y in b] for x in a]
