"""RoI comparison: teacher/student box matching and the per-image verdict."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .config import EngineConfig
from .errors import ValidationError
from .geometry import iou, nms
from .scoring import MatchedPair, kl_divergence, pseudo_label_weight, uncertainty
from .structures import Box, ImagePrediction, RoiPrediction, Source


class Verdict(str, enum.Enum):
    CONSISTENT = "consistent"
    DIVERGENT = "divergent"
    UNSCORABLE = "unscorable"


@dataclass(frozen=True)
class PseudoLabel:
    box: Box
    class_index: int
    confidence: float


@dataclass(frozen=True)
class PartitionResult:
    image_id: str
    verdict: Verdict
    d_kl: float | None = None
    weight: float | None = None
    s_unc: float | None = None
    pseudo_labels: tuple[PseudoLabel, ...] | None = None
    # canonical teacher RoIs the scores were computed on
    rois: tuple[RoiPrediction, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        v = Verdict(self.verdict)
        object.__setattr__(self, "verdict", v)
        has_consis = (self.d_kl, self.weight, self.pseudo_labels)
        if v is Verdict.CONSISTENT:
            ok = all(x is not None for x in has_consis) and self.s_unc is None
        elif v is Verdict.DIVERGENT:
            ok = self.s_unc is not None and all(x is None for x in has_consis)
        else:
            ok = self.s_unc is None and all(x is None for x in has_consis)
        if not ok:
            raise ValidationError(f"{self.image_id}: fields inconsistent with verdict {v.value}")


def match_rois(
    teacher: ImagePrediction,
    student: ImagePrediction,
    iou_match: float = 0.5,
) -> tuple[list[MatchedPair], list[RoiPrediction], list[RoiPrediction]]:
    """Greedy one-to-one matching in descending IoU order.

    Only pairs with IoU >= ``iou_match`` are eligible. Equal IoUs are broken
    by teacher box, then student box, then list position, so the result does
    not depend on hash order or platform.
    """
    if teacher.image_id != student.image_id:
        raise ValidationError(
            f"cannot match predictions of {teacher.image_id!r} and {student.image_id!r}"
        )
    if not 0.0 < iou_match <= 1.0:
        raise ValidationError(f"iou_match must be in (0, 1], got {iou_match}")

    t_rois, s_rois = teacher.rois, student.rois
    candidates = []
    for i, t in enumerate(t_rois):
        for j, s in enumerate(s_rois):
            v = iou(t.box, s.box)
            if v >= iou_match:
                candidates.append((-v, t.box.as_tuple(), s.box.as_tuple(), i, j, v))
    candidates.sort()

    used_t: set[int] = set()
    used_s: set[int] = set()
    pairs = []
    for *_, i, j, v in candidates:
        if i in used_t or j in used_s:
            continue
        used_t.add(i)
        used_s.add(j)
        pairs.append(MatchedPair(t_rois[i], s_rois[j], v))
    unmatched_t = [r for i, r in enumerate(t_rois) if i not in used_t]
    unmatched_s = [r for j, r in enumerate(s_rois) if j not in used_s]
    return pairs, unmatched_t, unmatched_s


def canonicalize(
    teacher: ImagePrediction, student: ImagePrediction, cfg: EngineConfig
) -> tuple[ImagePrediction, ImagePrediction]:
    """NMS + confidence filter on the teacher; NMS only on the student.

    The confidence threshold is a property of the teacher's proposals; a
    low-confidence student box still counts as evidence for agreement.
    """
    t = ImagePrediction(
        teacher.image_id, Source.TEACHER, tuple(nms(teacher.rois, cfg.iou_nms, cfg.conf_thresh))
    )
    s = ImagePrediction(student.image_id, Source.STUDENT, tuple(nms(student.rois, cfg.iou_nms, 0.0)))
    return t, s


def partition_image(
    teacher: ImagePrediction, student: ImagePrediction, cfg: EngineConfig | None = None
) -> PartitionResult:
    """Route one image to the consistent, divergent or unscorable set.

    ``teacher`` must already be canonicalized (see :func:`canonicalize`).
    Consistent requires every teacher RoI to be matched with a student RoI of
    the same argmax class; unmatched student RoIs are ignored.
    """
    cfg = cfg or EngineConfig()
    image_id = teacher.image_id
    if not teacher.rois:
        if teacher.image_id != student.image_id:
            raise ValidationError("teacher/student image_id mismatch")
        return PartitionResult(image_id, Verdict.UNSCORABLE)

    pairs, unmatched_t, _ = match_rois(teacher, student, cfg.iou_match)
    agree = not unmatched_t and all(p.teacher_roi.label == p.student_roi.label for p in pairs)
    if agree:
        d_kl = max(0.0, kl_divergence(pairs, cfg.epsilon, literal=cfg.literal_kl))
        labels = tuple(PseudoLabel(r.box, r.label, r.confidence) for r in teacher.rois)
        return PartitionResult(
            image_id,
            Verdict.CONSISTENT,
            d_kl=d_kl,
            weight=pseudo_label_weight(d_kl),
            pseudo_labels=labels,
            rois=teacher.rois,
        )
    return PartitionResult(
        image_id,
        Verdict.DIVERGENT,
        s_unc=uncertainty(teacher.rois, cfg.epsilon),
        rois=teacher.rois,
    )


def partition_all(
    predictions: dict[str, tuple[ImagePrediction, ImagePrediction]],
    cfg: EngineConfig,
) -> list[PartitionResult]:
    """Canonicalize and partition every image, in sorted image_id order."""
    results = []
    for image_id in sorted(predictions):
        t, s = canonicalize(*predictions[image_id], cfg)
        results.append(partition_image(t, s, cfg))
    return results
