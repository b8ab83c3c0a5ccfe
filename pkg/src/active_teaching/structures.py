"""Core value types: boxes, RoI predictions and per-image prediction sets."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ValidationError

PROB_SUM_TOL = 1e-6


class Source(str, enum.Enum):
    TEACHER = "teacher"
    STUDENT = "student"


@dataclass(frozen=True, order=True)
class Box:
    """Axis-aligned box in pixel coordinates, (x1, y1) top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValidationError(f"degenerate box {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_seq(cls, values) -> "Box":
        if len(values) != 4:
            raise ValidationError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))


def validate_distribution(probs: np.ndarray, tol: float = PROB_SUM_TOL) -> None:
    if probs.ndim != 1 or probs.size == 0:
        raise ValidationError("class distribution must be a non-empty vector")
    if not np.all(np.isfinite(probs)):
        raise ValidationError("class distribution has non-finite entries")
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise ValidationError("class probabilities must lie in [0, 1]")
    total = float(probs.sum())
    if abs(total - 1.0) > tol:
        raise ValidationError(f"class probabilities sum to {total!r}, expected 1")


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RoiPrediction:
    """One proposal: box, confidence, class distribution and RoI-head feature."""

    box: Box
    confidence: float
    class_probs: np.ndarray
    feature: np.ndarray
    extra: dict[str, Any] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "class_probs", _frozen_array(self.class_probs))
        object.__setattr__(self, "feature", _frozen_array(self.feature))
        object.__setattr__(self, "confidence", float(self.confidence))
        if not (0.0 <= self.confidence <= 1.0):
            raise ValidationError(f"confidence {self.confidence!r} outside [0, 1]")
        validate_distribution(self.class_probs)
        if self.feature.ndim != 1 or not np.all(np.isfinite(self.feature)):
            raise ValidationError("feature must be a finite vector")

    @property
    def label(self) -> int:
        """Argmax class; the lowest index wins ties."""
        return int(np.argmax(self.class_probs))

    def same_as(self, other: "RoiPrediction") -> bool:
        return (
            self.box == other.box
            and self.confidence == other.confidence
            and np.array_equal(self.class_probs, other.class_probs)
            and np.array_equal(self.feature, other.feature)
        )


@dataclass(frozen=True, eq=False)
class ImagePrediction:
    image_id: str
    source: Source
    rois: tuple[RoiPrediction, ...] = ()
    extra: dict[str, Any] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.image_id:
            raise ValidationError("image_id must be non-empty")
        object.__setattr__(self, "source", Source(self.source))
        object.__setattr__(self, "rois", tuple(self.rois))

    def same_as(self, other: "ImagePrediction") -> bool:
        return (
            self.image_id == other.image_id
            and self.source == other.source
            and len(self.rois) == len(other.rois)
            and all(a.same_as(b) for a, b in zip(self.rois, other.rois))
        )
