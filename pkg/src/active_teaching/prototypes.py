"""Global class-prototype bank and prototype-based diversity scoring."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ColdBankError, NoProposalsError, UndefinedSimilarityError, ValidationError
from .structures import RoiPrediction

DEFAULT_ALPHA = 0.99
DEFAULT_SIM_THRESHOLD = 0.7


@dataclass(frozen=True)
class GtRoiFeature:
    feature: np.ndarray
    class_label: int

    def __post_init__(self):
        arr = np.asarray(self.feature, dtype=np.float64)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise ValidationError("feature must be a finite vector")
        object.__setattr__(self, "feature", arr)
        object.__setattr__(self, "class_label", int(self.class_label))


@dataclass(frozen=True, eq=False)
class PrototypeBank:
    """Per-class EMA prototypes. Absent classes hold exact zero vectors."""

    prototypes: np.ndarray
    present: np.ndarray
    alpha: float = DEFAULT_ALPHA
    sim_threshold: float = DEFAULT_SIM_THRESHOLD
    round_index: int = 0

    def __post_init__(self):
        protos = np.array(self.prototypes, dtype=np.float64)
        present = np.array(self.present, dtype=bool)
        if protos.ndim != 2 or present.shape != (protos.shape[0],):
            raise ValidationError("prototypes must be (N_c, D) with one flag per class")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must be in (0, 1), got {self.alpha}")
        if not -1.0 < self.sim_threshold <= 1.0:
            raise ValidationError(f"sim_threshold must be in (-1, 1], got {self.sim_threshold}")
        norms = np.linalg.norm(protos, axis=1)
        if np.any(protos[~present] != 0.0) or np.any(norms[present] <= 0.0):
            raise ValidationError("present flags disagree with prototype norms")
        protos.setflags(write=False)
        present.setflags(write=False)
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "present", present)

    @classmethod
    def empty(cls, num_classes: int, dim: int, alpha: float = DEFAULT_ALPHA,
              sim_threshold: float = DEFAULT_SIM_THRESHOLD) -> "PrototypeBank":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes, dtype=bool),
                   alpha, sim_threshold)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def is_cold(self) -> bool:
        return not bool(self.present.any())

    def replace(self, **changes) -> "PrototypeBank":
        return dataclasses.replace(self, **changes)

    def same_as(self, other: "PrototypeBank") -> bool:
        return (
            np.array_equal(self.prototypes, other.prototypes)
            and np.array_equal(self.present, other.present)
            and self.alpha == other.alpha
            and self.sim_threshold == other.sim_threshold
            and self.round_index == other.round_index
        )


def local_prototypes(features: Iterable[GtRoiFeature], num_classes: int, dim: int) -> np.ndarray:
    """Per-class mean feature; classes without samples get the zero vector."""
    sums = np.zeros((num_classes, dim))
    counts = np.zeros(num_classes, dtype=np.int64)
    for f in features:
        if f.feature.shape != (dim,):
            raise ValidationError(f"feature dimension {f.feature.shape} != ({dim},)")
        if not 0 <= f.class_label < num_classes:
            raise ValidationError(f"class label {f.class_label} outside [0, {num_classes})")
        sums[f.class_label] += f.feature
        counts[f.class_label] += 1
    out = np.zeros_like(sums)
    seen = counts > 0
    out[seen] = sums[seen] / counts[seen, None]
    return out


def ema_update(bank: PrototypeBank, local: np.ndarray) -> PrototypeBank:
    """g_k <- alpha * g_k + (1 - alpha) * v_k for every class with nonzero v_k.

    A class seen for the first time is initialized to v_k directly.
    """
    local = np.asarray(local, dtype=np.float64)
    if local.shape != bank.prototypes.shape:
        raise ValidationError(f"local prototypes {local.shape} != bank {bank.prototypes.shape}")
    protos = bank.prototypes.copy()
    present = bank.present.copy()
    a = bank.alpha
    for k in range(bank.num_classes):
        v = local[k]
        if not np.any(v):
            continue
        if present[k]:
            protos[k] = a * protos[k] + (1.0 - a) * v
            if not np.any(protos[k]):
                # exact cancellation; keep the present <=> nonzero invariant
                present[k] = False
        else:
            protos[k] = v
            present[k] = True
    return bank.replace(prototypes=protos, present=present)


def cosine_similarity(f: np.ndarray, g: np.ndarray) -> float:
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    nf = np.linalg.norm(f)
    ng = np.linalg.norm(g)
    if nf == 0.0 or ng == 0.0:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(f, g) / (nf * ng), -1.0, 1.0))


def max_similarities(features: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Best cosine similarity of each row of ``features`` over present classes."""
    if bank.is_cold:
        raise ColdBankError("prototype bank has no classes yet")
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    fn = np.linalg.norm(feats, axis=1)
    if np.any(fn == 0.0):
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    g = bank.prototypes[bank.present]
    gn = np.linalg.norm(g, axis=1)
    sims = (feats @ g.T) / np.outer(fn, gn)
    return np.clip(sims, -1.0, 1.0).max(axis=1)


def diversity_score(rois: Sequence[RoiPrediction], bank: PrototypeBank) -> tuple[float, list[bool]]:
    """One minus the mean best-prototype similarity, plus per-RoI novelty flags.

    A RoI is flagged novel when its best similarity falls below the bank's
    threshold.
    """
    if len(rois) == 0:
        raise NoProposalsError("no proposals")
    m = max_similarities(np.stack([r.feature for r in rois]), bank)
    return float(1.0 - m.mean()), [bool(x < bank.sim_threshold) for x in m]


def _absorb(bank: PrototypeBank, roi: RoiPrediction) -> PrototypeBank:
    local = np.zeros_like(bank.prototypes)
    local[roi.label] = roi.feature
    return ema_update(bank, local)


def _ordered(images, descending: bool):
    # images: (image_id, s_unc, rois)
    return sorted(images, key=lambda im: (im[1], im[0]), reverse=descending)


def _walk(bank, images, descending, allow_cold):
    scores: dict[str, tuple[float, list[bool]]] = {}
    for image_id, _, rois in _ordered(images, descending):
        if bank.is_cold and allow_cold:
            flags = [True] * len(rois)
        else:
            s_div, flags = diversity_score(rois, bank)
            scores[image_id] = (s_div, flags)
        for roi, novel in zip(rois, flags):
            if novel:
                bank = _absorb(bank, roi)
    return bank, scores


def score_and_update_divergent(
    bank: PrototypeBank,
    images: Sequence[tuple[str, float, Sequence[RoiPrediction]]],
    descending: bool = False,
) -> tuple[PrototypeBank, dict[str, tuple[float, list[bool]]]]:
    """Walk divergent images from least to most uncertain.

    Each image is scored against the bank as it stands when the image is
    reached; its novel RoIs are then folded into the bank one at a time under
    their teacher argmax class. ``images`` holds ``(image_id, s_unc, rois)``
    triples in any order. Ties on s_unc are walked in image_id order.
    Raises :class:`ColdBankError` if the bank is empty when an image is reached.
    """
    return _walk(bank, images, descending, allow_cold=False)


def update_from_divergent(
    bank: PrototypeBank,
    images: Sequence[tuple[str, float, Sequence[RoiPrediction]]],
    descending: bool = False,
) -> PrototypeBank:
    """Bank-only variant of :func:`score_and_update_divergent`.

    A cold bank is tolerated here: with nothing to compare against, every RoI
    of the image being visited counts as novel.
    """
    return _walk(bank, images, descending, allow_cold=True)[0]
