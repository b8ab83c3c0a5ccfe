"""Desk-scale stand-in for the detector loop.

A synthetic pool of images with ground-truth boxes, classes and
class-conditional features replaces the dataset, and a noise schedule keyed to
the labeled fraction replaces detector training: the more images are labeled,
the cleaner the simulated teacher and student become.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import EngineConfig
from .errors import ValidationError
from .prototypes import GtRoiFeature, PrototypeBank, ema_update, local_prototypes, score_and_update_divergent
from .roicm import PartitionResult, Verdict, partition_all
from .scoring import uncertainty
from .selection import CandidateScore, SelectionPlan, plan_round
from .structures import Box, ImagePrediction, RoiPrediction, Source

log = logging.getLogger(__name__)

STRATEGIES = ("combined", "uncertainty", "diversity", "random")


@dataclass(frozen=True)
class SyntheticPoolSpec:
    num_images: int = 500
    num_classes: int = 8
    dim: int = 16
    class_freqs: tuple[float, ...] | None = None
    zipf_exponent: float = 1.0
    min_objects: int = 1
    max_objects: int = 6
    image_size: int = 512
    grid: int = 4
    feature_std: float = 0.25
    max_centroid_cos: float = 0.5
    seed: int = 42

    def __post_init__(self):
        if self.num_images < 1 or self.num_classes < 1 or self.dim < 1:
            raise ValidationError("num_images, num_classes and dim must be positive")
        if not 1 <= self.min_objects <= self.max_objects <= self.grid * self.grid:
            raise ValidationError("need 1 <= min_objects <= max_objects <= grid**2")
        if self.image_size < 8 * self.grid:
            raise ValidationError("image_size too small for the grid")
        if self.class_freqs is not None:
            f = np.asarray(self.class_freqs, dtype=np.float64)
            if f.shape != (self.num_classes,) or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
                raise ValidationError("class_freqs must be num_classes non-negative values summing to 1")
            object.__setattr__(self, "class_freqs", tuple(float(x) for x in f))

    def frequencies(self) -> np.ndarray:
        if self.class_freqs is not None:
            return np.asarray(self.class_freqs)
        w = 1.0 / np.arange(1, self.num_classes + 1) ** self.zipf_exponent
        return w / w.sum()

    @classmethod
    def from_mapping(cls, data) -> "SyntheticPoolSpec":
        data = dict(data)
        if data.get("class_freqs") is not None:
            data["class_freqs"] = tuple(data["class_freqs"])
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class GroundTruthImage:
    image_id: str
    boxes: np.ndarray       # (n, 4) xyxy
    classes: np.ndarray     # (n,)
    features: np.ndarray    # (n, D), non-negative
    difficulty: np.ndarray  # (n,) in [0, 1]; small objects are hard


@dataclass(frozen=True, eq=False)
class SyntheticPool:
    spec: SyntheticPoolSpec
    centroids: np.ndarray
    images: tuple[GroundTruthImage, ...]

    def by_id(self) -> dict[str, GroundTruthImage]:
        return {im.image_id: im for im in self.images}


def _make_centroids(spec: SyntheticPoolSpec, rng: np.random.Generator) -> np.ndarray:
    k, d = spec.num_classes, spec.dim
    for _ in range(1000):
        c = np.abs(rng.normal(0.0, 0.3, size=(k, d)))
        c[np.arange(k), np.arange(k) % d] += 2.0
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        cos = c @ c.T
        np.fill_diagonal(cos, -1.0)
        if k == 1 or cos.max() < spec.max_centroid_cos:
            return c * math.sqrt(d)
    raise ValidationError(
        f"could not place {k} centroids in {d} dims below cosine {spec.max_centroid_cos}"
    )


def generate_pool(spec: SyntheticPoolSpec) -> SyntheticPool:
    """Deterministic synthetic pool; objects sit in distinct grid cells so they never overlap."""
    rng = np.random.default_rng(spec.seed)
    centroids = _make_centroids(spec, rng)
    freqs = spec.frequencies()
    cell = spec.image_size / spec.grid
    lo_size, hi_size = 0.15 * cell, 0.9 * cell
    width = len(str(spec.num_images - 1))
    images = []
    for i in range(spec.num_images):
        n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        cells = rng.choice(spec.grid * spec.grid, size=n, replace=False)
        classes = rng.choice(spec.num_classes, size=n, p=freqs)
        sizes = rng.uniform(lo_size, hi_size, size=(n, 2))
        offsets = rng.uniform(0.0, 1.0, size=(n, 2)) * (cell - sizes)
        x1 = (cells % spec.grid) * cell + offsets[:, 0]
        y1 = (cells // spec.grid) * cell + offsets[:, 1]
        boxes = np.stack([x1, y1, x1 + sizes[:, 0], y1 + sizes[:, 1]], axis=1)
        feats = centroids[classes] + rng.normal(0.0, spec.feature_std, size=(n, spec.dim))
        feats = np.maximum(feats, 0.0)
        side = np.sqrt(sizes.prod(axis=1))
        difficulty = 1.0 - (side - lo_size) / (hi_size - lo_size)
        images.append(GroundTruthImage(
            f"img_{i:0{width}d}", boxes, classes.astype(np.int64), feats,
            np.clip(difficulty, 0.0, 1.0),
        ))
    return SyntheticPool(spec, centroids, tuple(images))


@dataclass(frozen=True)
class OracleSkill:
    """Noise schedule of the simulated teacher/student pair.

    Every rate is scaled by ``(1 - label_fraction) ** decay`` and by a
    per-object factor from object difficulty and, when known, from how many
    labeled examples the object's class has.
    """

    flip_rate: float = 0.25
    temperature: float = 0.4
    logit_noise: float = 0.6
    box_jitter: float = 0.04
    feature_noise: float = 0.5
    confidence_drop: float = 0.4
    decorrelation: float = 0.5
    decay: float = 1.0
    difficulty_weight: float = 1.0
    class_sensitivity: float = 1.0
    class_saturation: int = 40
    hard_sensitivity: float = 1.0
    hard_saturation: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_rate", "box_jitter", "confidence_drop", "decorrelation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        for name in ("temperature", "logit_noise", "feature_noise", "decay",
                     "difficulty_weight", "class_sensitivity", "hard_sensitivity"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.class_saturation < 1 or self.hard_saturation < 1:
            raise ValidationError("saturation counts must be >= 1")

    @classmethod
    def noiseless(cls, seed: int = 0) -> "OracleSkill":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, seed=seed)

    @classmethod
    def from_mapping(cls, data) -> "OracleSkill":
        return cls(**dict(data))

    def to_dict(self):
        return dataclasses.asdict(self)

    def noise_level(self, label_fraction: float) -> float:
        lf = min(max(label_fraction, 0.0), 1.0)
        return (1.0 - lf) ** self.decay if self.decay > 0 else 1.0


@dataclass(frozen=True, eq=False)
class Competence:
    """How well the simulated detector knows each class and hard objects, in [0, 1]."""

    per_class: np.ndarray
    hard: float


def competence_from_labeled(labeled: Sequence[GroundTruthImage], oracle: OracleSkill,
                            num_classes: int) -> Competence:
    counts = np.zeros(num_classes)
    hard = 0
    for gt in labeled:
        counts += np.bincount(gt.classes, minlength=num_classes)
        hard += int(np.sum(gt.difficulty > 0.5))
    return Competence(np.minimum(1.0, counts / oracle.class_saturation),
                      min(1.0, hard / oracle.hard_saturation))


def _image_rng(seed: int, image_id: str, label_fraction: float, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        [seed, zlib.crc32(image_id.encode()), int(round(label_fraction * 1e9)), stream]
    )


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def _object_factors(oracle, gt, label_fraction, competence):
    base = oracle.noise_level(label_fraction)
    f = base * (1.0 + oracle.difficulty_weight * (gt.difficulty - 0.5))
    if competence is not None:
        f = f * (1.0 + oracle.class_sensitivity * (1.0 - competence.per_class[gt.classes]))
        f = f * (1.0 + oracle.hard_sensitivity * (1.0 - competence.hard) * gt.difficulty)
    return np.maximum(f, 0.0)


def _probs(label: int, z: np.ndarray, e: float, oracle: OracleSkill, n_c: int) -> np.ndarray:
    onehot = np.zeros(n_c)
    onehot[label] = 1.0
    tau = oracle.temperature * e
    if tau == 0.0:
        return onehot
    return _softmax((onehot + oracle.logit_noise * e * z) / tau)


def _jitter_box(box, shifts, e, oracle):
    w, h = box[2] - box[0], box[3] - box[1]
    scale = oracle.box_jitter * e * np.array([w, h, w, h])
    b = box + scale * shifts
    x1, x2 = min(b[0], b[2]), max(b[0], b[2])
    y1, y2 = min(b[1], b[3]), max(b[1], b[3])
    return Box(float(x1), float(y1), float(max(x2, x1 + 1.0)), float(max(y2, y1 + 1.0)))


def _observe_feature(true_feat, noise, e, oracle):
    f = np.maximum(true_feat + oracle.feature_noise * e * noise, 0.0)
    return f if np.any(f) else true_feat


def predict(
    oracle: OracleSkill,
    gt: GroundTruthImage,
    label_fraction: float,
    num_classes: int,
    competence: Competence | None = None,
) -> tuple[ImagePrediction, ImagePrediction]:
    """Simulated teacher and student predictions for one image.

    The student shares the teacher's noise draws except for a
    ``decorrelation`` share that is redrawn independently. Deterministic in
    (oracle.seed, image_id, label_fraction, competence).
    """
    if not 0.0 <= label_fraction <= 1.0:
        raise ValidationError(f"label_fraction must be in [0, 1], got {label_fraction}")
    rng = _image_rng(oracle.seed, gt.image_id, label_fraction, 0)
    d = oracle.decorrelation
    factors = _object_factors(oracle, gt, label_fraction, competence)
    t_rois, s_rois = [], []
    for j in range(len(gt.classes)):
        e = float(factors[j])
        true_c = int(gt.classes[j])
        # fixed draw order keeps the stream aligned across noise settings
        u_flip_t, u_flip_s, u_redraw, u_conf_t, u_conf_s = rng.uniform(size=5)
        alt_t, alt_s = rng.integers(0, max(num_classes - 1, 1), size=2)
        z_t, z_s = rng.normal(size=(2, num_classes))
        box_t, box_s = rng.normal(size=(2, 4))
        feat_t, feat_s = rng.normal(size=(2, gt.features.shape[1]))

        def flipped(u, alt):
            if num_classes > 1 and u < min(1.0, oracle.flip_rate * e):
                return int(alt) if alt < true_c else int(alt) + 1
            return true_c

        c_t = flipped(u_flip_t, alt_t)
        c_s = flipped(u_flip_s, alt_s) if u_redraw < d else c_t
        mix = lambda a, b: (1.0 - d) * a + d * b
        conf_t = float(np.clip(1.0 - oracle.confidence_drop * e * u_conf_t, 0.0, 1.0))
        conf_s = float(np.clip(1.0 - oracle.confidence_drop * e * mix(u_conf_t, u_conf_s), 0.0, 1.0))
        box = gt.boxes[j]
        t_rois.append(RoiPrediction(
            _jitter_box(box, box_t, e, oracle), conf_t,
            _probs(c_t, z_t, e, oracle, num_classes),
            _observe_feature(gt.features[j], feat_t, e, oracle),
        ))
        s_rois.append(RoiPrediction(
            _jitter_box(box, mix(box_t, box_s), e, oracle), conf_s,
            _probs(c_s, mix(z_t, z_s), e, oracle, num_classes),
            _observe_feature(gt.features[j], mix(feat_t, feat_s), e, oracle),
        ))
    return (ImagePrediction(gt.image_id, Source.TEACHER, tuple(t_rois)),
            ImagePrediction(gt.image_id, Source.STUDENT, tuple(s_rois)))


def labeled_features(
    oracle: OracleSkill, gt: GroundTruthImage, label_fraction: float
) -> list[GtRoiFeature]:
    """Ground-truth RoI features as seen through the student's RoI head."""
    rng = _image_rng(oracle.seed, gt.image_id, label_fraction, 1)
    e = oracle.noise_level(label_fraction)
    noise = rng.normal(size=gt.features.shape)
    return [
        GtRoiFeature(_observe_feature(gt.features[j], noise[j], e, oracle), int(gt.classes[j]))
        for j in range(len(gt.classes))
    ]


@dataclass(frozen=True)
class QualityProxy:
    noise_level: float
    labeled_class_counts: tuple[int, ...]

    @property
    def classes_covered(self) -> int:
        return sum(1 for c in self.labeled_class_counts if c > 0)


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round_index: int
    label_fraction: float
    partitions: tuple[PartitionResult, ...]
    plan: SelectionPlan
    bank: PrototypeBank
    labeled: tuple[str, ...]
    unlabeled: tuple[str, ...]
    mean_s_unc: float
    selected_classes: tuple[int, ...]
    quality: QualityProxy

    def count(self, verdict: Verdict) -> int:
        return sum(1 for r in self.partitions if r.verdict is verdict)

    @property
    def mean_weight(self) -> float:
        w = [r.weight for r in self.partitions if r.verdict is Verdict.CONSISTENT]
        return float(np.mean(w)) if w else 0.0

    @property
    def selected_coverage(self) -> int:
        return len(self.selected_classes)


@dataclass(frozen=True, eq=False)
class LoopTrace:
    strategy: str
    seed: int
    budget: int
    config: EngineConfig
    initial_labeled: tuple[str, ...]
    initial_bank: PrototypeBank
    initial_quality: QualityProxy
    rounds: tuple[RoundRecord, ...]
    final_mean_s_unc: float

    @property
    def final_labeled(self) -> tuple[str, ...]:
        return self.rounds[-1].labeled if self.rounds else self.initial_labeled

    @property
    def final_quality(self) -> QualityProxy:
        return self.rounds[-1].quality if self.rounds else self.initial_quality

    @property
    def s_unc_reduction(self) -> float:
        if not self.rounds:
            return 0.0
        return self.rounds[0].mean_s_unc - self.final_mean_s_unc


def _class_counts(pool_by_id, ids, num_classes) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for i in ids:
        counts += np.bincount(pool_by_id[i].classes, minlength=num_classes)
    return counts


def _bank_from_labeled(bank, oracle, pool_by_id, labeled, lf, cfg):
    feats = [f for i in labeled for f in labeled_features(oracle, pool_by_id[i], lf)]
    return ema_update(bank, local_prototypes(feats, cfg.num_classes, cfg.dim))


def _predict_all(oracle, pool_by_id, ids, lf, cfg, competence):
    return {i: predict(oracle, pool_by_id[i], lf, cfg.num_classes, competence) for i in ids}


def _mean_unc(partitions, cfg) -> float:
    vals = [uncertainty(r.rois, cfg.epsilon) for r in partitions if r.rois]
    return float(np.mean(vals)) if vals else 0.0


def run_loop(
    pool: SyntheticPool,
    oracle: OracleSkill,
    rounds: int,
    budget: int,
    config: EngineConfig | None = None,
    strategy: str = "combined",
    init_fraction: float = 0.05,
    seed: int | None = None,
) -> LoopTrace:
    """Run SSOD -> AL -> Oracle rounds over a synthetic pool.

    ``seed`` drives the initial labeled split and the random strategy; it
    defaults to the pool seed. ``strategy`` chooses how the divergent pool is
    ranked: fused scores, either score alone, or a random order.
    """
    cfg = config or EngineConfig(num_classes=pool.spec.num_classes, dim=pool.spec.dim)
    if (cfg.num_classes, cfg.dim) != (pool.spec.num_classes, pool.spec.dim):
        raise ValidationError("config num_classes/dim do not match the pool")
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if rounds < 0 or budget < 1:
        raise ValidationError("rounds must be >= 0 and budget >= 1")
    if not 0.0 < init_fraction < 1.0:
        # an empty seed set would leave the prototype bank cold
        raise ValidationError("init_fraction must be in (0, 1)")
    seed = pool.spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 7])

    by_id = pool.by_id()
    all_ids = sorted(by_id)
    n_init = int(math.ceil(init_fraction * len(all_ids)))
    labeled = set(rng.choice(all_ids, size=n_init, replace=False).tolist()) if n_init else set()
    unlabeled = set(all_ids) - labeled
    if budget * rounds > len(unlabeled):
        raise ValidationError(
            f"budget {budget} x rounds {rounds} exceeds unlabeled pool of {len(unlabeled)}"
        )

    def quality() -> QualityProxy:
        counts = _class_counts(by_id, labeled, cfg.num_classes)
        return QualityProxy(oracle.noise_level(len(labeled) / len(all_ids)),
                            tuple(int(c) for c in counts))

    bank = PrototypeBank.empty(cfg.num_classes, cfg.dim, cfg.alpha, cfg.sim_threshold)
    bank = _bank_from_labeled(bank, oracle, by_id, sorted(labeled), len(labeled) / len(all_ids), cfg)
    initial_labeled, initial_bank, initial_quality = tuple(sorted(labeled)), bank, quality()

    records = []
    for r in range(1, rounds + 1):
        lf = len(labeled) / len(all_ids)
        competence = competence_from_labeled([by_id[i] for i in sorted(labeled)], oracle, cfg.num_classes)
        preds = _predict_all(oracle, by_id, sorted(unlabeled), lf, cfg, competence)
        partitions = partition_all(preds, cfg)
        divergent = [(p.image_id, p.s_unc, p.rois) for p in partitions if p.verdict is Verdict.DIVERGENT]
        bank, div_scores = score_and_update_divergent(bank, divergent)
        candidates = [(i, u, div_scores[i][0]) for i, u, _ in divergent]

        if strategy == "random":
            order = rng.permutation(len(candidates))
            ranked = tuple(CandidateScore(*candidates[k]) for k in order)
            plan = SelectionPlan(r, budget, cfg.p, ranked, tuple(c.image_id for c in ranked[:budget]))
        else:
            plan = plan_round(
                candidates, budget, cfg.p, round_index=r,
                use_uncertainty=strategy in ("combined", "uncertainty"),
                use_diversity=strategy in ("combined", "diversity"),
            )

        # oracle stage: selected images join the labeled set with ground truth
        labeled.update(plan.selected)
        unlabeled.difference_update(plan.selected)
        new_lf = len(labeled) / len(all_ids)
        bank = _bank_from_labeled(bank, oracle, by_id, sorted(labeled), new_lf, cfg).replace(round_index=r)
        sel_counts = _class_counts(by_id, plan.selected, cfg.num_classes)
        records.append(RoundRecord(
            round_index=r,
            label_fraction=lf,
            partitions=tuple(partitions),
            plan=plan,
            bank=bank,
            labeled=tuple(sorted(labeled)),
            unlabeled=tuple(sorted(unlabeled)),
            mean_s_unc=_mean_unc(partitions, cfg),
            selected_classes=tuple(int(k) for k in np.flatnonzero(sel_counts)),
            quality=quality(),
        ))
        log.info("round %d: %d consistent, %d divergent, %d selected", r,
                 records[-1].count(Verdict.CONSISTENT), len(divergent), len(plan.selected))

    final_unc = 0.0
    if records:
        lf = len(labeled) / len(all_ids)
        competence = competence_from_labeled([by_id[i] for i in sorted(labeled)], oracle, cfg.num_classes)
        preds = _predict_all(oracle, by_id, sorted(unlabeled), lf, cfg, competence)
        final_unc = _mean_unc(partition_all(preds, cfg), cfg)

    return LoopTrace(strategy, seed, budget, cfg, initial_labeled, initial_bank,
                     initial_quality, tuple(records), final_unc)
