"""Score fusion and budgeted top-h selection over the divergent pool."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ValidationError

DEFAULT_P = 2.0


@dataclass(frozen=True)
class CandidateScore:
    """Raw and pool-normalized scores of one candidate image.

    ``s_sel`` is the fusion of the *normalized* scores.
    """

    image_id: str
    s_unc: float
    s_div: float
    s_sel: float = 0.0
    norm_unc: float = 0.0
    norm_div: float = 0.0


@dataclass(frozen=True)
class SelectionPlan:
    round_index: int
    budget: int
    p: float
    ranked: tuple[CandidateScore, ...] = ()
    selected: tuple[str, ...] = field(default=())

    @property
    def pool_size(self) -> int:
        return len(self.ranked)


def fuse_scores(s_unc: float, s_div: float, p: float = DEFAULT_P) -> float:
    """L-p norm of the (normalized) score pair; symmetric in its arguments."""
    if s_unc < 0 or s_div < 0:
        raise ValidationError("scores to fuse must be non-negative")
    if not p >= 1:
        raise ValidationError(f"p must be >= 1, got {p}")
    hi, lo = max(s_unc, s_div), min(s_unc, s_div)
    if p == 1:
        return hi + lo
    if p == 2:
        return math.hypot(hi, lo)
    if math.isinf(p):
        return hi
    if hi == 0:
        return 0.0
    return hi * (1.0 + (lo / hi) ** p) ** (1.0 / p)


def _minmax(values: Sequence[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0] * len(values)
    span = hi - lo
    return [(v - lo) / span for v in values]


def rank_key(c: CandidateScore):
    """Higher fused score, then higher raw uncertainty, then image_id."""
    return (-c.s_sel, -c.s_unc, c.image_id)


def plan_round(
    candidates: Iterable[tuple[str, float, float] | CandidateScore],
    h: int,
    p: float = DEFAULT_P,
    round_index: int = 0,
    use_uncertainty: bool = True,
    use_diversity: bool = True,
) -> SelectionPlan:
    """Normalize, fuse, rank and cut the pool at budget ``h``.

    Each score axis is min-max scaled to [0, 1] over the pool before fusion;
    a constant axis maps to 0. Disabling an axis zeroes it, which turns the
    fusion into a single-criterion ranking for ablations.
    """
    if h < 1:
        raise ValidationError(f"budget must be >= 1, got {h}")
    if not p >= 1:
        raise ValidationError(f"p must be >= 1, got {p}")
    rows = []
    for c in candidates:
        if isinstance(c, CandidateScore):
            rows.append((c.image_id, c.s_unc, c.s_div))
        else:
            image_id, s_unc, s_div = c
            rows.append((str(image_id), float(s_unc), float(s_div)))
    if len({r[0] for r in rows}) != len(rows):
        raise ValidationError("duplicate image_id in candidate pool")
    if not rows:
        return SelectionPlan(round_index, h, p)
    for _, u, d in rows:
        if not (math.isfinite(u) and math.isfinite(d)):
            raise ValidationError("candidate scores must be finite")

    nu = _minmax([r[1] for r in rows]) if use_uncertainty else [0.0] * len(rows)
    nd = _minmax([r[2] for r in rows]) if use_diversity else [0.0] * len(rows)
    scored = [
        CandidateScore(r[0], r[1], r[2], fuse_scores(u, d, p), u, d)
        for r, u, d in zip(rows, nu, nd)
    ]
    scored.sort(key=rank_key)
    selected = tuple(c.image_id for c in scored[:h])
    return SelectionPlan(round_index, h, p, tuple(scored), selected)
