"""Engine configuration shared by the CLI, the scorer and the simulator."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ValidationError


@dataclass(frozen=True)
class EngineConfig:
    num_classes: int = 8
    dim: int = 16
    conf_thresh: float = 0.7
    iou_nms: float = 0.5
    iou_match: float = 0.5
    epsilon: float = 1e-8
    alpha: float = 0.99
    sim_threshold: float = 0.7
    p: float = 2.0
    lambda_u: float = 1.0
    literal_kl: bool = False

    def __post_init__(self):
        if self.num_classes < 1 or self.dim < 1:
            raise ValidationError("num_classes and dim must be positive")
        if not 0.0 <= self.conf_thresh < 1.0:
            raise ValidationError("conf_thresh must be in [0, 1)")
        for name in ("iou_nms", "iou_match"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must be in (0, 1]")
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must be in (0, 1)")
        if not -1.0 < self.sim_threshold <= 1.0:
            raise ValidationError("sim_threshold must be in (-1, 1]")
        if not self.p >= 1.0:
            raise ValidationError("p must be >= 1")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "EngineConfig":
        data = dict(data)
        # accept the single-letter name used for the novelty threshold
        if "s" in data:
            data["sim_threshold"] = data.pop("s")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "EngineConfig":
        return dataclasses.replace(self, **changes)


def load_mapping(path: str | Path) -> dict[str, Any]:
    """Read a YAML or JSON file (JSON is a YAML subset)."""
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a mapping at top level")
    return data


def load_config(path: str | Path | None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    return EngineConfig.from_mapping(load_mapping(path))
