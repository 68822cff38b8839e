"""Pipeline configuration: flat ``key = value`` text files with CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .core import GroundingError


class ConfigError(GroundingError, ValueError):
    pass


@dataclass
class PipelineConfig:
    window_length: int = 90
    top_k_windows: int = 10
    nms_iou_threshold: float = 0.5
    prediction_count: int = 5
    lambda_con: float = 1.0
    lambda_adapt: float = 0.2
    scorer_learning_rate: float = 1e-4
    adapter_learning_rate: float = 1e-5
    batch_size: int = 32
    scorer_epochs: int = 20
    adapter_epochs: int = 20
    early_stop_patience: int = 3
    adapter_bottleneck: int = 0
    positive_iou_threshold: float = 0.7
    iou_t_min: float = 0.3
    iou_t_max: float = 0.7
    seed: int = 0
    normalize_features: bool = True
    use_adapter: bool = True
    use_adapter_for_selection: bool = True
    use_fusion: bool = True
    joint_training: bool = False
    optimizer: str = "adam"
    strict_iou: bool = True
    normalization_pool: str = "global"

    def __post_init__(self):
        if self.window_length < 2:
            raise ConfigError("window_length must be >= 2")
        if self.top_k_windows < 1:
            raise ConfigError("top_k_windows must be >= 1")
        if self.prediction_count < 1:
            raise ConfigError("prediction_count must be >= 1")
        if self.normalization_pool not in ("global", "per-window"):
            raise ConfigError("normalization_pool must be 'global' or 'per-window'")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if not 0.0 <= self.nms_iou_threshold <= 1.0:
            raise ConfigError("nms_iou_threshold must lie in [0, 1]")

    @classmethod
    def for_fps(cls, fps: float, **overrides) -> "PipelineConfig":
        """Defaults for the two feature rates the method was tuned on."""
        base = {"window_length": 125, "top_k_windows": 30} if fps >= 5.0 else {}
        return cls(**{**base, **overrides})

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        """Learning rates suited to the small scoring head on synthetic corpora."""
        base = {"scorer_learning_rate": 0.2, "adapter_learning_rate": 1e-3, "scorer_epochs": 30}
        return cls(**{**base, **overrides})

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def stage_seed(self, stage: str) -> int:
        """Deterministic per-stage seed derived from the root seed."""
        import zlib

        return (self.seed * 1_000_003 + zlib.crc32(stage.encode())) % (2**32)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def parse_overrides(pairs) -> dict:
    out = {}
    for key, raw in pairs:
        key = key.strip().replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = raw if not isinstance(raw, str) else _coerce(key, _TYPES[key], raw)
    return out


def parse_config_text(text: str) -> dict:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key, value))
    return parse_overrides(pairs)


def load_config(path=None, **overrides) -> PipelineConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
