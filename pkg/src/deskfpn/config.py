"""Run configuration and its ``key = value`` file format.

Grammar: one ``dotted.key = value`` per line; ``#`` starts a comment; blank
lines are ignored. Lists are comma separated, booleans are ``true``/``false``,
``none`` clears an optional value. Unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig


class ConfigError(ValueError):
    pass


VARIANTS = ("c4", "c5", "fpn", "bottomup", "nolateral", "finest")


@dataclass
class ModelConfig:
    variant: str = "fpn"
    d: int = 32
    with_p6: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d < 1:
            raise ConfigError("model.d must be positive")


@dataclass
class RpnConfig:
    nms_threshold: float = 0.7
    pre_nms_top_n: int = 1000
    post_nms_top_n_train: int = 2000
    post_nms_top_n_test: int = 1000
    batch_anchors: int = 256
    positive_fraction: float = 0.5
    share_head: bool = True


@dataclass
class DetectorConfig:
    k0: int = 4
    rois_per_image: int = 512
    fg_fraction: float = 0.25
    hidden: int = 1024
    score_threshold: float = 0.05
    nms_threshold: float = 0.5
    max_detections: int = 100


@dataclass
class MaskConfig:
    d: int = 128
    hidden: int = 512
    resolution: int = 14
    top_n: int = 1000
    sample_per_image: int = 128
    positive_fraction: float = 0.25
    loss_weight: float = 10.0

    def __post_init__(self):
        if self.resolution not in (14, 28):
            raise ConfigError("mask.resolution must be 14 or 28")


@dataclass
class OptimConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 2000
    decay_step: int = 1500
    decay_factor: float = 0.1
    warmup_steps: int = 100
    batch_size: int = 2


@dataclass
class DataConfig:
    image_size: int = 128
    train_images: int = 500
    eval_images: int = 100
    min_size: float = 12.0
    max_size: float = 96.0
    min_objects: int = 1
    max_objects: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _convert(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.lower() == "none":
            return None
        tp = next(a for a in args if a is not type(None))
        origin = typing.get_origin(tp)
    try:
        if origin is list:
            (inner,) = typing.get_args(tp)
            return [inner(v.strip()) for v in raw.split(",") if v.strip()]
        if tp is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError as err:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp}") from err


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _fields(obj):
    hints = typing.get_type_hints(type(obj))
    return [(f.name, hints[f.name]) for f in dataclasses.fields(obj)]


def set_value(cfg: RunConfig, key: str, raw: str) -> None:
    parts = key.split(".")
    target = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(target) or p not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, p)
    hints = dict(_fields(target)) if dataclasses.is_dataclass(target) else {}
    name = parts[-1]
    if name not in hints or dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _convert(raw.strip(), hints[name], key))


def validate(cfg: RunConfig) -> RunConfig:
    """Re-run every section's checks after in-place edits."""
    try:
        for name, _ in _fields(cfg):
            section = getattr(cfg, name)
            if dataclasses.is_dataclass(section) and hasattr(section, "__post_init__"):
                section.__post_init__()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    if cfg.data.image_size % 32:
        raise ConfigError("data.image_size must be a multiple of 32")
    # all initialization streams derive from the master seed
    cfg.backbone.seed = cfg.seed
    return cfg


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        set_value(cfg, key.strip(), raw)
    return validate(cfg)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = []

    def walk(obj, prefix):
        for name, _ in _fields(obj):
            value = getattr(obj, name)
            if dataclasses.is_dataclass(value):
                walk(value, f"{prefix}{name}.")
            else:
                lines.append(f"{prefix}{name} = {_format(value)}")

    walk(cfg, "")
    return "\n".join(lines) + "\n"
