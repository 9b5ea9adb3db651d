"""Run configuration: UTF-8 key=value lines with dotted section prefixes.

Example file:

    # structural toggles
    model.num_maps = 3
    model.use_bfm = true
    train.epochs = 30
    train.lr_decay_epochs = 20,26
    paths.output_dir = runs/toy

Every key has a default; unknown keys and malformed values are rejected up
front, and the derived model/scene/head configurations are constructed (and
therefore validated) before any compute starts.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .head import Detector, HeadConfig
from .pyramid import PyramidConfig
from .scenes import CLASS_NAMES, SceneConfig


def _to_int(value):
    return int(value, 10)


def _to_float(value):
    return float(value)


def _to_bool(value):
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _to_str(value):
    return value


def _to_int_tuple(value):
    return tuple(int(part, 10) for part in value.split(",") if part.strip())


def _to_float_tuple(value):
    return tuple(float(part) for part in value.split(",") if part.strip())


# key -> (converter, default)
SCHEMA = {
    "model.num_levels": (_to_int, 5),
    "model.num_maps": (_to_int, 3),
    "model.fuse_channels": (_to_int, 16),
    "model.head_channels": (_to_int, 16),
    "model.use_residual": (_to_bool, True),
    "model.use_parallel": (_to_bool, True),
    "model.use_bfm": (_to_bool, True),
    "model.prior_factors": (_to_float_tuple, (2.0, 4.0)),
    "data.image_side": (_to_int, 64),
    "data.min_objects": (_to_int, 2),
    "data.max_objects": (_to_int, 6),
    "data.noise_std": (_to_float, 0.02),
    "data.seed": (_to_int, 0),
    "data.train_count": (_to_int, 2000),
    "data.val_count": (_to_int, 200),
    "train.epochs": (_to_int, 30),
    "train.batch_size": (_to_int, 8),
    "train.lr": (_to_float, 0.05),
    "train.momentum": (_to_float, 0.9),
    "train.lr_decay_epochs": (_to_int_tuple, ()),
    "train.seed": (_to_int, 0),
    "train.val_interval": (_to_int, 0),
    "train.lambda_box": (_to_float, 5.0),
    "train.lambda_obj": (_to_float, 1.0),
    "train.lambda_cls": (_to_float, 1.0),
    "eval.score_thresh": (_to_float, 0.05),
    "eval.nms_iou": (_to_float, 0.5),
    "eval.pre_nms_topk": (_to_int, 300),
    "eval.max_dets": (_to_int, 100),
    "paths.output_dir": (_to_str, "runs/out"),
}


@dataclass(frozen=True)
class ModelSettings:
    num_levels: int
    num_maps: int
    fuse_channels: int
    head_channels: int
    use_residual: bool
    use_parallel: bool
    use_bfm: bool
    prior_factors: tuple

    def __post_init__(self):
        if not self.prior_factors:
            raise ConfigError("model.prior_factors needs at least one factor")
        if any(f <= 0 for f in self.prior_factors):
            raise ConfigError(
                f"model.prior_factors must be positive, got {self.prior_factors}")

    def pyramid_config(self) -> PyramidConfig:
        return PyramidConfig(num_levels=self.num_levels, num_maps=self.num_maps,
                             fuse_channels=self.fuse_channels,
                             head_channels=self.head_channels,
                             use_residual=self.use_residual,
                             use_parallel=self.use_parallel,
                             use_bfm=self.use_bfm)


@dataclass(frozen=True)
class DataSettings:
    image_side: int
    min_objects: int
    max_objects: int
    noise_std: float
    seed: int
    train_count: int
    val_count: int

    def __post_init__(self):
        if self.train_count < 1 or self.val_count < 1:
            raise ConfigError(
                f"data.train_count and data.val_count must be >= 1, got "
                f"{self.train_count}/{self.val_count}")

    def scene_config(self) -> SceneConfig:
        side = self.image_side
        # keep only the size buckets that fit the configured image
        weights = list(SceneConfig.size_weights)
        for b, (_, hi) in enumerate(SceneConfig.size_ranges):
            if hi + 3 > side:
                weights[b] = 0.0
        total = sum(weights)
        if total == 0:
            raise ConfigError(f"data.image_side={side} fits no object bucket")
        weights = tuple(w / total for w in weights)
        return SceneConfig(image_side=side, min_objects=self.min_objects,
                           max_objects=self.max_objects, size_weights=weights,
                           noise_std=self.noise_std, seed=self.seed)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int
    batch_size: int
    lr: float
    momentum: float
    lr_decay_epochs: tuple
    seed: int
    val_interval: int
    lambda_box: float
    lambda_obj: float
    lambda_cls: float

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"train.momentum must be in [0, 1), got {self.momentum}")
        if self.val_interval < 0:
            raise ConfigError("train.val_interval must be >= 0")
        if any(e < 1 for e in self.lr_decay_epochs):
            raise ConfigError("train.lr_decay_epochs entries are 1-based epochs")
        if any(l < 0 for l in (self.lambda_box, self.lambda_obj, self.lambda_cls)):
            raise ConfigError("loss weights must be non-negative")

    def lr_at(self, epoch: int) -> float:
        """Step-decayed rate for a 1-based epoch number (x0.1 per mark)."""
        drops = sum(1 for mark in self.lr_decay_epochs if epoch >= mark)
        return self.lr * 0.1 ** drops


@dataclass(frozen=True)
class EvalSettings:
    score_thresh: float
    nms_iou: float
    pre_nms_topk: int
    max_dets: int

    def __post_init__(self):
        if not 0 < self.score_thresh < 1:
            raise ConfigError(
                f"eval.score_thresh must be in (0, 1), got {self.score_thresh}")
        if not 0 < self.nms_iou < 1:
            raise ConfigError(f"eval.nms_iou must be in (0, 1), got {self.nms_iou}")
        if self.pre_nms_topk < 1:
            raise ConfigError(
                f"eval.pre_nms_topk must be >= 1, got {self.pre_nms_topk}")
        if self.max_dets < 1:
            raise ConfigError(f"eval.max_dets must be >= 1, got {self.max_dets}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelSettings
    data: DataSettings
    train: TrainSettings
    eval: EvalSettings
    output_dir: str

    def __post_init__(self):
        # construct every derived config now so bad values fail before compute
        pyramid = self.model.pyramid_config()
        scene = self.data.scene_config()
        self.head_config()
        side = scene.image_side
        divisor = 2 ** (pyramid.num_levels - 1)
        if side % divisor:
            raise ConfigError(
                f"data.image_side={side} must be divisible by {divisor} "
                f"for model.num_levels={pyramid.num_levels}")

    def pyramid_config(self) -> PyramidConfig:
        return self.model.pyramid_config()

    def scene_config(self) -> SceneConfig:
        return self.data.scene_config()

    def head_config(self) -> HeadConfig:
        priors = []
        for level in self.model.pyramid_config().prediction_levels():
            stride = 2 ** (level - 1)
            priors.append(tuple((factor * stride, factor * stride)
                                for factor in self.model.prior_factors))
        return HeadConfig(num_classes=len(CLASS_NAMES),
                          priors_per_level=tuple(priors),
                          lambda_box=self.train.lambda_box,
                          lambda_obj=self.train.lambda_obj,
                          lambda_cls=self.train.lambda_cls)

    def build_detector(self, dtype=np.float32) -> Detector:
        return Detector(self.pyramid_config(), self.head_config(),
                        seed=self.train.seed, dtype=dtype)

    def with_overrides(self, **sections) -> "RunConfig":
        """New config with replaced section fields, e.g. train={'seed': 3}."""
        updates = {}
        for section, fields in sections.items():
            if section == "output_dir":
                updates[section] = fields
            else:
                updates[section] = replace(getattr(self, section), **fields)
        return replace(self, **updates)


def parse_kv_lines(text, source="config"):
    """Raw dotted-key -> string-value mapping; rejects malformed lines."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        value = value.strip()
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def build_run_config(values) -> RunConfig:
    """Typed RunConfig from raw string values; unknown keys are errors."""
    unknown = sorted(set(values) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    typed = {}
    for key, (convert, default) in SCHEMA.items():
        if key in values:
            try:
                typed[key] = convert(values[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        else:
            typed[key] = default

    def section(name, cls):
        prefix = name + "."
        fields = {key[len(prefix):]: value for key, value in typed.items()
                  if key.startswith(prefix)}
        return cls(**fields)

    return RunConfig(model=section("model", ModelSettings),
                     data=section("data", DataSettings),
                     train=section("train", TrainSettings),
                     eval=section("eval", EvalSettings),
                     output_dir=typed["paths.output_dir"])


def load_run_config(path=None, overrides=None) -> RunConfig:
    """Config from an optional file plus raw-string overrides."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = parse_kv_lines(path.read_text(encoding="utf-8"), str(path))
    for key, value in (overrides or {}).items():
        values[key] = value
    return build_run_config(values)
