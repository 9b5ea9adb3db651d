"""Feature pyramid with parallel fusion paths and residual skips.

The model turns one image into a small pyramid of backbone maps, runs one or
more bi-fusion paths over staggered level spans, integrates the path outputs
into prediction feature maps, and optionally refines them with a bottom-up
fusion pass. Levels count from 1 (input resolution) to `num_levels`
(coarsest); the map at level l has stride 2**(l - 1).

Three independent toggles select the ablation variants: `use_residual` adds
skip connections inside each path, `use_parallel` runs one path per
prediction map instead of a single shared path, and `use_bfm` enables the
bottom-up refinement stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import ConfigError, ContractError, ShapeError
from .layers import ChannelScale, ConvLayer, PointwiseLayer

LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class PyramidConfig:
    """Structural hyperparameters of the pyramid."""

    num_levels: int
    num_maps: int
    fuse_channels: int
    head_channels: int
    use_residual: bool = False
    use_parallel: bool = False
    use_bfm: bool = False
    in_channels: int = 3

    def __post_init__(self):
        if self.num_maps < 1:
            raise ConfigError(f"num_maps must be >= 1, got {self.num_maps}")
        if self.num_levels < 2 * self.num_maps - 1:
            raise ConfigError(
                f"num_levels must be >= 2 * num_maps - 1 so every path span stays "
                f"above level 1; got num_levels={self.num_levels} num_maps={self.num_maps}")
        if self.fuse_channels < 1 or self.head_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel widths must be >= 1")

    @property
    def num_paths(self) -> int:
        return self.num_maps if self.use_parallel else 1

    def prediction_levels(self):
        """Levels of the returned prediction maps, coarsest first."""
        return [self.num_levels - s + 1 for s in range(1, self.num_maps + 1)]


@dataclass
class FeatureMap:
    """A tensor pinned to a pyramid level."""

    tensor: engine.Tensor
    level: int

    @property
    def stride(self) -> int:
        return 2 ** (self.level - 1)

    @property
    def shape(self):
        return self.tensor.shape


def layer_span(path_index: int, num_levels: int, num_maps: int):
    """Backbone levels fused by one path, deepest first.

    Path p (1-based) spans the `num_maps` consecutive levels from
    num_levels - p + 1 down to num_levels - p - num_maps + 2.
    """
    if not 1 <= path_index <= num_maps:
        raise ConfigError(f"path_index must be in 1..{num_maps}, got {path_index}")
    top = num_levels - path_index + 1
    span = [top - i for i in range(num_maps)]
    if span[-1] < 1:
        raise ConfigError(
            f"path {path_index} span {span} underflows level 1 "
            f"(num_levels={num_levels}, num_maps={num_maps})")
    return span


def resample_to_level(fm: FeatureMap, target_level: int) -> FeatureMap:
    """Move a map to another level by repeated 2x resampling."""
    tensor = fm.tensor
    level = fm.level
    while level > target_level:
        tensor = engine.upsample2x(tensor)
        level -= 1
    while level < target_level:
        tensor = engine.downsample2x(tensor)
        level += 1
    return FeatureMap(tensor, target_level)


class Backbone:
    """Stride-1 stem plus a halving chain of 3x3 convs, all at one width."""

    def __init__(self, name, config: PyramidConfig, rng, dtype=np.float32):
        self.name = name
        self.config = config
        c = config.fuse_channels
        self.stem = ConvLayer(f"{name}.level1", config.in_channels, c, 3, rng,
                              pad=1, dtype=dtype)
        self.convs = [ConvLayer(f"{name}.level{l}", c, c, 3, rng, pad=1, dtype=dtype)
                      for l in range(2, config.num_levels + 1)]

    def __call__(self, image: engine.Tensor):
        """Return feature maps for levels 1..num_levels (finest first)."""
        n, c, h, w = image.shape
        divisor = 2 ** (self.config.num_levels - 1)
        if h != w or h % divisor:
            raise ConfigError(
                f"image must be square with side divisible by {divisor}, got {h}x{w}")
        if c != self.config.in_channels:
            raise ShapeError(
                f"image has {c} channels, backbone expects {self.config.in_channels}")
        maps = [FeatureMap(engine.leaky_relu(self.stem(image), LEAKY_SLOPE), 1)]
        for level, conv in enumerate(self.convs, start=2):
            x = engine.downsample2x(maps[-1].tensor)
            maps.append(FeatureMap(engine.leaky_relu(conv(x), LEAKY_SLOPE), level))
        return maps

    def params(self):
        out = self.stem.params()
        for conv in self.convs:
            out.extend(conv.params())
        return out


class Reorg:
    """Fold a one-level-finer map down to the current level.

    space_to_depth quadruples the channel count while halving resolution;
    a 1x1 convolution then fuses the sub-pixel copies back to `channels`.
    """

    def __init__(self, name, channels, rng, dtype=np.float32):
        self.name = name
        self.fuse = PointwiseLayer(f"{name}.fuse", 4 * channels, channels, rng, dtype=dtype)

    def __call__(self, shallow: FeatureMap, target_level: int) -> engine.Tensor:
        if shallow.level != target_level - 1:
            raise ShapeError(
                f"re-org input must sit one level above its block; got level "
                f"{shallow.level} feeding level {target_level}")
        return self.fuse(engine.space_to_depth(shallow.tensor, block=2))

    def params(self):
        return self.fuse.params()


class CoreBlock:
    """Concatenation and re-organization fusion of up to three adjacent maps.

    Present inputs (re-organized shallow map, current map, upsampled deep
    map) are channel-concatenated, passed through a per-channel scale, fused
    by a 1x1 convolution back to `fuse_channels`, and activated. The output
    width never depends on how many inputs are present.
    """

    def __init__(self, name, fuse_channels, has_shallow, has_deep, rng, dtype=np.float32):
        self.name = name
        self.fuse_channels = fuse_channels
        self.has_shallow = has_shallow
        self.has_deep = has_deep
        self.reorg = Reorg(f"{name}.reorg", fuse_channels, rng, dtype) if has_shallow else None
        width = fuse_channels * (1 + int(has_shallow) + int(has_deep))
        self.scale = ChannelScale(f"{name}.scale", width, dtype)
        self.fuse = PointwiseLayer(f"{name}.fuse", width, fuse_channels, rng, dtype=dtype)

    def __call__(self, shallow, current, deep) -> FeatureMap:
        if current is None:
            raise ContractError(f"{self.name}: the current-level input is required")
        if (shallow is not None) != self.has_shallow or (deep is not None) != self.has_deep:
            raise ContractError(
                f"{self.name} was built for shallow={self.has_shallow} "
                f"deep={self.has_deep}; got shallow={shallow is not None} "
                f"deep={deep is not None}")
        parts = []
        if shallow is not None:
            parts.append(self.reorg(shallow, current.level))
        parts.append(current.tensor)
        if deep is not None:
            if deep.level != current.level + 1:
                raise ShapeError(
                    f"{self.name}: deep input at level {deep.level} must be one "
                    f"level below {current.level}")
            parts.append(engine.upsample2x(deep.tensor))
        x = engine.concat_channels(parts)
        x = self.scale(x)
        x = self.fuse(x)
        return FeatureMap(engine.leaky_relu(x, LEAKY_SLOPE), current.level)

    def params(self):
        out = [] if self.reorg is None else self.reorg.params()
        return out + self.scale.params() + self.fuse.params()


class FusionStage:
    """One path stage: a core block, an optional residual skip, a 3x3 conv.

    With a skip present the core output is added to a 1x1-projected,
    upsampled copy of the previous (one level coarser) stage output before
    the convolution module runs.
    """

    def __init__(self, name, fuse_channels, has_shallow, has_deep, has_skip,
                 rng, dtype=np.float32):
        self.name = name
        self.core = CoreBlock(name, fuse_channels, has_shallow, has_deep, rng, dtype)
        self.has_skip = has_skip
        self.skip_proj = (PointwiseLayer(f"{name}.skip", fuse_channels, fuse_channels,
                                         rng, dtype=dtype) if has_skip else None)
        self.conv = ConvLayer(f"{name}.conv", fuse_channels, fuse_channels, 3, rng,
                              pad=1, dtype=dtype)

    def __call__(self, shallow, current, deep, skip) -> FeatureMap:
        if (skip is not None) != self.has_skip:
            raise ContractError(
                f"{self.name} was built for skip={self.has_skip}; got "
                f"skip={skip is not None}")
        fused = self.core(shallow, current, deep)
        if skip is not None:
            if skip.level != current.level + 1:
                raise ShapeError(
                    f"{self.name}: skip at level {skip.level} must be one level "
                    f"below {current.level}")
            fused = FeatureMap(
                fused.tensor + self.skip_proj(engine.upsample2x(skip.tensor)),
                fused.level)
        out = engine.leaky_relu(self.conv(fused.tensor), LEAKY_SLOPE)
        return FeatureMap(out, fused.level)

    def params(self):
        out = self.core.params()
        if self.skip_proj is not None:
            out.extend(self.skip_proj.params())
        return out + self.conv.params()


class BiFusionPath:
    """One bi-fusion path over a staggered span of backbone levels.

    Stage s (1-based, deepest first) sits at span[s - 1] and fuses the
    backbone maps one level above, at, and one level below it, clipped at
    the pyramid boundaries. With residual fusion enabled, stage s >= 2 also
    receives stage s - 1's output as its skip input.
    """

    def __init__(self, name, path_index, config: PyramidConfig, rng, dtype=np.float32):
        self.name = name
        self.path_index = path_index
        self.config = config
        self.span = layer_span(path_index, config.num_levels, config.num_maps)
        self.stages = []
        for s, level in enumerate(self.span, start=1):
            self.stages.append(FusionStage(
                f"{name}.block{s}", config.fuse_channels,
                has_shallow=level - 1 >= 1,
                has_deep=level + 1 <= config.num_levels,
                has_skip=config.use_residual and s >= 2,
                rng=rng, dtype=dtype))

    def forward(self, backbone_maps):
        """Run all stages; returns outputs deepest first (one per span level)."""
        if len(backbone_maps) != self.config.num_levels:
            raise ConfigError(
                f"{self.name} needs all {self.config.num_levels} backbone levels, "
                f"got {len(backbone_maps)}")
        outputs = []
        for stage, level in zip(self.stages, self.span):
            shallow = backbone_maps[level - 2] if level - 1 >= 1 else None
            current = backbone_maps[level - 1]
            deep = backbone_maps[level] if level + 1 <= self.config.num_levels else None
            skip = outputs[-1] if (stage.has_skip and outputs) else None
            outputs.append(stage(shallow, current, deep, skip))
        return outputs

    def params(self):
        out = []
        for stage in self.stages:
            out.extend(stage.params())
        return out


def integrate_maps(integrators, path_outputs, num_levels):
    """Merge the s-th output of every path into the s-th prediction map.

    The target level for map s is num_levels - s + 1; each path's s-th
    output is resampled there, concatenated across paths in path order, and
    fused to the head width.
    """
    num_maps = len(integrators)
    merged = []
    for s in range(1, num_maps + 1):
        target = num_levels - s + 1
        aligned = [resample_to_level(outputs[s - 1], target).tensor
                   for outputs in path_outputs]
        fused = integrators[s - 1](engine.concat_channels(aligned))
        merged.append(FeatureMap(engine.leaky_relu(fused, LEAKY_SLOPE), target))
    return merged


class BottomUpFusion:
    """Bottom-up refinement over the prediction maps.

    The finest map passes through unchanged and seeds a running tensor that
    is repeatedly strided down (3x3 stride-2 conv), concatenated with the
    next coarser map, and fused back to the head width, replacing that map.
    """

    def __init__(self, name, config: PyramidConfig, rng, dtype=np.float32):
        self.name = name
        self.config = config
        c = config.head_channels
        finest = config.num_levels - config.num_maps + 1
        self.downs = {}
        self.fuses = {}
        # built in forward order: targets run from just above the finest
        # level up to the coarsest
        for level in range(finest + 1, config.num_levels + 1):
            self.downs[level] = ConvLayer(f"{name}.level{level}.down", c, c, 3, rng,
                                          stride=2, pad=1, dtype=dtype)
            self.fuses[level] = PointwiseLayer(f"{name}.level{level}.fuse", 2 * c, c,
                                               rng, dtype=dtype)

    def __call__(self, prediction_maps):
        """Refine maps given coarsest-first; returns the same order and shapes."""
        levels = [m.level for m in prediction_maps]
        if levels != self.config.prediction_levels():
            raise ShapeError(
                f"{self.name} expects maps at levels {self.config.prediction_levels()}, "
                f"got {levels}")
        out = list(prediction_maps)
        running = prediction_maps[-1]
        for i in range(len(out) - 2, -1, -1):
            target = out[i]
            down = engine.leaky_relu(self.downs[target.level](running.tensor), LEAKY_SLOPE)
            fused = self.fuses[target.level](
                engine.concat_channels([down, target.tensor]))
            running = FeatureMap(engine.leaky_relu(fused, LEAKY_SLOPE), target.level)
            out[i] = running
        return out

    def params(self):
        out = []
        for level in sorted(self.downs):
            out.extend(self.downs[level].params())
            out.extend(self.fuses[level].params())
        return out


class PyramidModel:
    """Backbone, fusion paths, map integration, and optional bottom-up pass."""

    def __init__(self, config: PyramidConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        self.backbone = Backbone("backbone", config, rng, dtype)
        self.paths = [BiFusionPath(f"path{n}", n, config, rng, dtype)
                      for n in range(1, config.num_paths + 1)]
        width = config.fuse_channels * config.num_paths
        self.integrators = [
            PointwiseLayer(f"integrate{s}", width, config.head_channels, rng, dtype=dtype)
            for s in range(1, config.num_maps + 1)]
        self.bfm = BottomUpFusion("bfm", config, rng, dtype) if config.use_bfm else None

    def forward(self, image: engine.Tensor):
        """Produce the prediction feature maps, coarsest first."""
        backbone_maps = self.backbone(image)
        path_outputs = [path.forward(backbone_maps) for path in self.paths]
        merged = integrate_maps(self.integrators, path_outputs, self.config.num_levels)
        if self.bfm is not None:
            merged = self.bfm(merged)
        return merged

    def params(self):
        out = self.backbone.params()
        for path in self.paths:
            out.extend(path.params())
        for integ in self.integrators:
            out.extend(integ.params())
        if self.bfm is not None:
            out.extend(self.bfm.params())
        return out


def export_topology(model: PyramidModel) -> str:
    """Describe the block graph in DOT, one node or edge per line.

    Nodes are blocks (backbone levels, path stages, integrators, bottom-up
    stages); edges are tensor flows, with residual skips tagged kind=skip.
    Ordering is deterministic for a given config.
    """
    config = model.config
    lines = ["digraph pyramid {"]
    for level in range(1, config.num_levels + 1):
        lines.append(f'  "backbone.level{level}" [label="backbone level {level}"];')
    for path in model.paths:
        for s, level in enumerate(path.span, start=1):
            kind = "re-core" if (config.use_residual and s >= 2) else "core"
            lines.append(f'  "{path.name}.block{s}" '
                         f'[label="path {path.path_index} {kind} (level {level})"];')
    for s in range(1, config.num_maps + 1):
        level = config.num_levels - s + 1
        lines.append(f'  "integrate{s}" [label="integrate map {s} (level {level})"];')
    if model.bfm is not None:
        for level in sorted(model.bfm.downs):
            lines.append(f'  "bfm.level{level}" [label="bottom-up fuse (level {level})"];')

    for level in range(1, config.num_levels):
        lines.append(f'  "backbone.level{level}" -> "backbone.level{level + 1}";')
    for path in model.paths:
        for s, level in enumerate(path.span, start=1):
            for src in (level - 1, level, level + 1):
                if 1 <= src <= config.num_levels:
                    lines.append(f'  "backbone.level{src}" -> "{path.name}.block{s}";')
            if config.use_residual and s >= 2:
                lines.append(f'  "{path.name}.block{s - 1}" -> "{path.name}.block{s}" '
                             f'[kind=skip, style=dashed];')
        for s in range(1, config.num_maps + 1):
            lines.append(f'  "{path.name}.block{s}" -> "integrate{s}";')
    if model.bfm is not None:
        finest = config.num_levels - config.num_maps + 1
        for level in sorted(model.bfm.downs):
            below = level - 1
            src = (f'"integrate{config.num_maps}"' if below == finest
                   else f'"bfm.level{below}"')
            lines.append(f'  {src} -> "bfm.level{level}";')
            feeding = config.num_levels - level + 1
            lines.append(f'  "integrate{feeding}" -> "bfm.level{level}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
