"""
Backbone feature pyramid and the fusion strategies applied on top of it.

Resampling between levels is cascaded one adjacent pair at a time: max-pool
stages going down the ladder (large to small) and learned transposed
convolutions going up. Every resampled block is batch-normalized right before
it is concatenated.
"""
import dataclasses
import logging
import math
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from rainbowssd.config import STEM_WIDTHS, FusionMode, PyramidConfig
from rainbowssd.exceptions import ConfigError, DimensionError
from rainbowssd.ops import (
    BatchNormParams,
    ConvParams,
    batch_norm,
    concat_channels,
    conv2d,
    conv_output_size,
    deconv2d,
    deconv_output_size,
    init_conv,
    init_deconv,
    max_pool2d,
    pool_output_size,
    relu,
)
from rainbowssd.tensor import Tensor, Tensor4

LOGGER = logging.getLogger(__name__)


class StagePlan(NamedTuple):
    """Kernel, stride and padding of one resampling stage"""

    kernel: int
    stride: int
    pad: int = 0
    ceil_mode: bool = False


class ShapeRow(NamedTuple):
    """One row of a pyramid shape table"""

    level: int
    h: int
    w: int
    c: int


def conv_plan(src: int, dst: int) -> StagePlan:
    """Backbone convolution taking a src x src map to dst x dst"""
    if dst == src:
        plan = StagePlan(3, 1, 1)
    elif math.ceil(src / 2) == dst:
        plan = StagePlan(3, 2, 1)
    elif src - 2 == dst:
        plan = StagePlan(3, 1, 0)
    elif dst == 1:
        plan = StagePlan(src, 1, 0)
    else:
        raise ConfigError(f"no convolution stage maps {src}x{src} to {dst}x{dst}")
    assert conv_output_size(src, plan.kernel, plan.stride, plan.pad) == dst
    return plan


def pool_plan(src: int, dst: int) -> StagePlan:
    """Max-pool stage taking a src x src map down to dst x dst"""
    if dst == 1:
        plan = StagePlan(src, 1)
    elif src >= 2 and pool_output_size(src, 2, 2, False) == dst:
        plan = StagePlan(2, 2)
    elif src >= 2 and pool_output_size(src, 2, 2, True) == dst:
        plan = StagePlan(2, 2, ceil_mode=True)
    elif src - 2 == dst:
        plan = StagePlan(3, 1)
    else:
        raise ConfigError(f"no pooling stage maps {src}x{src} to {dst}x{dst}")
    return plan


def deconv_plan(src: int, dst: int) -> StagePlan:
    """Transposed-convolution stage taking a src x src map up to dst x dst"""
    if dst == 2 * src:
        plan = StagePlan(2, 2, 0)
    elif dst == 2 * src - 1:
        plan = StagePlan(3, 2, 1)
    elif dst == src + 2:
        plan = StagePlan(3, 1, 0)
    elif src == 1:
        plan = StagePlan(dst, 1, 0)
    else:
        raise ConfigError(f"no deconvolution stage maps {src}x{src} to {dst}x{dst}")
    computed = deconv_output_size(src, plan.kernel, plan.stride, plan.pad)
    if computed != dst:
        raise ConfigError(
            f"deconvolution plan for {src}->{dst} produces {computed}, expected {dst}"
        )
    return plan


def stem_ladder(input_size: int, first_level: int) -> List[int]:
    """
    Spatial sizes visited by repeated stride-2 stages from the input down to
    the first pyramid level, both ends included.
    """
    sizes = [input_size]
    while sizes[-1] > first_level:
        sizes.append(math.ceil(sizes[-1] / 2))
    if sizes[-1] != first_level:
        raise ConfigError(
            f"input {input_size} does not reach first level {first_level} by "
            f"stride-2 stages: computed ladder {sizes}, expected it to hit {first_level}"
        )
    return sizes


@dataclasses.dataclass
class Pyramid:
    """One feature tensor per level, largest spatial size first"""

    features: List[Tensor4]

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self) -> Iterator[Tensor4]:
        return iter(self.features)

    def __getitem__(self, idx: int) -> Tensor4:
        return self.features[idx]

    def shapes(self) -> List[ShapeRow]:
        """Observed (level, h, w, c) rows"""
        return [ShapeRow(i, f.h, f.w, f.c) for i, f in enumerate(self.features)]


class ConvBlock:
    """conv -> batch norm -> relu"""

    def __init__(self, conv: ConvParams, bn: BatchNormParams) -> None:
        self.conv = conv
        self.bn = bn

    def __call__(self, x: Tensor4, training: bool) -> Tensor4:
        return relu(batch_norm(conv2d(x, self.conv), self.bn, training))  # type: ignore[return-value]

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.conv.weight", self.conv.weight
        yield f"{prefix}.conv.bias", self.conv.bias
        yield from bn_parameters(prefix + ".bn", self.bn)

    def named_buffers(self, prefix: str) -> Iterator[Tuple[str, np.ndarray]]:
        yield from bn_buffers(prefix + ".bn", self.bn)


def bn_parameters(prefix: str, bn: BatchNormParams) -> Iterator[Tuple[str, Tensor]]:
    """Learned batch-norm tensors under `prefix`"""
    yield f"{prefix}.gamma", bn.gamma
    yield f"{prefix}.beta", bn.beta


def bn_buffers(prefix: str, bn: BatchNormParams) -> Iterator[Tuple[str, np.ndarray]]:
    """Running statistics under `prefix`"""
    yield f"{prefix}.running_mean", bn.running_mean
    yield f"{prefix}.running_var", bn.running_var


def _conv_block(
    rng: np.random.Generator, in_c: int, out_c: int, plan: StagePlan, name: str
) -> ConvBlock:
    conv = init_conv(
        rng, in_c, out_c, plan.kernel, stride=plan.stride, pad=plan.pad, name=name
    )
    return ConvBlock(conv, BatchNormParams.create(out_c, name=f"{name}.bn"))


class Backbone:
    """
    Plain stack of conv blocks: stride-2 stem stages down to the first level,
    then per level a 1x1 reduction followed by the spatial stage that hits the
    level's size.
    """

    def __init__(self, cfg: PyramidConfig, seed: int = 0) -> None:
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        sizes = cfg.spatial_sizes
        ladder = stem_ladder(cfg.input_size, sizes[0])

        self.stem: List[ConvBlock] = []
        in_c = 3
        for idx in range(len(ladder) - 2):
            out_c = cfg.scale(STEM_WIDTHS[min(idx, len(STEM_WIDTHS) - 1)])
            plan = conv_plan(ladder[idx], ladder[idx + 1])
            self.stem.append(_conv_block(rng, in_c, out_c, plan, f"stem{idx}"))
            in_c = out_c

        self.levels: List[Tuple[ConvBlock, ConvBlock]] = []
        prev_size = ladder[-2] if len(ladder) > 1 else ladder[0]
        for idx, (size, out_c, mid_c) in enumerate(
            zip(sizes, cfg.level_channels, cfg.mid_channels)
        ):
            reduce = _conv_block(rng, in_c, mid_c, StagePlan(1, 1, 0), f"level{idx}.reduce")
            spatial = _conv_block(
                rng, mid_c, out_c, conv_plan(prev_size, size), f"level{idx}.spatial"
            )
            self.levels.append((reduce, spatial))
            in_c = out_c
            prev_size = size

    def __call__(self, images: Tensor4, training: bool = False) -> Pyramid:
        if images.c != 3:
            raise DimensionError(f"backbone input axis c must be 3, got {images.c}")
        if (images.h, images.w) != (self.cfg.input_size, self.cfg.input_size):
            raise DimensionError(
                f"backbone input axis h/w is {images.h}x{images.w}, expected "
                f"{self.cfg.input_size}x{self.cfg.input_size}"
            )
        x = images
        for block in self.stem:
            x = block(x, training)
        features = []
        for reduce, spatial in self.levels:
            x = spatial(reduce(x, training), training)
            features.append(x)
        return Pyramid(features)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for idx, block in enumerate(self.stem):
            yield from block.named_parameters(f"backbone.stem{idx}")
        for idx, (reduce, spatial) in enumerate(self.levels):
            yield from reduce.named_parameters(f"backbone.level{idx}.reduce")
            yield from spatial.named_parameters(f"backbone.level{idx}.spatial")

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for idx, block in enumerate(self.stem):
            yield from block.named_buffers(f"backbone.stem{idx}")
        for idx, (reduce, spatial) in enumerate(self.levels):
            yield from reduce.named_buffers(f"backbone.level{idx}.reduce")
            yield from spatial.named_buffers(f"backbone.level{idx}.spatial")

    def parameter_count(self) -> int:
        """Number of learned scalars"""
        return sum(t.size for _, t in self.named_parameters())


def build_backbone(cfg: PyramidConfig, seed: int = 0) -> Backbone:
    """Deterministically initialized backbone for `cfg`"""
    backbone = Backbone(cfg, seed)
    LOGGER.debug(
        "built backbone: %d stem stages, %d levels, %d parameters",
        len(backbone.stem),
        len(backbone.levels),
        backbone.parameter_count(),
    )
    return backbone


class FusionParams:
    """
    Learned state of a fusion strategy: batch norms keyed by the block they
    normalize and transposed-convolution stages keyed by the edge they cross.
    """

    def __init__(self, cfg: PyramidConfig, mode: FusionMode) -> None:
        self.cfg = cfg
        self.mode = mode
        self.bn: Dict[str, BatchNormParams] = {}
        self.deconv: Dict[str, ConvParams] = {}
        sizes = cfg.spatial_sizes
        channels = cfg.level_channels
        levels = len(sizes)

        if mode == FusionMode.POOL_CONCAT:
            stack = 0
            for i in range(levels):
                self._add_bn(f"own{i}", channels[i])
                if i > 0:
                    pool_plan(sizes[i - 1], sizes[i])
                    self._add_bn(f"stack{i}", stack)
                stack += channels[i]
        elif mode == FusionMode.DECONV_CONCAT:
            stack = 0
            for i in reversed(range(levels)):
                self._add_bn(f"own{i}", channels[i])
                if i < levels - 1:
                    self._add_deconv(f"stack.{i + 1}to{i}", stack, sizes[i + 1], sizes[i])
                    self._add_bn(f"stack{i}", stack)
                stack += channels[i]
        elif mode == FusionMode.RAINBOW:
            for j in range(levels):
                for i in range(levels):
                    self._add_bn(f"{j}to{i}", channels[j])
                for i in range(j - 1, -1, -1):
                    self._add_deconv(f"{j}.{i + 1}to{i}", channels[j], sizes[i + 1], sizes[i])
                for i in range(j + 1, levels):
                    pool_plan(sizes[i - 1], sizes[i])

    def _add_bn(self, key: str, channels: int) -> None:
        self.bn[key] = BatchNormParams.create(channels, name=f"fusion.bn.{key}")

    def _add_deconv(self, key: str, channels: int, src: int, dst: int) -> None:
        plan = deconv_plan(src, dst)
        self.deconv[key] = init_deconv(
            channels,
            plan.kernel,
            stride=plan.stride,
            pad=plan.pad,
            name=f"fusion.deconv.{key}",
        )

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for key, bn in self.bn.items():
            yield from bn_parameters(f"fusion.bn.{key}", bn)
        for key, params in self.deconv.items():
            yield f"fusion.deconv.{key}.weight", params.weight
            yield f"fusion.deconv.{key}.bias", params.bias

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for key, bn in self.bn.items():
            yield from bn_buffers(f"fusion.bn.{key}", bn)


def build_fusion(cfg: PyramidConfig, mode: FusionMode) -> FusionParams:
    """Fusion parameters for `mode`; conventional mode has none"""
    return FusionParams(cfg, mode)


def _check_levels(p: Pyramid, cfg: PyramidConfig) -> None:
    if len(p) != cfg.num_levels:
        raise ConfigError(f"pyramid has {len(p)} levels, config has {cfg.num_levels}")
    for idx, (feature, size) in enumerate(zip(p, cfg.spatial_sizes)):
        if feature.h != size or feature.w != size:
            raise ConfigError(
                f"level {idx} is {feature.h}x{feature.w}, config expects {size}x{size}"
            )


def _pool(x: Tensor4, src: int, dst: int) -> Tensor4:
    plan = pool_plan(src, dst)
    y = max_pool2d(x, plan.kernel, plan.stride, plan.ceil_mode)
    if y.h != dst:
        raise ConfigError(f"pooling {src}->{dst} produced {y.h}x{y.w}")
    return y


def _deconv(x: Tensor4, params: ConvParams, dst: int) -> Tensor4:
    y = deconv2d(x, params)
    if y.h != dst:
        raise ConfigError(f"deconvolution to {dst} produced {y.h}x{y.w}")
    return y


def fuse_pooling(p: Pyramid, params: FusionParams, training: bool = False) -> Pyramid:
    """
    Cascade downward: each level receives the previous level's fused stack
    max-pooled to its size, concatenated after its own channels.
    """
    cfg = params.cfg
    _check_levels(p, cfg)
    sizes = cfg.spatial_sizes
    outputs: List[Tensor4] = []
    for i, feature in enumerate(p):
        own = batch_norm(feature, params.bn[f"own{i}"], training)
        if i == 0:
            outputs.append(own)
            continue
        pooled = _pool(outputs[-1], sizes[i - 1], sizes[i])
        stack = batch_norm(pooled, params.bn[f"stack{i}"], training)
        outputs.append(concat_channels([own, stack]))
    return Pyramid(outputs)


def fuse_deconv(p: Pyramid, params: FusionParams, training: bool = False) -> Pyramid:
    """
    Cascade upward: each level receives the next smaller level's fused stack
    deconvolved to its size, concatenated after its own channels.
    """
    cfg = params.cfg
    _check_levels(p, cfg)
    sizes = cfg.spatial_sizes
    levels = len(sizes)
    outputs: List[Optional[Tensor4]] = [None] * levels
    for i in reversed(range(levels)):
        own = batch_norm(p[i], params.bn[f"own{i}"], training)
        if i == levels - 1:
            outputs[i] = own
            continue
        above = outputs[i + 1]
        assert above is not None
        up = _deconv(above, params.deconv[f"stack.{i + 1}to{i}"], sizes[i])
        stack = batch_norm(up, params.bn[f"stack{i}"], training)
        outputs[i] = concat_channels([own, stack])
    return Pyramid([out for out in outputs if out is not None])


def fuse_rainbow(p: Pyramid, params: FusionParams, training: bool = False) -> Pyramid:
    """
    Every level receives every base level resampled to its size (cascaded
    pooling from larger levels, cascaded deconvolution from smaller ones),
    batch-normalized per block and concatenated in base-level order.
    """
    cfg = params.cfg
    _check_levels(p, cfg)
    sizes = cfg.spatial_sizes
    levels = len(sizes)
    resampled: List[List[Optional[Tensor4]]] = [[None] * levels for _ in range(levels)]
    for j in range(levels):
        resampled[j][j] = p[j]
        for i in range(j + 1, levels):
            below = resampled[j][i - 1]
            assert below is not None
            resampled[j][i] = _pool(below, sizes[i - 1], sizes[i])
        for i in range(j - 1, -1, -1):
            above = resampled[j][i + 1]
            assert above is not None
            resampled[j][i] = _deconv(above, params.deconv[f"{j}.{i + 1}to{i}"], sizes[i])

    outputs = []
    for i in range(levels):
        blocks = []
        for j in range(levels):
            block = resampled[j][i]
            assert block is not None
            blocks.append(batch_norm(block, params.bn[f"{j}to{i}"], training))
        outputs.append(concat_channels(blocks))
    return Pyramid(outputs)


def fuse(p: Pyramid, params: FusionParams, training: bool = False) -> Pyramid:
    """Dispatch on the fusion mode; conventional mode returns `p` itself"""
    if params.mode == FusionMode.CONVENTIONAL:
        return p
    if params.mode == FusionMode.POOL_CONCAT:
        return fuse_pooling(p, params, training)
    if params.mode == FusionMode.DECONV_CONCAT:
        return fuse_deconv(p, params, training)
    return fuse_rainbow(p, params, training)


def fused_channels(channels: Sequence[int], mode: FusionMode) -> List[int]:
    """Per-level channel counts after fusion"""
    if mode == FusionMode.CONVENTIONAL:
        return list(channels)
    if mode == FusionMode.POOL_CONCAT:
        return [sum(channels[: i + 1]) for i in range(len(channels))]
    if mode == FusionMode.DECONV_CONCAT:
        return [sum(channels[i:]) for i in range(len(channels))]
    return [sum(channels)] * len(channels)


def pyramid_shape_table(cfg: PyramidConfig, mode: FusionMode) -> List[ShapeRow]:
    """
    Shapes the fused pyramid will have, computed without allocating tensors.
    Stage plans are resolved so an unreachable ladder fails here as well.
    """
    sizes = cfg.spatial_sizes
    stem_ladder(cfg.input_size, sizes[0])
    for src, dst in zip(sizes, sizes[1:]):
        conv_plan(src, dst)
        if mode in (FusionMode.POOL_CONCAT, FusionMode.RAINBOW):
            pool_plan(src, dst)
        if mode in (FusionMode.DECONV_CONCAT, FusionMode.RAINBOW):
            deconv_plan(dst, src)
    channels = fused_channels(cfg.level_channels, mode)
    return [ShapeRow(i, s, s, c) for i, (s, c) in enumerate(zip(sizes, channels))]
