from fractions import Fraction

import numpy as np
import pytest

from rainbowssd.autograd import GradTape
from rainbowssd.config import (
    CANONICAL_300,
    ISSD_300,
    BoxLayout,
    FusionMode,
    PyramidConfig,
    canonical_pyramid,
    toy_pyramid,
)
from rainbowssd.exceptions import ConfigError
from rainbowssd.heads import build_heads
from rainbowssd.ops import concat, reshape
from rainbowssd.pyramid import (
    Pyramid,
    StagePlan,
    build_backbone,
    build_fusion,
    conv_plan,
    deconv_plan,
    fuse,
    fuse_rainbow,
    fused_channels,
    pool_plan,
    pyramid_shape_table,
    stem_ladder,
)
from rainbowssd.tensor import Tensor4, set_default_dtype
from tests.helpers import numeric_grad, rel_error

CANONICAL_CHANNELS = [512, 1024, 512, 256, 256, 256]


def flatten_levels(p: Pyramid):
    """All levels as one (n, -1) tensor"""
    n = p[0].n
    return concat([reshape(f, (n, -1)) for f in p], 1)


def random_pyramid(rng, cfg: PyramidConfig, n: int = 3) -> Pyramid:
    """Backbone-shaped random features"""
    return Pyramid(
        [
            Tensor4(rng.normal(size=(n, c, s, s)), name=f"level{i}")
            for i, (s, c) in enumerate(zip(cfg.spatial_sizes, cfg.level_channels))
        ]
    )


def test_canonical_conventional_table():
    """Conventional shapes are the backbone ladder itself"""
    rows = pyramid_shape_table(canonical_pyramid(300), FusionMode.CONVENTIONAL)
    assert [(r.h, r.w, r.c) for r in rows] == [
        (s, s, c) for s, c in zip((38, 19, 10, 5, 3, 1), CANONICAL_CHANNELS)
    ]


def test_canonical_rainbow_table():
    """Every rainbow level carries all 2816 base channels"""
    rows = pyramid_shape_table(canonical_pyramid(300), FusionMode.RAINBOW)
    assert len(rows) == 6
    assert all(r.c == 2816 for r in rows)


def test_canonical_pool_table():
    """Pooling accumulates channels down the ladder"""
    rows = pyramid_shape_table(canonical_pyramid(300), FusionMode.POOL_CONCAT)
    assert rows[0].c == 512
    assert rows[1].c == 1536
    assert rows[-1].c == 2816


def test_canonical_deconv_table():
    """Deconvolution accumulates channels up the ladder"""
    rows = pyramid_shape_table(canonical_pyramid(300), FusionMode.DECONV_CONCAT)
    assert rows[0].c == 2816
    assert rows[4].c == 512
    assert rows[5].c == 256


def test_canonical_512_rainbow_table():
    """The seven-level ladder resolves every stage plan"""
    rows = pyramid_shape_table(canonical_pyramid(512), FusionMode.RAINBOW)
    assert [r.h for r in rows] == [64, 32, 16, 8, 4, 2, 1]
    assert rows[0].c == 3072


def test_toy_tables():
    """The 1/16 toy ladder fuses to 160 channels"""
    cfg = toy_pyramid()
    assert cfg.level_channels == (32, 64, 32, 16, 16)
    rows = pyramid_shape_table(cfg, FusionMode.RAINBOW)
    assert [r.c for r in rows] == [160] * 5
    rows = pyramid_shape_table(cfg, FusionMode.CONVENTIONAL)
    assert [(r.h, r.c) for r in rows] == [(12, 32), (6, 64), (3, 32), (2, 16), (1, 16)]


@pytest.mark.parametrize(
    "mode,expected",
    [
        (FusionMode.CONVENTIONAL, [4, 8, 4, 2]),
        (FusionMode.POOL_CONCAT, [4, 12, 16, 18]),
        (FusionMode.DECONV_CONCAT, [18, 14, 6, 2]),
        (FusionMode.RAINBOW, [18, 18, 18, 18]),
    ],
)
def test_fused_channels(tiny_pyramid, mode, expected):
    """Channel arithmetic of every fusion mode"""
    assert fused_channels(tiny_pyramid.level_channels, mode) == expected


@pytest.mark.parametrize("mode", list(FusionMode))
def test_forward_matches_table(rng, tiny_pyramid, mode):
    """A real forward pass has exactly the tabulated shapes"""
    backbone = build_backbone(tiny_pyramid, seed=3)
    params = build_fusion(tiny_pyramid, mode)
    images = Tensor4(rng.uniform(size=(2, 3, 24, 24)))
    for training in (True, False):
        fused = fuse(backbone(images, training), params, training)
        rows = pyramid_shape_table(tiny_pyramid, mode)
        assert [tuple(r) for r in fused.shapes()] == [(r.level, r.h, r.w, r.c) for r in rows]
        for feature in fused:
            assert np.all(np.isfinite(feature.data))


@pytest.mark.slow
@pytest.mark.parametrize(
    "mode,layout,boxes",
    [
        (FusionMode.CONVENTIONAL, "conventional", 8732),
        (FusionMode.POOL_CONCAT, "conventional", 8732),
        (FusionMode.DECONV_CONCAT, "conventional", 8732),
        (FusionMode.RAINBOW, "shared-4", 7760),
        (FusionMode.RAINBOW, "shared-6", 11640),
    ],
)
def test_canonical_forward(rng, restore_dtype, mode, layout, boxes):
    """Executed canonical 300 fusion and heads match the shape table and box counts"""
    set_default_dtype(np.float32)
    cfg = canonical_pyramid(300)
    p = random_pyramid(rng, cfg, n=1)
    assert [(f.h, f.c) for f in p] == list(zip((38, 19, 10, 5, 3, 1), CANONICAL_CHANNELS))

    fused = fuse(p, build_fusion(cfg, mode), training=False)
    rows = pyramid_shape_table(cfg, mode)
    assert [tuple(r) for r in fused.shapes()] == [(r.level, r.h, r.w, r.c) for r in rows]
    if mode is FusionMode.RAINBOW:
        assert {f.c for f in fused} == {2816}

    channels = [f.c for f in fused]
    heads = build_heads(channels, BoxLayout.parse(layout, cfg.num_levels), num_classes=21)
    out = heads(fused)
    assert out.logits.shape == (1, boxes, 21)
    assert out.offsets.shape == (1, boxes, 4)


def test_conventional_is_identity(rng, tiny_pyramid):
    """Conventional fusion returns its input untouched"""
    p = random_pyramid(rng, tiny_pyramid)
    assert fuse(p, build_fusion(tiny_pyramid, FusionMode.CONVENTIONAL)) is p


def test_single_level_rainbow(rng):
    """With one level rainbow fusion reduces to batch norm"""
    cfg = PyramidConfig(levels=((2, 8),), input_size=8)
    p = random_pyramid(rng, cfg)
    fused = fuse_rainbow(p, build_fusion(cfg, FusionMode.RAINBOW), training=False)
    assert len(fused) == 1
    np.testing.assert_allclose(fused[0].data, p[0].data / np.sqrt(1 + 1e-5))


def test_rainbow_blocks_in_level_order(rng, tiny_pyramid):
    """Each fused level starts with the normalized block of base level 0"""
    p = random_pyramid(rng, tiny_pyramid)
    params = build_fusion(tiny_pyramid, FusionMode.RAINBOW)
    fused = fuse_rainbow(p, params, training=False)
    scale = 1 / np.sqrt(1 + 1e-5)
    np.testing.assert_allclose(fused[0].data[:, :4], p[0].data * scale)
    np.testing.assert_allclose(fused[3].data[:, 16:], p[3].data * scale)


def test_rainbow_fusion_grads(rng, tiny_pyramid):
    """Gradients through pooling and deconvolution agree with finite differences"""
    p = random_pyramid(rng, tiny_pyramid)
    params = build_fusion(tiny_pyramid, FusionMode.RAINBOW)

    def op():
        return flatten_levels(fuse_rainbow(p, params, training=True))

    with GradTape() as tape:
        out = op()
    upstream = rng.normal(size=out.shape)
    grads = tape.backward(upstream)

    def loss() -> float:
        return float(np.sum(op().data * upstream))

    for tensor in (p[3], p[1], params.deconv["3.1to0"].weight, params.bn["2to0"].gamma):
        assert rel_error(grads[tensor], numeric_grad(loss, tensor.data)) < 1e-4


@pytest.mark.parametrize("mode", [FusionMode.POOL_CONCAT, FusionMode.DECONV_CONCAT, FusionMode.RAINBOW])
def test_gradient_reaches_every_parameter(rng, tiny_pyramid, mode):
    """Training-mode backward touches the stem and every fusion parameter"""
    backbone = build_backbone(tiny_pyramid)
    params = build_fusion(tiny_pyramid, mode)
    images = Tensor4(rng.uniform(size=(4, 3, 24, 24)), requires_grad=False)
    with GradTape() as tape:
        out = flatten_levels(fuse(backbone(images, True), params, True))
    grads = tape.backward(rng.normal(size=out.shape))
    named = list(backbone.named_parameters()) + list(params.named_parameters())
    for name, tensor in named:
        if name.endswith(".bias"):
            # every conv feeds a training-mode batch norm, which cancels its bias
            continue
        assert np.any(grads[tensor] != 0), name


def test_deconv_keys(tiny_pyramid):
    """Rainbow owns one upsampler per edge crossed by each base level"""
    params = build_fusion(tiny_pyramid, FusionMode.RAINBOW)
    assert sorted(params.deconv) == sorted(
        f"{j}.{i + 1}to{i}" for j in range(4) for i in range(j - 1, -1, -1)
    )
    assert len(params.bn) == 16
    params = build_fusion(tiny_pyramid, FusionMode.DECONV_CONCAT)
    assert sorted(params.deconv) == ["stack.1to0", "stack.2to1", "stack.3to2"]
    assert params.deconv["stack.1to0"].weight.shape == (14, 14, 2, 2)


def test_issd_widens_backbone():
    """The increased-channel table adds parameters"""
    base = PyramidConfig(levels=CANONICAL_300, input_size=300, channel_scale=Fraction(1, 32))
    wide = PyramidConfig(
        levels=CANONICAL_300, input_size=300, channel_scale=Fraction(1, 32), issd_channels=ISSD_300
    )
    assert base.level_channels == (16, 32, 16, 8, 8, 8)
    assert wide.level_channels == (64,) * 6
    assert build_backbone(wide).parameter_count() > build_backbone(base).parameter_count()


def test_issd_unknown_stage():
    """Override keys must name a pyramid stage"""
    with pytest.raises(ConfigError):
        PyramidConfig(levels=CANONICAL_300, input_size=300, issd_channels={"conv99": (1, 2)})
    with pytest.raises(ConfigError):
        PyramidConfig(levels=CANONICAL_300, input_size=300, issd_channels={"conv12": (1, 2)})


@pytest.mark.parametrize(
    "src,dst,plan",
    [(75, 38, StagePlan(3, 2, 1)), (38, 38, StagePlan(3, 1, 1)), (3, 1, StagePlan(3, 1, 0)), (2, 1, StagePlan(3, 2, 1))],
)
def test_conv_plan(src, dst, plan):
    """Backbone stage selection"""
    assert conv_plan(src, dst) == plan


@pytest.mark.parametrize(
    "src,dst,plan",
    [
        (38, 19, StagePlan(2, 2)),
        (19, 10, StagePlan(2, 2, ceil_mode=True)),
        (5, 3, StagePlan(2, 2, ceil_mode=True)),
        (3, 1, StagePlan(3, 1)),
    ],
)
def test_pool_plan(src, dst, plan):
    """Downsampling stage selection"""
    assert pool_plan(src, dst) == plan


@pytest.mark.parametrize(
    "src,dst,plan",
    [
        (19, 38, StagePlan(2, 2, 0)),
        (10, 19, StagePlan(3, 2, 1)),
        (5, 10, StagePlan(2, 2, 0)),
        (3, 5, StagePlan(3, 2, 1)),
        (1, 3, StagePlan(3, 1, 0)),
        (1, 7, StagePlan(7, 1, 0)),
    ],
)
def test_deconv_plan(src, dst, plan):
    """Upsampling stage selection"""
    assert deconv_plan(src, dst) == plan


def test_unreachable_plans():
    """Ladders with no matching stage are configuration errors"""
    with pytest.raises(ConfigError):
        deconv_plan(5, 17)
    with pytest.raises(ConfigError):
        pool_plan(20, 7)
    with pytest.raises(ConfigError):
        conv_plan(20, 7)
    cfg = PyramidConfig(levels=((20, 8), (7, 8)), input_size=40)
    with pytest.raises(ConfigError):
        pyramid_shape_table(cfg, FusionMode.RAINBOW)


def test_stem_ladder():
    """Stride-2 stages from the input to the first level"""
    assert stem_ladder(300, 38) == [300, 150, 75, 38]
    assert stem_ladder(96, 12) == [96, 48, 24, 12]
    with pytest.raises(ConfigError, match="does not reach"):
        stem_ladder(100, 38)


def test_ladder_must_decrease():
    """Level sizes strictly decrease"""
    with pytest.raises(ConfigError):
        PyramidConfig(levels=((4, 8), (4, 8)), input_size=8).validate()
