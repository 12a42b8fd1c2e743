import dataclasses
import json
import logging
import os
from enum import Enum
from fractions import Fraction
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from rainbowssd.exceptions import ConfigError

LOGGER = logging.getLogger(__name__)

VOC_CLASSES = (
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
)

SHAPE_CLASSES = ("disc", "square", "triangle")

# Names of the level-producing stages of the SSD feature pyramid, used as
# aliases in the increased-channel override table.
STAGE_NAMES = ("conv4", "conv7", "conv8", "conv9", "conv10", "conv11", "conv12")

STEM_WIDTHS = (64, 128, 256)


class FusionMode(Enum):
    """Which feature-pyramid fusion is applied before the classifiers"""

    CONVENTIONAL = "conventional"
    POOL_CONCAT = "pool"
    DECONV_CONCAT = "deconv"
    RAINBOW = "rainbow"

    @classmethod
    def parse(cls, value: Union[str, "FusionMode"]) -> "FusionMode":
        """Accept enum members, values or member names in any case"""
        if isinstance(value, FusionMode):
            return value
        key = str(value).strip().lower()
        for mode in cls:
            if key in (mode.value, mode.name.lower()):
                return mode
        raise ConfigError(
            f"unknown fusion mode {value!r}, expected one of "
            f"{', '.join(mode.value for mode in cls)}"
        )


def parse_scale(value: Union[str, float, int, Fraction]) -> Fraction:
    """Parse a positive rational such as 1/16, 0.0625 or 1"""
    try:
        scale = Fraction(str(value)) if not isinstance(value, Fraction) else value
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"invalid channel_scale {value!r}") from exc
    if scale <= 0:
        raise ConfigError(f"channel_scale must be positive, got {value!r}")
    return scale


@dataclasses.dataclass
class PyramidConfig:
    """
    Declarative description of the feature pyramid: (spatial, channels) per
    level from largest to smallest, the input size, a channel scale for
    shrunken configs and an optional per-level (mid, out) channel override.
    """

    levels: Tuple[Tuple[int, int], ...]
    input_size: int
    channel_scale: Fraction = Fraction(1)
    issd_channels: Optional[Dict[int, Tuple[int, int]]] = None

    def __post_init__(self) -> None:
        self.levels = tuple((int(s), int(c)) for s, c in self.levels)
        self.channel_scale = parse_scale(self.channel_scale)
        if self.issd_channels is not None:
            self.issd_channels = _normalize_issd(self.issd_channels, len(self.levels))

    def scale(self, channels: int) -> int:
        """Apply channel_scale, never dropping below one channel"""
        return max(1, round(channels * self.channel_scale))

    @property
    def spatial_sizes(self) -> Tuple[int, ...]:
        return tuple(s for s, _ in self.levels)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def level_channels(self) -> Tuple[int, ...]:
        """Scaled backbone output channels per level, overrides applied"""
        result = []
        for idx, (_, channels) in enumerate(self.levels):
            if self.issd_channels and idx in self.issd_channels:
                channels = self.issd_channels[idx][1]
            result.append(self.scale(channels))
        return tuple(result)

    @property
    def mid_channels(self) -> Tuple[int, ...]:
        """Scaled 1x1 reduction width inside each level block"""
        result = []
        for idx, (_, channels) in enumerate(self.levels):
            mid = max(1, channels // 2)
            if self.issd_channels and idx in self.issd_channels:
                mid = self.issd_channels[idx][0]
            result.append(self.scale(mid))
        return tuple(result)

    def validate(self) -> None:
        """Check ladder ordering and sizes"""
        if not self.levels:
            raise ConfigError("pyramid config needs at least one level")
        if self.input_size < 1:
            raise ConfigError(f"input_size must be positive, got {self.input_size}")
        sizes = self.spatial_sizes
        for idx, (spatial, channels) in enumerate(self.levels):
            if spatial < 1 or channels < 1:
                raise ConfigError(f"level {idx} has non-positive size {spatial}/{channels}")
        for idx in range(1, len(sizes)):
            if sizes[idx] >= sizes[idx - 1]:
                raise ConfigError(
                    f"level spatial sizes must strictly decrease, got {list(sizes)}"
                )
        if sizes[0] > self.input_size:
            raise ConfigError(
                f"first level {sizes[0]} is larger than input_size {self.input_size}"
            )

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly pyramid section read back by `run_config_from_dict`"""
        return {
            "input_size": self.input_size,
            "levels": [list(level) for level in self.levels],
            "channel_scale": str(self.channel_scale),
            "issd_channels": (
                None
                if self.issd_channels is None
                else {str(k): list(v) for k, v in sorted(self.issd_channels.items())}
            ),
        }


def _normalize_issd(
    table: Mapping[Any, Sequence[int]], num_levels: int
) -> Dict[int, Tuple[int, int]]:
    result: Dict[int, Tuple[int, int]] = {}
    for key, value in table.items():
        if isinstance(key, str) and key in STAGE_NAMES:
            idx = STAGE_NAMES.index(key)
        else:
            try:
                idx = int(key)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"unknown issd_channels stage {key!r}") from exc
        if not 0 <= idx < num_levels:
            raise ConfigError(f"issd_channels stage {key!r} has no pyramid level")
        if len(value) != 2 or min(value) < 1:
            raise ConfigError(f"issd_channels {key!r} must be a (mid, out) pair")
        result[idx] = (int(value[0]), int(value[1]))
    return result


@dataclasses.dataclass
class BoxLayout:
    """Default boxes per position for each level and classifier sharing"""

    boxes_per_position: Tuple[int, ...]
    shared_classifier: bool = False

    def __post_init__(self) -> None:
        self.boxes_per_position = tuple(int(k) for k in self.boxes_per_position)

    @classmethod
    def conventional(cls, num_levels: int) -> "BoxLayout":
        """4 boxes on the first and last two levels, 6 in between"""
        boxes = [6] * num_levels
        for idx in (0, num_levels - 2, num_levels - 1):
            if 0 <= idx < num_levels:
                boxes[idx] = 4
        return cls(tuple(boxes), shared_classifier=False)

    @classmethod
    def shared(cls, boxes: int, num_levels: int) -> "BoxLayout":
        """Uniform layout with a single classifier shared by all levels"""
        return cls((boxes,) * num_levels, shared_classifier=True)

    @classmethod
    def parse(cls, value: Any, num_levels: int, shared: Optional[bool] = None) -> "BoxLayout":
        """Accept 'conventional', 'shared-4', 'shared-6' or an explicit list"""
        if isinstance(value, BoxLayout):
            return value
        if isinstance(value, str):
            if value == "conventional":
                layout = cls.conventional(num_levels)
            elif value in ("shared-4", "shared-6"):
                layout = cls.shared(int(value[-1]), num_levels)
            else:
                raise ConfigError(f"unknown box layout {value!r}")
        else:
            layout = cls(tuple(value), shared_classifier=bool(shared))
        if shared is not None:
            layout = dataclasses.replace(layout, shared_classifier=shared)
        return layout

    @property
    def uniform(self) -> bool:
        return len(set(self.boxes_per_position)) <= 1

    def validate(self, num_levels: int) -> None:
        """Check the layout against the number of pyramid levels"""
        if len(self.boxes_per_position) != num_levels:
            raise ConfigError(
                f"box layout has {len(self.boxes_per_position)} entries "
                f"for {num_levels} pyramid levels"
            )
        for k in self.boxes_per_position:
            if k not in (4, 6):
                raise ConfigError(f"boxes per position must be 4 or 6, got {k}")
        if self.shared_classifier and not self.uniform:
            raise ConfigError(
                "a shared classifier needs the same boxes per position on every level"
            )

    def describe(self) -> str:
        """Short human label"""
        if self.shared_classifier:
            return f"shared-{self.boxes_per_position[0]}"
        return "per-level " + ",".join(str(k) for k in self.boxes_per_position)


@dataclasses.dataclass
class TrainOptions:
    """Training schedule and optimizer settings"""

    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-3
    milestones: Tuple[int, ...] = ()
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: Optional[float] = 10.0
    seed: int = 0
    neg_pos_ratio: float = 3.0
    match_iou: float = 0.5
    flip: bool = True
    unshare_at_step: Optional[int] = None
    dtype: str = "float64"
    log_every: int = 50

    def __post_init__(self) -> None:
        self.milestones = tuple(int(m) for m in self.milestones)

    def validate(self) -> None:
        """Check ranges"""
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError("train.milestones must be increasing")
        if not 0 < self.match_iou < 1:
            raise ConfigError("train.match_iou must be in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")

    def lr_at(self, step: int) -> float:
        """Step-decayed learning rate"""
        decays = sum(1 for m in self.milestones if step >= m)
        return self.lr * self.lr_decay**decays


@dataclasses.dataclass
class EvalOptions:
    """Detection and metric thresholds"""

    score_threshold: float = 0.01
    nms_threshold: float = 0.45
    top_k: int = 200
    iou_threshold: float = 0.5
    size_score_threshold: float = 0.1
    size_iou_threshold: float = 0.5
    ap_method: str = "interp11"
    raw_precision: bool = False

    def validate(self) -> None:
        """Check ranges"""
        for name in ("score_threshold", "nms_threshold", "iou_threshold"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"eval.{name} must be in [0, 1]")
        if self.top_k < 1:
            raise ConfigError("eval.top_k must be >= 1")
        if self.ap_method not in ("interp11", "all_points"):
            raise ConfigError("eval.ap_method must be interp11 or all_points")


@dataclasses.dataclass
class RunConfig:
    """Everything a train or eval run needs"""

    pyramid: PyramidConfig
    fusion: FusionMode = FusionMode.CONVENTIONAL
    layout: Optional[BoxLayout] = None
    classes: Tuple[str, ...] = VOC_CLASSES
    train: TrainOptions = dataclasses.field(default_factory=TrainOptions)
    eval: EvalOptions = dataclasses.field(default_factory=EvalOptions)
    name: str = ""

    def __post_init__(self) -> None:
        self.fusion = FusionMode.parse(self.fusion)
        self.classes = tuple(self.classes)
        if self.layout is None:
            self.layout = BoxLayout.conventional(self.pyramid.num_levels)

    @property
    def num_classes(self) -> int:
        """Class count including background (index 0)"""
        return len(self.classes) + 1

    def validate(self) -> None:
        """Validate every section and their combination"""
        # pylint: disable=import-outside-toplevel
        from rainbowssd.pyramid import pyramid_shape_table

        self.pyramid.validate()
        assert self.layout is not None
        self.layout.validate(self.pyramid.num_levels)
        if not self.classes:
            raise ConfigError("at least one object class is required")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("class names must be unique")
        self.train.validate()
        self.eval.validate()
        if self.layout.shared_classifier:
            channels = {row.c for row in pyramid_shape_table(self.pyramid, self.fusion)}
            if len(channels) != 1:
                raise ConfigError(
                    "a shared classifier needs uniform channels on every level, "
                    "which requires rainbow fusion"
                )

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly form accepted by `run_config_from_dict`"""
        assert self.layout is not None
        result = self.pyramid.to_dict()
        result.update(
            {
                "name": self.name,
                "fusion": self.fusion.value,
                "boxes_per_position": list(self.layout.boxes_per_position),
                "shared_classifier": self.layout.shared_classifier,
                "classes": list(self.classes),
                "train": dataclasses.asdict(self.train),
                "eval": dataclasses.asdict(self.eval),
            }
        )
        result["train"]["milestones"] = list(self.train.milestones)
        return result


CANONICAL_300 = ((38, 512), (19, 1024), (10, 512), (5, 256), (3, 256), (1, 256))
CANONICAL_512 = (
    (64, 512),
    (32, 1024),
    (16, 512),
    (8, 256),
    (4, 256),
    (2, 256),
    (1, 256),
)
ISSD_300 = {
    "conv4": (512, 2048),
    "conv7": (1024, 2048),
    "conv8": (1024, 2048),
    "conv9": (1024, 2048),
    "conv10": (1024, 2048),
    "conv11": (1024, 2048),
}
TOY_96 = ((12, 512), (6, 1024), (3, 512), (2, 256), (1, 256))

PRESETS: Dict[str, Dict[str, Any]] = {
    "canonical-300": {
        "input_size": 300,
        "levels": CANONICAL_300,
        "fusion": "conventional",
        "layout": "conventional",
        "train": {"milestones": [80000, 100000, 120000], "steps": 140000},
    },
    "canonical-512": {
        "input_size": 512,
        "levels": CANONICAL_512,
        "fusion": "conventional",
        "layout": "conventional",
        "train": {"milestones": [80000, 100000, 120000], "steps": 140000, "batch_size": 4},
    },
    "issd-300": {
        "input_size": 300,
        "levels": CANONICAL_300,
        "issd_channels": ISSD_300,
        "fusion": "conventional",
        "layout": "conventional",
    },
    "toy-96": {
        "input_size": 96,
        "levels": TOY_96,
        "channel_scale": "1/16",
        "fusion": "rainbow",
        "layout": "shared-4",
        "classes": list(SHAPE_CLASSES),
        "train": {
            "steps": 5000,
            "batch_size": 8,
            "lr": 0.01,
            "milestones": [3500, 4500],
            "log_every": 100,
        },
    },
}

_TOP_KEYS = {
    "name",
    "input_size",
    "levels",
    "channel_scale",
    "issd_channels",
    "fusion",
    "layout",
    "boxes_per_position",
    "shared_classifier",
    "classes",
    "train",
    "eval",
}


def _section(cls, values: Mapping[str, Any], section: str):
    names = {field.name for field in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from exc


def run_config_from_dict(values: Mapping[str, Any]) -> RunConfig:
    """Build a RunConfig from the documented JSON schema"""
    unknown = set(values) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in ("input_size", "levels"):
        if key not in values:
            raise ConfigError(f"config is missing required key {key!r}")
    try:
        pyramid = PyramidConfig(
            levels=tuple(tuple(level) for level in values["levels"]),  # type: ignore[misc]
            input_size=int(values["input_size"]),
            channel_scale=values.get("channel_scale", 1),
            issd_channels=values.get("issd_channels"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid pyramid description: {exc}") from exc

    shared = values.get("shared_classifier")
    if "boxes_per_position" in values:
        layout = BoxLayout.parse(values["boxes_per_position"], pyramid.num_levels, shared)
    else:
        layout = BoxLayout.parse(
            values.get("layout", "conventional"), pyramid.num_levels, shared
        )

    return RunConfig(
        pyramid=pyramid,
        fusion=FusionMode.parse(values.get("fusion", "conventional")),
        layout=layout,
        classes=tuple(values.get("classes", VOC_CLASSES)),
        train=_section(TrainOptions, values.get("train", {}), "train"),
        eval=_section(EvalOptions, values.get("eval", {}), "eval"),
        name=str(values.get("name", "")),
    )


def _merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    result = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(result.get(key), Mapping):
            result[key] = _merge(dict(result[key]), value)
        else:
            result[key] = value
    return result


def load_config_dict(source: str) -> Dict[str, Any]:
    """Load a preset by name or a JSON config file by path"""
    if source in PRESETS:
        return _merge({"name": source}, PRESETS[source])
    if not os.path.exists(source):
        raise ConfigError(
            f"config {source!r} is neither a file nor a preset "
            f"({', '.join(sorted(PRESETS))})"
        )
    try:
        with open(source, "r", encoding="utf-8") as fin:
            values = json.load(fin)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"failed to read config {source!r}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"config {source!r} must contain a JSON object")
    if "preset" in values:
        base = load_config_dict(values.pop("preset"))
        values = _merge(base, values)
    return values


def load_run_config(
    source: str, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """
    Resolve a preset name or JSON file, apply flag overrides on top and
    validate the result.
    """
    values = load_config_dict(source)
    if overrides:
        if "layout" in overrides or "boxes_per_position" in overrides:
            values.pop("layout", None)
            values.pop("boxes_per_position", None)
        values = _merge(values, overrides)
    config = run_config_from_dict(values)
    config.validate()
    LOGGER.info(
        "config %s: fusion=%s layout=%s classes=%d",
        config.name or source,
        config.fusion.value,
        config.layout.describe() if config.layout else "-",
        len(config.classes),
    )
    return config


def preset(name: str) -> RunConfig:
    """Shorthand for a validated built-in preset"""
    return load_run_config(name)


def canonical_pyramid(size: int = 300) -> PyramidConfig:
    """Canonical 300 or 512 ladder"""
    levels = {300: CANONICAL_300, 512: CANONICAL_512}.get(size)
    if levels is None:
        raise ConfigError(f"no canonical ladder for input size {size}")
    return PyramidConfig(levels=levels, input_size=size)


def toy_pyramid() -> PyramidConfig:
    """Desk-scale 96 input ladder at 1/16 channels"""
    return PyramidConfig(levels=TOY_96, input_size=96, channel_scale=Fraction(1, 16))

