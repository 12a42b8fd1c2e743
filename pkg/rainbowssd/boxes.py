"""
Default-box geometry, overlap, center-size encoding and anchor matching.

Boxes come in two layouts: corner form (xmin, ymin, xmax, ymax) and center
form (cx, cy, w, h). Default boxes are kept in center form, ground truths in
corner form; all coordinates are fractions of the image size.
"""
import dataclasses
import logging
import math
from typing import List, Sequence, Tuple

import numpy as np

from rainbowssd.config import BoxLayout, PyramidConfig
from rainbowssd.exceptions import ConfigError, DimensionError, ValidationError

LOGGER = logging.getLogger(__name__)

S_MIN = 0.2
S_MAX = 0.9
VARIANCES = (0.1, 0.2)

Box = Tuple[float, float, float, float]


@dataclasses.dataclass(frozen=True)
class GroundTruth:
    """Annotated object; class 0 is reserved for background"""

    class_id: int
    box: Box
    difficult: bool = False

    def __post_init__(self) -> None:
        if self.class_id < 1:
            raise ValidationError(f"ground truth class id must be >= 1, got {self.class_id}")
        xmin, ymin, xmax, ymax = self.box
        if not (xmin < xmax and ymin < ymax):
            raise ValidationError(f"ground truth box {self.box} is empty or inverted")


def level_scales(num_levels: int) -> List[float]:
    """Linear scale schedule from S_MIN to S_MAX across the levels"""
    if num_levels == 1:
        return [S_MIN]
    step = (S_MAX - S_MIN) / (num_levels - 1)
    return [S_MIN + step * k for k in range(num_levels)]


def _position_shapes(scale: float, next_scale: float, boxes: int) -> List[Tuple[float, float]]:
    shapes = [(scale, scale)]
    extra = math.sqrt(scale * next_scale)
    shapes.append((extra, extra))
    ratios = (2.0, 0.5) if boxes == 4 else (2.0, 0.5, 3.0, 1.0 / 3.0)
    for ratio in ratios:
        root = math.sqrt(ratio)
        shapes.append((scale * root, scale / root))
    return shapes


def _check_layout(layout: BoxLayout, cfg: PyramidConfig) -> None:
    if len(layout.boxes_per_position) != cfg.num_levels:
        raise ConfigError(
            f"box layout has {len(layout.boxes_per_position)} entries "
            f"for {cfg.num_levels} pyramid levels"
        )


def generate_default_boxes(layout: BoxLayout, cfg: PyramidConfig) -> np.ndarray:
    """
    (A, 4) array of center-form default boxes. Order is level-major, then
    row-major over positions, then per-position shape order (1, s), (1, s'),
    2, 1/2[, 3, 1/3].
    """
    _check_layout(layout, cfg)
    layout.validate(cfg.num_levels)
    scales = level_scales(cfg.num_levels) + [1.0] if cfg.num_levels else []
    blocks = []
    for idx, (size, boxes) in enumerate(zip(cfg.spatial_sizes, layout.boxes_per_position)):
        shapes = np.array(_position_shapes(scales[idx], scales[idx + 1], boxes))
        centers = (np.arange(size) + 0.5) / size
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        grid = np.stack([cx.ravel(), cy.ravel()], axis=1)
        block = np.empty((size * size, boxes, 4))
        block[:, :, :2] = grid[:, None, :]
        block[:, :, 2:] = shapes[None, :, :]
        blocks.append(block.reshape(-1, 4))
    if not blocks:
        return np.zeros((0, 4))
    return np.concatenate(blocks, axis=0)


def count_boxes(layout: BoxLayout, cfg: PyramidConfig) -> int:
    """Closed form sum of f^2 k over the levels"""
    _check_layout(layout, cfg)
    return sum(f * f * k for f, k in zip(cfg.spatial_sizes, layout.boxes_per_position))


def level_box_counts(layout: BoxLayout, cfg: PyramidConfig) -> List[int]:
    """Per-level default-box totals"""
    _check_layout(layout, cfg)
    return [f * f * k for f, k in zip(cfg.spatial_sizes, layout.boxes_per_position)]


def center_to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corners_to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    size = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + size / 2, size], axis=-1)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(
        boxes[..., 3] - boxes[..., 1], 0, None
    )


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form boxes, shape (len(a), len(b))"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lo = np.maximum(a[:, None, :2], b[None, :, :2])
    hi = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(hi - lo, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        result = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return result


def encode_box(box: Sequence[float], anchor: Sequence[float]) -> Box:
    """
    Offsets of the center-form `box` relative to a center-form `anchor`,
    scaled by the variances.
    """
    encoded = encode(np.asarray([box], dtype=np.float64), np.asarray([anchor], dtype=np.float64))
    return tuple(float(v) for v in encoded[0])  # type: ignore[return-value]


def decode_box(offsets: Sequence[float], anchor: Sequence[float]) -> Box:
    """Inverse of `encode_box`, returning a center-form box"""
    decoded = decode(
        np.asarray([offsets], dtype=np.float64), np.asarray([anchor], dtype=np.float64)
    )
    return tuple(float(v) for v in decoded[0])  # type: ignore[return-value]


def _check_sizes(boxes: np.ndarray, what: str) -> None:
    if boxes.shape[-1] != 4:
        raise DimensionError(f"{what} last axis must have 4 entries, got {boxes.shape}")
    if np.any(boxes[..., 2:] <= 0):
        raise ValidationError(f"{what} width and height must be positive")


def encode(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized center-size encoding of center-form boxes"""
    _check_sizes(anchors, "anchor")
    _check_sizes(boxes, "box")
    v1, v2 = VARIANCES
    return np.concatenate(
        [
            (boxes[..., :2] - anchors[..., :2]) / (anchors[..., 2:] * v1),
            np.log(boxes[..., 2:] / anchors[..., 2:]) / v2,
        ],
        axis=-1,
    )


def decode(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized inverse of `encode`"""
    _check_sizes(anchors, "anchor")
    v1, v2 = VARIANCES
    return np.concatenate(
        [
            anchors[..., :2] + offsets[..., :2] * v1 * anchors[..., 2:],
            anchors[..., 2:] * np.exp(offsets[..., 2:] * v2),
        ],
        axis=-1,
    )


@dataclasses.dataclass
class MatchResult:
    """
    Per-anchor assignment. `gt_index` is -1 for background, `labels` holds the
    class id (0 for background) and `offsets` the encoded regression targets
    (zero rows for background).
    """

    gt_index: np.ndarray
    labels: np.ndarray
    offsets: np.ndarray

    @property
    def num_positives(self) -> int:
        return int(np.count_nonzero(self.labels))

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0


def match_anchors(
    defaults: np.ndarray, gts: Sequence[GroundTruth], iou_threshold: float = 0.5
) -> MatchResult:
    """
    Two-rule matching. First every ground truth, in order, claims its best
    anchor among those not yet claimed, provided the overlap is positive. Then
    every other anchor whose best overlap reaches `iou_threshold` goes to its
    best ground truth. Ties go to the lowest index.
    """
    if not 0 < iou_threshold < 1:
        raise ConfigError(f"matching threshold must be in (0, 1), got {iou_threshold}")
    defaults = np.asarray(defaults, dtype=np.float64).reshape(-1, 4)
    num = len(defaults)
    gt_index = np.full(num, -1, dtype=np.int64)
    labels = np.zeros(num, dtype=np.int64)
    offsets = np.zeros((num, 4))
    if not gts or num == 0:
        return MatchResult(gt_index, labels, offsets)

    gt_boxes = np.array([gt.box for gt in gts], dtype=np.float64)
    overlaps = iou_matrix(gt_boxes, center_to_corners(defaults))

    forced = np.zeros(num, dtype=bool)
    for g in range(len(gts)):
        row = np.where(forced, -1.0, overlaps[g])
        best = int(np.argmax(row))
        if row[best] > 0:
            forced[best] = True
            gt_index[best] = g

    best_gt = np.argmax(overlaps, axis=0)
    best_iou = overlaps[best_gt, np.arange(num)]
    threshold_hit = ~forced & (best_iou >= iou_threshold)
    gt_index[threshold_hit] = best_gt[threshold_hit]

    positive = gt_index >= 0
    class_ids = np.array([gt.class_id for gt in gts], dtype=np.int64)
    labels[positive] = class_ids[gt_index[positive]]
    if np.any(positive):
        targets = corners_to_center(gt_boxes[gt_index[positive]])
        offsets[positive] = encode(targets, defaults[positive])
    return MatchResult(gt_index, labels, offsets)
