"""
Classifier networks on top of the fused pyramid and the multibox objective.
"""
import copy
import dataclasses
import logging
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from rainbowssd.autograd import apply_op
from rainbowssd.boxes import MatchResult
from rainbowssd.config import BoxLayout
from rainbowssd.exceptions import ConfigError, DimensionError
from rainbowssd.ops import ConvParams, concat, conv2d, init_conv, reshape, slice_last, transpose
from rainbowssd.pyramid import Pyramid
from rainbowssd.tensor import Tensor

LOGGER = logging.getLogger(__name__)

HEAD_INIT_STD = 0.01


class HeadOutput(NamedTuple):
    """Raw predictions over all default boxes: (n, A, C) logits, (n, A, 4) offsets"""

    logits: Tensor
    offsets: Tensor


class Heads:
    """
    One 3x3 pad-1 convolution per level emitting k (C + 4) channels. In shared
    mode every level references the same ConvParams object, so an update made
    through any level reaches all of them.
    """

    def __init__(
        self,
        channels: Sequence[int],
        layout: BoxLayout,
        num_classes: int,
        seed: int = 0,
    ) -> None:
        layout.validate(len(channels))
        if num_classes < 2:
            raise ConfigError("heads need at least one object class plus background")
        self.layout = layout
        self.num_classes = num_classes
        self.channels = tuple(channels)
        rng = np.random.default_rng(seed)
        width = num_classes + 4

        if layout.shared_classifier:
            if len(set(channels)) > 1:
                raise ConfigError(
                    "a shared classifier needs the same channel count on every level "
                    f"(got {list(channels)}); use rainbow fusion"
                )
            k = layout.boxes_per_position[0]
            shared = init_conv(
                rng, channels[0], k * width, 3, pad=1, name="heads.shared", std=HEAD_INIT_STD
            )
            self.convs: List[ConvParams] = [shared] * len(channels)
        else:
            self.convs = [
                init_conv(
                    rng, c, k * width, 3, pad=1, name=f"heads.level{idx}", std=HEAD_INIT_STD
                )
                for idx, (c, k) in enumerate(zip(channels, layout.boxes_per_position))
            ]

    @property
    def shared(self) -> bool:
        return self.layout.shared_classifier

    def unique_convs(self) -> List[ConvParams]:
        """Distinct weight sets, in first-use order"""
        seen: List[ConvParams] = []
        for conv in self.convs:
            if not any(conv is other for other in seen):
                seen.append(conv)
        return seen

    def unshare(self) -> None:
        """Clone the shared classifier into independent per-level copies"""
        if not self.shared:
            return
        source = self.convs[0]
        self.convs = []
        for idx in range(len(self.channels)):
            conv = copy.deepcopy(source)
            conv.weight.name = f"heads.level{idx}.weight"
            conv.bias.name = f"heads.level{idx}.bias"
            self.convs.append(conv)
        self.layout = dataclasses.replace(self.layout, shared_classifier=False)
        LOGGER.info("classifier unshared into %d per-level copies", len(self.convs))

    def level_predictions(self, pyramid: Pyramid) -> List[Tensor]:
        """Per-level (n, f f k, C + 4) predictions"""
        if len(pyramid) != len(self.convs):
            raise DimensionError(
                f"heads expect {len(self.convs)} levels, pyramid has {len(pyramid)}"
            )
        width = self.num_classes + 4
        result = []
        for feature, conv in zip(pyramid, self.convs):
            y = conv2d(feature, conv)
            y = transpose(y, (0, 2, 3, 1))
            result.append(reshape(y, (feature.n, -1, width)))
        return result

    def __call__(self, pyramid: Pyramid) -> HeadOutput:
        levels = self.level_predictions(pyramid)
        merged = levels[0] if len(levels) == 1 else concat(levels, 1)
        return HeadOutput(
            logits=slice_last(merged, 0, self.num_classes),
            offsets=slice_last(merged, self.num_classes, self.num_classes + 4),
        )

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        if self.shared:
            yield "heads.shared.weight", self.convs[0].weight
            yield "heads.shared.bias", self.convs[0].bias
            return
        for idx, conv in enumerate(self.convs):
            yield f"heads.level{idx}.weight", conv.weight
            yield f"heads.level{idx}.bias", conv.bias

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def build_heads(
    channels: Sequence[int], layout: BoxLayout, num_classes: int, seed: int = 0
) -> Heads:
    """Classifier parameters for fused levels with the given channel counts"""
    heads = Heads(channels, layout, num_classes, seed)
    LOGGER.debug(
        "built %s heads: %d weight sets, %d parameters",
        layout.describe(),
        len(heads.unique_convs()),
        heads.parameter_count(),
    )
    return heads


@dataclasses.dataclass
class LossBreakdown:
    """Summed loc and conf terms; `total` is their sum over max(1, positives)"""

    loc: float
    conf: float
    total: float
    positives: int
    tensor: Optional[Tensor] = None


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def hard_negatives(
    background_loss: np.ndarray, positive: np.ndarray, neg_pos_ratio: float
) -> np.ndarray:
    """
    Mask of the negatives kept for one image: the highest background losses,
    at most ratio * positives of them (ratio itself when there are none).
    Equal losses keep the lower anchor index.
    """
    num_pos = int(np.count_nonzero(positive))
    num_neg = len(positive) - num_pos
    wanted = neg_pos_ratio * num_pos if num_pos else neg_pos_ratio
    keep = min(int(wanted), num_neg)
    mask = np.zeros(len(positive), dtype=bool)
    if keep <= 0:
        return mask
    candidates = np.where(positive, -np.inf, background_loss)
    order = np.argsort(-candidates, kind="stable")
    mask[order[:keep]] = True
    return mask


def _smooth_l1(diff: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    absdiff = np.abs(diff)
    small = absdiff < 1.0
    value = np.where(small, 0.5 * diff * diff, absdiff - 0.5)
    grad = np.where(small, diff, np.sign(diff))
    return value, grad


def multibox_loss(
    logits: Tensor,
    offsets: Tensor,
    matches: Sequence[MatchResult],
    neg_pos_ratio: float = 3.0,
) -> LossBreakdown:
    """
    Smooth-L1 localization over positives plus softmax cross-entropy over
    positives and mined negatives, normalized by the batch positive count.
    `logits` is (n, A, C) and `offsets` (n, A, 4) with one MatchResult per
    image. The returned breakdown carries the recorded scalar loss tensor.
    """
    n, anchors, _ = logits.shape
    if offsets.shape != (n, anchors, 4):
        raise DimensionError(
            f"offset predictions have shape {offsets.shape}, expected {(n, anchors, 4)}"
        )
    if len(matches) != n:
        raise DimensionError(f"got {len(matches)} match results for a batch of {n}")
    for match in matches:
        if len(match.labels) != anchors:
            raise DimensionError(
                f"match covers {len(match.labels)} anchors, predictions have {anchors}"
            )

    labels = np.stack([m.labels for m in matches])
    targets = np.stack([m.offsets for m in matches])
    positive = labels > 0
    log_probs = _log_softmax(logits.data)
    ce = -np.take_along_axis(log_probs, labels[..., None], axis=-1)[..., 0]
    background = -log_probs[..., 0]
    selected = positive.copy()
    for i in range(n):
        selected[i] |= hard_negatives(background[i], positive[i], neg_pos_ratio)

    diff = offsets.data - targets
    sl1, sl1_grad = _smooth_l1(diff)
    loc = float((sl1 * positive[..., None]).sum())
    conf = float((ce * selected).sum())
    num_pos = int(positive.sum())
    norm = max(1, num_pos)
    total = (loc + conf) / norm

    def forward() -> np.ndarray:
        return np.asarray(total, dtype=logits.data.dtype)

    def backward_fn(gy, needs):
        scale = gy / norm
        glogits = None
        if needs[0]:
            onehot = np.zeros_like(logits.data)
            np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
            glogits = (np.exp(log_probs) - onehot) * selected[..., None] * scale
        goffsets = sl1_grad * positive[..., None] * scale if needs[1] else None
        return glogits, goffsets

    tensor = apply_op("multibox_loss", (logits, offsets), forward(), forward, backward_fn)
    return LossBreakdown(loc=loc, conf=conf, total=total, positives=num_pos, tensor=tensor)
