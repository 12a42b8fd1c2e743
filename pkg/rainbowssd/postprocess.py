import dataclasses
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from rainbowssd.boxes import Box, center_to_corners, decode, iou_matrix
from rainbowssd.exceptions import DimensionError

LOGGER = logging.getLogger(__name__)

VISUALIZATION_THRESHOLD = 0.3


@dataclasses.dataclass(frozen=True)
class Detection:
    """A scored class box in normalized corner form"""

    image_id: str
    class_id: int
    score: float
    box: Box


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two corner-form boxes; 0 for an empty union"""
    return float(iou_matrix(np.asarray(a), np.asarray(b))[0, 0])


def nms(dets: Sequence[Detection], iou_threshold: float, top_k: int) -> List[Detection]:
    """
    Greedy suppression: keep the best remaining detection, drop everything
    overlapping it by more than `iou_threshold`, stop after `top_k` keeps.
    Equal scores keep input order.
    """
    if not dets or top_k <= 0:
        return []
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    overlaps = iou_matrix(boxes, boxes)
    alive = np.ones(len(dets), dtype=bool)
    kept: List[Detection] = []
    for idx in order:
        if not alive[idx]:
            continue
        kept.append(dets[idx])
        if len(kept) >= top_k:
            break
        alive &= overlaps[idx] <= iou_threshold
    return kept


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis"""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expo = np.exp(shifted)
    return expo / expo.sum(axis=-1, keepdims=True)


def detect(
    logits: np.ndarray,
    offsets: np.ndarray,
    anchors: np.ndarray,
    score_threshold: float = 0.01,
    nms_threshold: float = 0.45,
    top_k: int = 200,
    *,
    image_id: str = "",
) -> List[Detection]:
    """
    Final detections for one image from (A, C) logits and (A, 4) offsets:
    softmax, per non-background class score threshold, decode and clamp,
    per-class NMS, then a global top_k by score.
    """
    logits = np.asarray(logits, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != len(anchors):
        raise DimensionError(
            f"logits axis 0 has {logits.shape[0] if logits.ndim else 0} entries for "
            f"{len(anchors)} anchors"
        )
    if offsets.shape != (len(anchors), 4):
        raise DimensionError(
            f"offsets have shape {offsets.shape}, expected {(len(anchors), 4)}"
        )
    probs = softmax(logits)
    boxes = np.clip(center_to_corners(decode(offsets, anchors)), 0.0, 1.0)

    result: List[Detection] = []
    for class_id in range(1, probs.shape[1]):
        scores = probs[:, class_id]
        candidates = np.nonzero(scores > score_threshold)[0]
        if len(candidates) == 0:
            continue
        dets = [
            Detection(image_id, class_id, float(scores[a]), tuple(float(v) for v in boxes[a]))  # type: ignore[arg-type]
            for a in candidates
        ]
        result.extend(nms(dets, nms_threshold, top_k))
    result.sort(key=_rank_key)
    return result[:top_k]


def _rank_key(det: Detection) -> Tuple:
    return (-det.score, det.class_id, det.box)


def detect_batch(
    logits: np.ndarray,
    offsets: np.ndarray,
    anchors: np.ndarray,
    image_ids: Sequence[str],
    score_threshold: float = 0.01,
    nms_threshold: float = 0.45,
    top_k: int = 200,
) -> Dict[str, List[Detection]]:
    """`detect` over a (n, A, C) / (n, A, 4) batch"""
    if len(image_ids) != len(logits):
        raise DimensionError(f"{len(image_ids)} image ids for a batch of {len(logits)}")
    return {
        image_id: detect(
            logits[i],
            offsets[i],
            anchors,
            score_threshold,
            nms_threshold,
            top_k,
            image_id=image_id,
        )
        for i, image_id in enumerate(image_ids)
    }


def objectness_filter(
    dets: Sequence[Detection], threshold: float = VISUALIZATION_THRESHOLD
) -> List[Detection]:
    """
    Detections worth drawing: objectness, taken as the detection's class
    score, at or above `threshold`.
    """
    return [d for d in dets if d.score >= threshold]
