"""
Detection evaluation: VOC-style precision/recall curves and average
precision, precision at fixed recall levels, the high-recall mean over
{0.7, 0.8, 0.9, 1.0}, and recall stratified by object size.
"""
import dataclasses
import io
import logging
import math
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from rainbowssd.boxes import GroundTruth, iou_matrix
from rainbowssd.data import BUCKETS, size_bucket
from rainbowssd.exceptions import ParseError, ValidationError
from rainbowssd.postprocess import Detection

LOGGER = logging.getLogger(__name__)

AP_METHODS = ("interp11", "all_points")
HIGH_RECALL_POINTS = (0.7, 0.8, 0.9, 1.0)
REPORT_RECALL_POINTS = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

GroundTruths = Mapping[str, Sequence[GroundTruth]]


@dataclasses.dataclass
class PRCurve:
    """
    Detections of one class in evaluation order with their TP/FP flags.
    Detections matched to a difficult ground truth are dropped and counted in
    `ignored`.
    """

    class_id: int
    scores: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    npos: int
    ignored: int = 0

    @property
    def recall(self) -> np.ndarray:
        if self.npos == 0:
            return np.zeros(len(self.tp))
        return np.cumsum(self.tp) / self.npos

    @property
    def precision(self) -> np.ndarray:
        ctp = np.cumsum(self.tp)
        cfp = np.cumsum(self.fp)
        total = ctp + cfp
        return np.divide(ctp, total, out=np.zeros(len(total)), where=total > 0)


def _sort_key(det: Detection) -> Tuple:
    return (-det.score, det.image_id, tuple(det.box))


def pr_curve(
    dets: Iterable[Detection],
    gts: GroundTruths,
    iou_threshold: float = 0.5,
    class_id: Optional[int] = None,
) -> PRCurve:
    """
    Match detections of one class against ground truth following the VOC
    toolkit. Each detection, best score first, is compared with the
    highest-overlap ground truth of its class in its image; it is a true
    positive when that overlap reaches `iou_threshold` and the ground truth
    is still unused.
    """
    dets = list(dets)
    if class_id is None:
        found = {d.class_id for d in dets} | {
            gt.class_id for image_gts in gts.values() for gt in image_gts
        }
        if len(found) > 1:
            raise ValidationError(f"pr_curve needs a single class, got {sorted(found)}")
        class_id = found.pop() if found else 1

    class_gts: Dict[str, List[GroundTruth]] = {
        image_id: [gt for gt in image_gts if gt.class_id == class_id]
        for image_id, image_gts in gts.items()
    }
    boxes = {
        image_id: np.array([gt.box for gt in image_gts], dtype=np.float64).reshape(-1, 4)
        for image_id, image_gts in class_gts.items()
    }
    used = {image_id: np.zeros(len(image_gts), dtype=bool) for image_id, image_gts in class_gts.items()}
    npos = sum(1 for image_gts in class_gts.values() for gt in image_gts if not gt.difficult)

    ordered = sorted((d for d in dets if d.class_id == class_id), key=_sort_key)
    scores, tp, fp = [], [], []
    ignored = 0
    for det in ordered:
        if det.image_id not in class_gts:
            raise ValidationError(f"detection refers to unknown image id {det.image_id!r}")
        image_gts = class_gts[det.image_id]
        hit = False
        if image_gts:
            overlaps = iou_matrix(np.array([det.box]), boxes[det.image_id])[0]
            best = int(np.argmax(overlaps))
            if overlaps[best] >= iou_threshold:
                if image_gts[best].difficult:
                    ignored += 1
                    continue
                if not used[det.image_id][best]:
                    used[det.image_id][best] = True
                    hit = True
        scores.append(det.score)
        tp.append(hit)
        fp.append(not hit)

    return PRCurve(
        class_id=class_id,
        scores=np.array(scores, dtype=np.float64),
        tp=np.array(tp, dtype=bool),
        fp=np.array(fp, dtype=bool),
        npos=npos,
        ignored=ignored,
    )


def pr_curves(
    dets: Iterable[Detection],
    gts: GroundTruths,
    num_classes: int,
    iou_threshold: float = 0.5,
) -> Dict[int, PRCurve]:
    """One curve per object class id 1..num_classes-1"""
    dets = list(dets)
    return {
        class_id: pr_curve(dets, gts, iou_threshold, class_id)
        for class_id in range(1, num_classes)
    }


def _recall_levels(count: int) -> np.ndarray:
    # i / 10 rather than a running sum, so 0.3 compares equal to 3/10.
    return np.arange(count + 1) / count


def average_precision(curve: PRCurve, method: str = "interp11") -> Optional[float]:
    """
    interp11 averages the best precision at recall >= r over the eleven
    levels 0, 0.1, ..., 1; all_points integrates the monotone precision
    envelope. Returns None when the class has no ground truth.
    """
    if method not in AP_METHODS:
        raise ValidationError(f"unknown AP method {method!r}")
    if curve.npos == 0:
        return None
    recall, precision = curve.recall, curve.precision
    if method == "interp11":
        total = 0.0
        for level in _recall_levels(10):
            reached = precision[recall >= level]
            total += float(reached.max()) if len(reached) else 0.0
        return total / 11

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclasses.dataclass
class APResult:
    """Per-class AP over classes with ground truth, their mean, and the rest"""

    per_class: Dict[int, float]
    excluded: List[int]
    method: str

    @property
    def mean(self) -> float:
        if not self.per_class:
            return 0.0
        return float(np.mean(list(self.per_class.values())))


def mean_average_precision(curves: Mapping[int, PRCurve], method: str = "interp11") -> APResult:
    per_class: Dict[int, float] = {}
    excluded = []
    for class_id in sorted(curves):
        ap = average_precision(curves[class_id], method)
        if ap is None:
            excluded.append(class_id)
        else:
            per_class[class_id] = ap
    if excluded:
        LOGGER.info("classes without ground truth excluded from mAP: %s", excluded)
    return APResult(per_class, excluded, method)


def _precision_at(curve: PRCurve, point: float, interpolated: bool) -> float:
    recall, precision = curve.recall, curve.precision
    reached = recall >= point - 1e-12
    if not np.any(reached):
        return 0.0
    if interpolated:
        return float(precision[reached].max())
    return float(precision[int(np.argmax(reached))])


@dataclasses.dataclass
class PrecisionTable:
    """Class-averaged precision at each recall point, plus the per-class rows"""

    points: Tuple[float, ...]
    mean: Tuple[float, ...]
    per_class: Dict[int, Tuple[float, ...]] = dataclasses.field(default_factory=dict)

    def value_at(self, point: float) -> float:
        for p, value in zip(self.points, self.mean):
            if math.isclose(p, point, abs_tol=1e-9):
                return value
        raise ValidationError(f"precision table has no recall point {point}")


def precision_at_recall(
    curves: Mapping[int, PRCurve],
    recall_points: Sequence[float] = REPORT_RECALL_POINTS,
    *,
    interpolated: bool = True,
) -> PrecisionTable:
    """
    Precision at each recall point per class, averaged over classes with
    ground truth. Interpolated precision is the best precision at any recall
    >= r; the raw variant takes the first curve point reaching r. Recall
    levels a class never reaches count as 0.
    """
    for point in recall_points:
        if not 0 <= point <= 1:
            raise ValidationError(f"recall point {point} outside [0, 1]")
    per_class = {
        class_id: tuple(_precision_at(curve, p, interpolated) for p in recall_points)
        for class_id, curve in sorted(curves.items())
        if curve.npos > 0
    }
    if per_class:
        mean = tuple(float(v) for v in np.mean(list(per_class.values()), axis=0))
    else:
        mean = tuple(0.0 for _ in recall_points)
    return PrecisionTable(tuple(recall_points), mean, per_class)


def map_at_recall_07plus(table: Union[PrecisionTable, Mapping[float, float]]) -> float:
    """Mean of the class-averaged precisions at recall 0.7, 0.8, 0.9 and 1.0"""
    if not isinstance(table, PrecisionTable):
        items = sorted(table.items())
        table = PrecisionTable(tuple(p for p, _ in items), tuple(v for _, v in items))
    return sum(table.value_at(p) for p in HIGH_RECALL_POINTS) / len(HIGH_RECALL_POINTS)


def format_percent(value: float) -> str:
    """
    Fraction as a percentage with one decimal, rounding half up. The value is
    first rounded to six decimals so 0.5265 prints as 52.7.
    """
    scaled = Decimal(str(round(value * 100, 6)))
    return str(scaled.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclasses.dataclass(frozen=True)
class BucketRecall:
    detected: int
    total: int

    @property
    def recall(self) -> Optional[float]:
        return self.detected / self.total if self.total else None


@dataclasses.dataclass
class SizeRecall:
    """Class-pooled recall per size bucket"""

    buckets: Dict[str, BucketRecall]
    score_threshold: float
    iou_threshold: float

    def recall(self, bucket: str) -> Optional[float]:
        return self.buckets[bucket].recall


def gt_pixel_area(gt: GroundTruth, size: Tuple[int, int]) -> float:
    width, height = size
    xmin, ymin, xmax, ymax = gt.box
    # Rounded so areas exactly on a bucket edge are not nudged by float error.
    return round((xmax - xmin) * width * (ymax - ymin) * height, 6)


def size_stratified_recall(
    dets: Iterable[Detection],
    gts: GroundTruths,
    score_threshold: float = 0.1,
    iou_threshold: float = 0.5,
    image_sizes: Optional[Mapping[str, Tuple[int, int]]] = None,
) -> SizeRecall:
    """
    Recall over all objects pooled across classes, split by pixel area. An
    object counts as found when some detection of its class scoring above
    `score_threshold` overlaps it by at least `iou_threshold`.
    """
    image_sizes = image_sizes or {}
    by_image: Dict[str, List[Detection]] = {}
    for det in dets:
        if det.score > score_threshold:
            by_image.setdefault(det.image_id, []).append(det)

    counts = {name: [0, 0] for name in BUCKETS}
    for image_id, image_gts in gts.items():
        if image_gts and image_id not in image_sizes:
            raise ValidationError(f"missing image size for image id {image_id!r}")
        image_dets = by_image.get(image_id, [])
        for gt in image_gts:
            bucket = size_bucket(gt_pixel_area(gt, image_sizes[image_id]))
            candidates = [d.box for d in image_dets if d.class_id == gt.class_id]
            found = bool(candidates) and bool(
                np.any(iou_matrix(np.array([gt.box]), np.array(candidates))[0] >= iou_threshold)
            )
            counts[bucket][1] += 1
            counts[bucket][0] += int(found)

    return SizeRecall(
        {name: BucketRecall(det, total) for name, (det, total) in counts.items()},
        score_threshold,
        iou_threshold,
    )


def export_pr_csv(
    curves: Mapping[int, PRCurve], *, step: float = 0.01, interpolated: bool = True
) -> str:
    """Class-averaged precision against recall in `step` increments, as CSV"""
    count = int(round(1 / step))
    points = tuple(float(p) for p in _recall_levels(count))
    table = precision_at_recall(curves, points, interpolated=interpolated)
    out = io.StringIO()
    out.write("recall,mean_precision\n")
    for point, value in zip(table.points, table.mean):
        out.write(f"{point:.2f},{value:.6f}\n")
    return out.getvalue()


def read_pr_csv(text: str) -> List[Tuple[float, float]]:
    """Parse the output of `export_pr_csv`"""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "recall,mean_precision":
        raise ParseError("missing recall,mean_precision header", line_number=1)
    rows = []
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            recall, precision = (float(v) for v in line.split(","))
        except ValueError as exc:
            raise ParseError(f"bad PR row {line!r}", line_number=line_number) from exc
        rows.append((recall, precision))
    return rows


@dataclasses.dataclass
class EvalReport:
    """Everything the eval command prints"""

    thresholds: Dict[str, Any]
    class_names: Tuple[str, ...]
    ap: Dict[str, APResult]
    precision: PrecisionTable
    map_07plus: float
    size_recall: SizeRecall
    num_detections: int

    def to_dict(self) -> Dict[str, Any]:
        def per_class(result: APResult) -> Dict[str, float]:
            return {self.class_names[cid - 1]: value for cid, value in result.per_class.items()}

        return {
            "thresholds": self.thresholds,
            "num_detections": self.num_detections,
            "map": {method: result.mean for method, result in self.ap.items()},
            "ap": {method: per_class(result) for method, result in self.ap.items()},
            "excluded_classes": [
                self.class_names[cid - 1] for cid in self.ap[AP_METHODS[0]].excluded
            ],
            "precision_at_recall": {
                f"{p:.1f}": value for p, value in zip(self.precision.points, self.precision.mean)
            },
            "map_07plus": self.map_07plus,
            "size_recall": {
                name: {
                    "detected": bucket.detected,
                    "total": bucket.total,
                    "recall": bucket.recall,
                }
                for name, bucket in self.size_recall.buckets.items()
            },
        }

    def format_text(self) -> str:
        lines = ["thresholds: " + " ".join(f"{k}={v}" for k, v in self.thresholds.items())]
        for method, result in self.ap.items():
            lines.append(f"mAP[{method}]: {result.mean:.4f}")
        primary = self.ap[AP_METHODS[0]]
        for cid, value in primary.per_class.items():
            lines.append(f"  AP {self.class_names[cid - 1]}: {value:.4f}")
        for cid in primary.excluded:
            lines.append(f"  AP {self.class_names[cid - 1]}: excluded (no ground truth)")
        points = zip(self.precision.points, self.precision.mean)
        lines.append("precision@recall: " + " ".join(f"{p:.1f}={format_percent(v)}" for p, v in points))
        lines.append(f"mAP@0.7+: {format_percent(self.map_07plus)}")
        for name, bucket in self.size_recall.buckets.items():
            ratio = "n/a" if bucket.recall is None else f"{bucket.recall:.4f}"
            lines.append(f"recall[{name}]: {bucket.detected}/{bucket.total} = {ratio}")
        return "\n".join(lines) + "\n"


def evaluate(
    dets: Sequence[Detection],
    gts: GroundTruths,
    image_sizes: Mapping[str, Tuple[int, int]],
    class_names: Sequence[str],
    *,
    iou_threshold: float = 0.5,
    size_score_threshold: float = 0.1,
    size_iou_threshold: float = 0.5,
    raw_precision: bool = False,
    extra_thresholds: Optional[Mapping[str, Any]] = None,
) -> EvalReport:
    """Full metric report for one detection set"""
    curves = pr_curves(dets, gts, len(class_names) + 1, iou_threshold)
    points = tuple(sorted(set(REPORT_RECALL_POINTS) | set(HIGH_RECALL_POINTS)))
    table = precision_at_recall(curves, points, interpolated=not raw_precision)
    thresholds: Dict[str, Any] = dict(extra_thresholds or {})
    thresholds.update(
        {
            "iou": iou_threshold,
            "size_score": size_score_threshold,
            "size_iou": size_iou_threshold,
            "precision": "raw" if raw_precision else "interpolated",
        }
    )
    return EvalReport(
        thresholds=thresholds,
        class_names=tuple(class_names),
        ap={method: mean_average_precision(curves, method) for method in AP_METHODS},
        precision=table,
        map_07plus=map_at_recall_07plus(table),
        size_recall=size_stratified_recall(
            dets, gts, size_score_threshold, size_iou_threshold, image_sizes
        ),
        num_detections=len(dets),
    )
