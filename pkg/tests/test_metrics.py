import numpy as np
import pytest

from rainbowssd.boxes import GroundTruth
from rainbowssd.exceptions import ParseError, ValidationError
from rainbowssd.metrics import (
    HIGH_RECALL_POINTS,
    average_precision,
    evaluate,
    export_pr_csv,
    format_percent,
    map_at_recall_07plus,
    mean_average_precision,
    pr_curve,
    pr_curves,
    precision_at_recall,
    read_pr_csv,
    size_stratified_recall,
)
from rainbowssd.postprocess import Detection

G1 = (0.1, 0.1, 0.3, 0.3)
G2 = (0.6, 0.6, 0.9, 0.9)
G3 = (0.1, 0.1, 0.4, 0.4)
G4 = (0.5, 0.5, 0.8, 0.8)


def five_detection_case():
    """Four objects in two images; sweep is TP FP TP TP FP"""
    gts = {
        "a": [GroundTruth(1, G1), GroundTruth(1, G2)],
        "b": [GroundTruth(1, G3), GroundTruth(1, G4)],
    }
    dets = [
        Detection("a", 1, 0.9, G1),
        Detection("a", 1, 0.8, (0.0, 0.6, 0.2, 0.9)),
        Detection("b", 1, 0.7, G3),
        Detection("b", 1, 0.6, G4),
        Detection("a", 1, 0.5, G1),
    ]
    return dets, gts


def box_iou(a, b) -> float:
    """Scalar corner-form IoU"""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def oracle_flags(dets, gts, class_id, threshold):
    """Reference greedy VOC matching with explicit loops"""
    ordered = sorted(
        (d for d in dets if d.class_id == class_id),
        key=lambda d: (-d.score, d.image_id, d.box),
    )
    used = set()
    flags = []
    for det in ordered:
        best, best_iou = None, -1.0
        for idx, gt in enumerate(gts[det.image_id]):
            if gt.class_id != class_id:
                continue
            overlap = box_iou(det.box, gt.box)
            if overlap > best_iou:
                best, best_iou = idx, overlap
        hit = best is not None and best_iou >= threshold and (det.image_id, best) not in used
        if hit:
            used.add((det.image_id, best))
        flags.append(hit)
    return flags


def random_instance(rng, images: int):
    """Ground truth plus jittered, duplicated and spurious detections"""
    gts, dets = {}, []
    for idx in range(images):
        image_id = f"img{idx}"
        gts[image_id] = []
        for _ in range(int(rng.integers(1, 4))):
            x0, y0 = rng.uniform(0, 0.6, size=2)
            w, h = rng.uniform(0.1, 0.4, size=2)
            gt = GroundTruth(int(rng.integers(1, 3)), (x0, y0, x0 + w, y0 + h))
            gts[image_id].append(gt)
            for _ in range(int(rng.integers(0, 3))):
                jitter = rng.normal(scale=0.05, size=4)
                box = tuple(float(v) for v in np.array(gt.box) + jitter)
                if box[0] < box[2] and box[1] < box[3]:
                    dets.append(Detection(image_id, gt.class_id, float(rng.uniform()), box))
        for _ in range(int(rng.integers(0, 3))):
            x0, y0 = rng.uniform(0, 0.8, size=2)
            dets.append(
                Detection(image_id, int(rng.integers(1, 3)), float(rng.uniform()), (x0, y0, x0 + 0.1, y0 + 0.1))
            )
    return dets, gts


def test_single_perfect_detection():
    """One detection on the only object"""
    curve = pr_curve([Detection("a", 1, 0.7, G1)], {"a": [GroundTruth(1, G1)]})
    assert curve.precision.tolist() == [1.0]
    assert curve.recall.tolist() == [1.0]


def test_duplicate_is_false_positive():
    """A second detection of a used object counts against precision"""
    dets = [Detection("a", 1, 0.9, G1), Detection("a", 1, 0.8, G1)]
    curve = pr_curve(dets, {"a": [GroundTruth(1, G1)]})
    assert curve.tp.tolist() == [True, False]
    assert curve.precision[-1] == 0.5
    assert curve.recall[-1] == 1.0


def test_unknown_image():
    """Detections for images without annotations are rejected by id"""
    with pytest.raises(ValidationError, match="'ghost'"):
        pr_curve([Detection("ghost", 1, 0.5, G1)], {"a": [GroundTruth(1, G1)]})


def test_difficult_objects_ignored():
    """Difficult objects neither count as positives nor penalize detections"""
    gts = {"a": [GroundTruth(1, G1), GroundTruth(1, G2, difficult=True)]}
    dets = [Detection("a", 1, 0.9, G2), Detection("a", 1, 0.8, G1)]
    curve = pr_curve(dets, gts)
    assert curve.npos == 1
    assert curve.ignored == 1
    assert curve.tp.tolist() == [True]
    assert average_precision(curve) == 1.0


def test_hand_enumerated_ap():
    """Eleven-point and all-point AP of the five detection sweep"""
    dets, gts = five_detection_case()
    curve = pr_curve(dets, gts)
    assert curve.tp.tolist() == [True, False, True, True, False]
    np.testing.assert_allclose(curve.precision, [1, 0.5, 2 / 3, 0.75, 0.6])
    np.testing.assert_allclose(curve.recall, [0.25, 0.25, 0.5, 0.75, 0.75])
    # r in {0, .1, .2} -> 1; r in {.3, ..., .7} -> .75; r in {.8, .9, 1} -> 0
    assert average_precision(curve, "interp11") == pytest.approx((3 * 1.0 + 5 * 0.75) / 11)
    assert average_precision(curve, "all_points") == pytest.approx(0.25 + 0.25 * 0.75 + 0.25 * 0.75)


def test_order_invariance(rng):
    """Input order of detections does not change the curve"""
    dets, gts = five_detection_case()
    reference = pr_curve(dets, gts)
    shuffled = [dets[i] for i in rng.permutation(len(dets))]
    assert pr_curve(shuffled, gts).tp.tolist() == reference.tp.tolist()


@pytest.mark.parametrize("seed", range(4))
def test_matching_oracle(seed):
    """TP flags equal the loop reference on random ten-image instances"""
    dets, gts = random_instance(np.random.default_rng(seed), 10)
    curves = pr_curves(dets, gts, num_classes=3)
    for class_id, curve in curves.items():
        assert curve.tp.tolist() == oracle_flags(dets, gts, class_id, 0.5)
        assert curve.npos == sum(gt.class_id == class_id for v in gts.values() for gt in v)


def test_perfect_and_empty_detectors():
    """AP is 1 for a perfect detector and 0 when nothing is found"""
    _, gts = five_detection_case()
    perfect = [Detection(i, 1, 0.9, gt.box) for i, v in gts.items() for gt in v]
    for method in ("interp11", "all_points"):
        assert average_precision(pr_curve(perfect, gts), method) == pytest.approx(1.0)
        assert average_precision(pr_curve([], gts, class_id=1), method) == 0.0


def test_class_without_objects_excluded():
    """Classes with no ground truth are flagged, not averaged"""
    dets, gts = five_detection_case()
    result = mean_average_precision(pr_curves(dets, gts, num_classes=3))
    assert result.excluded == [2]
    assert list(result.per_class) == [1]
    assert result.mean == result.per_class[1]
    with pytest.raises(ValidationError):
        average_precision(pr_curve(dets, gts), "bogus")


def test_precision_at_recall_two_classes():
    """Class-averaged interpolated and raw precision"""
    dets, gts = five_detection_case()
    gts["b"].append(GroundTruth(2, G2))
    dets.append(Detection("b", 2, 0.95, G2))
    curves = pr_curves(dets, gts, num_classes=3)
    table = precision_at_recall(curves, (0.5, 0.7, 1.0))
    assert table.per_class[1] == pytest.approx((0.75, 0.75, 0.0))
    assert table.per_class[2] == pytest.approx((1.0, 1.0, 1.0))
    assert table.mean == pytest.approx((0.875, 0.875, 0.5))
    raw = precision_at_recall(curves, (0.5, 0.7, 1.0), interpolated=False)
    assert raw.per_class[1] == pytest.approx((2 / 3, 0.75, 0.0))
    with pytest.raises(ValidationError):
        precision_at_recall(curves, (1.5,))


def test_unreachable_recall_is_zero():
    """Full recall that is never reached reports zero precision"""
    dets, gts = five_detection_case()
    table = precision_at_recall(pr_curves(dets, gts, 2), HIGH_RECALL_POINTS)
    assert table.value_at(1.0) == 0.0


@pytest.mark.parametrize(
    "row,reported",
    [((0.800, 0.662, 0.356, 0.0), "45.5"), ((0.849, 0.764, 0.493, 0.0), "52.7"), ((0.0,) * 4, "0.0")],
)
def test_map_07plus(row, reported):
    """Mean of the four high-recall precisions"""
    value = map_at_recall_07plus(dict(zip(HIGH_RECALL_POINTS, row)))
    assert format_percent(value) == reported


@pytest.mark.parametrize(
    "value,text", [(0.5265, "52.7"), (0.4545, "45.5"), (0.12345, "12.3"), (1.0, "100.0"), (0.0, "0.0")]
)
def test_format_percent(value, text):
    """One decimal, halves rounded up"""
    assert format_percent(value) == text


def test_map_07plus_from_table():
    """The high-recall mean reads straight off a precision table"""
    dets, gts = five_detection_case()
    table = precision_at_recall(pr_curves(dets, gts, 2), HIGH_RECALL_POINTS)
    assert map_at_recall_07plus(table) == pytest.approx((0.75 + 0 + 0 + 0) / 4)


def test_size_bucket_boundaries():
    """Pixel areas just around 32^2 and 96^2"""
    size = (1000, 1000)
    boxes = {
        "small": (0.1, 0.1, 0.131, 0.133),  # 31 x 33 = 1023
        "medium": (0.2, 0.2, 0.225, 0.241),  # 25 x 41 = 1025
        "edge": (0.5, 0.5, 0.532, 0.532),  # 32 x 32 = 1024
        "large": (0.3, 0.1, 0.313, 0.809),  # 13 x 709 = 9217
    }
    gts = {"img": [GroundTruth(1, box) for box in boxes.values()]}
    result = size_stratified_recall([], gts, image_sizes={"img": size})
    assert {k: v.total for k, v in result.buckets.items()} == {"small": 1, "medium": 2, "large": 1}
    assert result.recall("small") == 0.0


def test_size_recall_counts():
    """Same-class detections above the score threshold recover their objects"""
    gts = {
        "a": [GroundTruth(1, (0.0, 0.0, 0.02, 0.02)), GroundTruth(2, (0.1, 0.1, 0.5, 0.5))],
        "b": [GroundTruth(1, (0.0, 0.0, 0.9, 0.9))],
    }
    sizes = {"a": (1000, 1000), "b": (200, 200)}
    dets = [
        Detection("a", 1, 0.5, (0.0, 0.0, 0.02, 0.02)),
        Detection("a", 1, 0.9, (0.1, 0.1, 0.5, 0.5)),
        Detection("b", 1, 0.05, (0.0, 0.0, 0.9, 0.9)),
    ]
    result = size_stratified_recall(dets, gts, 0.1, 0.5, sizes)
    assert result.buckets["small"].detected == 1
    assert result.buckets["large"].detected == 0
    assert result.buckets["large"].total == 2
    assert result.recall("medium") is None
    with pytest.raises(ValidationError):
        size_stratified_recall(dets, gts, image_sizes={"a": (1000, 1000)})


def test_small_object_blind_detector():
    """A detector that finds everything but small objects reports small recall 0 and large recall 1"""
    planted = {
        "small": [(0.1, 0.1, 0.131, 0.133), (0.6, 0.1, 0.62, 0.12)],  # 31 x 33, 20 x 20
        "medium": [(0.3, 0.3, 0.332, 0.332), (0.3, 0.6, 0.395, 0.697)],  # 32 x 32, 95 x 97
        "large": [(0.6, 0.6, 0.696, 0.696), (0.0, 0.7, 0.3, 1.0)],  # 96 x 96, 300 x 300
    }
    gts = {"a": [], "b": []}
    dets = []
    for idx, (bucket, boxes) in enumerate(planted.items()):
        for image_id, box in zip(("a", "b"), boxes):
            gts[image_id].append(GroundTruth(idx + 1, box))
            if bucket == "small":
                dets.append(Detection(image_id, idx + 1, 0.8, (0.9, 0.0, 0.95, 0.05)))
            else:
                dets.append(Detection(image_id, idx + 1, 0.9, box))
    sizes = {"a": (1000, 1000), "b": (1000, 1000)}
    report = evaluate(dets, gts, sizes, ("disc", "square", "triangle"))
    recall = report.to_dict()["size_recall"]
    assert recall["small"] == {"detected": 0, "total": 2, "recall": 0.0}
    assert recall["medium"] == {"detected": 2, "total": 2, "recall": 1.0}
    assert recall["large"] == {"detected": 2, "total": 2, "recall": 1.0}
    text = report.format_text()
    assert "recall[small]: 0/2 = 0.0000" in text
    assert "recall[large]: 2/2 = 1.0000" in text


def test_size_recall_oracle(rng):
    """Pooled recall equals a per-object check on a twenty object instance"""
    dets, gts = random_instance(rng, 10)
    while sum(len(v) for v in gts.values()) < 20:
        more_dets, more_gts = random_instance(rng, 5)
        for image_id, image_gts in more_gts.items():
            gts[f"x{len(gts)}"] = image_gts
            dets.extend(
                Detection(f"x{len(gts) - 1}", d.class_id, d.score, d.box)
                for d in more_dets
                if d.image_id == image_id
            )
    sizes = {image_id: (300, 300) for image_id in gts}
    result = size_stratified_recall(dets, gts, 0.1, 0.5, sizes)
    found = 0
    for image_id, image_gts in gts.items():
        for gt in image_gts:
            found += any(
                d.image_id == image_id
                and d.class_id == gt.class_id
                and d.score > 0.1
                and box_iou(d.box, gt.box) >= 0.5
                for d in dets
            )
    assert sum(b.detected for b in result.buckets.values()) == found
    assert sum(b.total for b in result.buckets.values()) == sum(len(v) for v in gts.values())


def test_pr_csv_perfect_and_empty():
    """Perfect curves export all ones, empty ones all zeros"""
    _, gts = five_detection_case()
    perfect = [Detection(i, 1, 0.9, gt.box) for i, v in gts.items() for gt in v]
    rows = read_pr_csv(export_pr_csv(pr_curves(perfect, gts, 2)))
    assert len(rows) == 101
    assert rows[0] == (0.0, 1.0) and rows[-1] == (1.0, 1.0)
    assert all(p == 1.0 for _, p in rows)
    rows = read_pr_csv(export_pr_csv(pr_curves([], gts, 2)))
    assert all(p == 0.0 for _, p in rows)


def test_pr_csv_round_trip():
    """Re-imported rows reproduce the precision table"""
    dets, gts = five_detection_case()
    curves = pr_curves(dets, gts, 2)
    text = export_pr_csv(curves)
    assert text.splitlines()[0] == "recall,mean_precision"
    assert text.splitlines()[51] == "0.50,0.750000"
    rows = dict(read_pr_csv(text))
    table = precision_at_recall(curves, (0.25, 0.5, 0.76))
    for point, value in zip(table.points, table.mean):
        assert rows[point] == pytest.approx(value, abs=1e-6)


def test_pr_csv_parse_errors():
    """Missing header and bad rows carry line numbers"""
    with pytest.raises(ParseError, match="line 1"):
        read_pr_csv("0.0,1.0\n")
    with pytest.raises(ParseError, match="line 3"):
        read_pr_csv("recall,mean_precision\n0.00,1.0\nbad\n")


def test_evaluate_report():
    """The full report combines every metric"""
    dets, gts = five_detection_case()
    sizes = {"a": (100, 100), "b": (100, 100)}
    report = evaluate(dets, gts, sizes, ("cat", "dog"))
    data = report.to_dict()
    assert data["excluded_classes"] == ["dog"]
    assert data["ap"]["interp11"]["cat"] == pytest.approx(6.75 / 11)
    assert data["map"]["all_points"] == pytest.approx(0.625)
    assert data["precision_at_recall"]["0.7"] == pytest.approx(0.75)
    assert data["map_07plus"] == pytest.approx(0.1875)
    assert data["num_detections"] == 5
    text = report.format_text()
    assert "mAP@0.7+: 18.8" in text
    assert "AP dog: excluded" in text
