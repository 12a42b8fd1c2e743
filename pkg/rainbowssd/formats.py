"""
On-disk formats: JSON-lines annotations, plain-text detections and RT4 image
batches. Files are in pixels; conversion to normalized boxes happens here.
"""
import json
import logging
import math
from typing import IO, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from rainbowssd.data import AnnotationSet, ImageInfo, ObjectAnnotation
from rainbowssd.exceptions import DataError, ParseError, ValidationError
from rainbowssd.postprocess import Detection
from rainbowssd.tensor import read_tensor, write_tensor

LOGGER = logging.getLogger(__name__)

PathOrFile = Union[str, IO[str]]


def format_number(value: float) -> str:
    """Integral values print without a fraction, others with up to 4 decimals"""
    if math.isclose(value, round(value), abs_tol=1e-9):
        return str(int(round(value)))
    text = f"{value:.4f}".rstrip("0")
    return text.rstrip(".")


def _json_number(value: float) -> Union[int, float]:
    if math.isclose(value, round(value), abs_tol=1e-9):
        return int(round(value))
    return float(value)


def open_text(target: PathOrFile, mode: str):
    """Open a text path, or pass an open file through without closing it"""
    if isinstance(target, str):
        try:
            return open(target, mode, encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot open {target!r}: {exc}") from exc
    return _NoClose(target)


class _NoClose:
    def __init__(self, fobj: IO[str]) -> None:
        self.fobj = fobj

    def __enter__(self) -> IO[str]:
        return self.fobj

    def __exit__(self, *exc) -> None:
        pass


def _clamp_box(
    box: Tuple[float, float, float, float], width: int, height: int, where: str, line: int
) -> Tuple[float, float, float, float]:
    xmin, ymin, xmax, ymax = box
    clamped = (
        min(max(xmin, 0.0), width),
        min(max(ymin, 0.0), height),
        min(max(xmax, 0.0), width),
        min(max(ymax, 0.0), height),
    )
    if clamped != box:
        LOGGER.warning("line %d: %s box %s outside %dx%d, clamped", line, where, box, width, height)
    if not (clamped[0] < clamped[2] and clamped[1] < clamped[3]):
        raise ParseError(f"{where} box {box} is empty", line_number=line)
    return clamped


def write_annotations(target: PathOrFile, ann: AnnotationSet) -> None:
    """One JSON object per image, in image order"""
    by_image = ann.objects_by_image()
    with open_text(target, "w") as fout:
        for info in ann.images:
            objects = []
            for obj in by_image[info.image_id]:
                entry = {
                    "class": ann.class_names[obj.class_id - 1],
                    "xmin": _json_number(obj.box[0]),
                    "ymin": _json_number(obj.box[1]),
                    "xmax": _json_number(obj.box[2]),
                    "ymax": _json_number(obj.box[3]),
                }
                if obj.difficult:
                    entry["difficult"] = True
                objects.append(entry)
            record = {
                "image_id": info.image_id,
                "width": info.width,
                "height": info.height,
                "objects": objects,
            }
            fout.write(json.dumps(record) + "\n")


def _parse_annotation_line(
    text: str, line: int
) -> Tuple[ImageInfo, List[Tuple[str, Tuple[float, float, float, float], bool]]]:
    try:
        record = json.loads(text)
        info = ImageInfo(str(record["image_id"]), int(record["width"]), int(record["height"]))
        if info.width < 1 or info.height < 1:
            raise ParseError(f"image {info.image_id!r} has a non-positive size", line_number=line)
        objects = []
        for obj in record.get("objects", []):
            box = (float(obj["xmin"]), float(obj["ymin"]), float(obj["xmax"]), float(obj["ymax"]))
            objects.append((str(obj["class"]), box, bool(obj.get("difficult", False))))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"malformed annotation: {exc}", line_number=line) from exc
    return info, objects


def read_annotations(
    source: PathOrFile, class_names: Optional[Sequence[str]] = None
) -> AnnotationSet:
    """
    Parse a JSON-lines annotation file. Without `class_names` the class list
    is the sorted set of names in the file.
    """
    parsed = []
    with open_text(source, "r") as fin:
        for line_number, text in enumerate(fin, start=1):
            if not text.strip():
                continue
            parsed.append((line_number,) + _parse_annotation_line(text, line_number))

    if class_names is None:
        class_names = sorted({name for _, _, objs in parsed for name, _, _ in objs})
    ann = AnnotationSet(class_names=tuple(class_names))
    seen = set()
    for line_number, info, objects in parsed:
        if info.image_id in seen:
            raise ParseError(f"duplicate image id {info.image_id!r}", line_number=line_number)
        seen.add(info.image_id)
        ann.images.append(info)
        for name, box, difficult in objects:
            if name not in ann.class_names:
                raise ParseError(f"unknown class {name!r}", line_number=line_number)
            box = _clamp_box(box, info.width, info.height, info.image_id, line_number)
            ann.objects.append(
                ObjectAnnotation(info.image_id, ann.class_names.index(name) + 1, box, difficult)
            )
    LOGGER.debug("read %d images, %d objects", len(ann.images), len(ann.objects))
    return ann


class DetectionRecord(NamedTuple):
    """One line of a detections file, box in pixels"""

    image_id: str
    class_name: str
    score: float
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def format(self) -> str:
        coords = " ".join(format_number(v) for v in (self.xmin, self.ymin, self.xmax, self.ymax))
        return f"{self.image_id} {self.class_name} {self.score:.6f} {coords}"


def parse_detection_line(text: str, line_number: int = 0) -> DetectionRecord:
    """Parse "image_id class_name score xmin ymin xmax ymax" """
    fields = text.split()
    if len(fields) != 7:
        raise ParseError(
            f"expected 7 fields, got {len(fields)}", line_number=line_number
        )
    try:
        values = [float(v) for v in fields[2:]]
    except ValueError as exc:
        raise ParseError(f"bad number: {exc}", line_number=line_number) from exc
    if not all(math.isfinite(v) for v in values):
        raise ParseError("non-finite value", line_number=line_number)
    return DetectionRecord(fields[0], fields[1], *values)


def write_detection_records(target: PathOrFile, records: Iterable[DetectionRecord]) -> None:
    with open_text(target, "w") as fout:
        for record in records:
            fout.write(record.format() + "\n")


def read_detection_records(source: PathOrFile) -> List[DetectionRecord]:
    records = []
    with open_text(source, "r") as fin:
        for line_number, text in enumerate(fin, start=1):
            if text.strip():
                records.append(parse_detection_line(text, line_number))
    return records


def records_from_detections(
    dets: Iterable[Detection],
    class_names: Sequence[str],
    image_sizes: Dict[str, Tuple[int, int]],
) -> List[DetectionRecord]:
    """Scale normalized detections to pixel records"""
    records = []
    for det in dets:
        if det.image_id not in image_sizes:
            raise ValidationError(f"detection for unknown image id {det.image_id!r}")
        width, height = image_sizes[det.image_id]
        records.append(
            DetectionRecord(
                det.image_id,
                class_names[det.class_id - 1],
                det.score,
                det.box[0] * width,
                det.box[1] * height,
                det.box[2] * width,
                det.box[3] * height,
            )
        )
    return records


def detections_from_records(
    records: Iterable[DetectionRecord],
    class_names: Sequence[str],
    image_sizes: Dict[str, Tuple[int, int]],
) -> List[Detection]:
    """Normalize pixel records; unknown classes or images are validation errors"""
    dets = []
    for record in records:
        if record.image_id not in image_sizes:
            raise ValidationError(f"detection for unknown image id {record.image_id!r}")
        if record.class_name not in class_names:
            raise ValidationError(f"detection of unknown class {record.class_name!r}")
        width, height = image_sizes[record.image_id]
        dets.append(
            Detection(
                record.image_id,
                list(class_names).index(record.class_name) + 1,
                record.score,
                (
                    record.xmin / width,
                    record.ymin / height,
                    record.xmax / width,
                    record.ymax / height,
                ),
            )
        )
    return dets


def quantize_records(records: Iterable[DetectionRecord]) -> List[DetectionRecord]:
    """Records exactly as they would read back from a detections file"""
    return [parse_detection_line(record.format()) for record in records]


def write_detections(
    target: PathOrFile,
    dets: Iterable[Detection],
    class_names: Sequence[str],
    image_sizes: Dict[str, Tuple[int, int]],
) -> None:
    write_detection_records(target, records_from_detections(dets, class_names, image_sizes))


def read_detections(
    source: PathOrFile,
    class_names: Sequence[str],
    image_sizes: Dict[str, Tuple[int, int]],
) -> List[Detection]:
    return detections_from_records(read_detection_records(source), class_names, image_sizes)


def write_images(path: str, images: np.ndarray) -> None:
    """Store an (n, c, h, w) image batch as one RT4 record"""
    try:
        fout = open(path, "wb")
    except OSError as exc:
        raise DataError(f"cannot open {path!r}: {exc}") from exc
    with fout:
        write_tensor(fout, images)


def read_images(path: str) -> np.ndarray:
    try:
        fin = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open {path!r}: {exc}") from exc
    with fin:
        images = read_tensor(fin, dtype=np.float32)
    LOGGER.debug("read image batch of shape %s from %s", images.shape, path)
    return images
