"""
Synthetic shapes dataset, in-memory annotation types and dataset statistics.

Annotation boxes are in pixels with exclusive max edges, so a box covering
columns 3..9 has xmin 3 and xmax 10. Network-facing ground truths are the
same boxes divided by the image size.
"""
import dataclasses
import logging
from collections import Counter
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from rainbowssd.boxes import GroundTruth, iou_matrix
from rainbowssd.config import SHAPE_CLASSES
from rainbowssd.exceptions import ConfigError, GenerationError, ValidationError

LOGGER = logging.getLogger(__name__)

SMALL_AREA = 32 * 32
LARGE_AREA = 96 * 96
BUCKETS = ("small", "medium", "large")

# Side-length ranges whose every w x h product stays inside one bucket.
_SIDE_RANGES = {"small": (8, 31), "medium": (32, 95), "large": (96, 112)}


def size_bucket(area: float) -> str:
    """small below 32^2, medium below 96^2, large otherwise"""
    if area < SMALL_AREA:
        return "small"
    if area < LARGE_AREA:
        return "medium"
    return "large"


@dataclasses.dataclass(frozen=True)
class ImageInfo:
    image_id: str
    width: int
    height: int


@dataclasses.dataclass(frozen=True)
class ObjectAnnotation:
    """One object, box in pixels"""

    image_id: str
    class_id: int
    box: Tuple[float, float, float, float]
    difficult: bool = False

    @property
    def area(self) -> float:
        xmin, ymin, xmax, ymax = self.box
        return max(0.0, xmax - xmin) * max(0.0, ymax - ymin)


@dataclasses.dataclass
class AnnotationSet:
    """Images and their objects; class ids index `class_names` from 1"""

    class_names: Tuple[str, ...]
    images: List[ImageInfo] = dataclasses.field(default_factory=list)
    objects: List[ObjectAnnotation] = dataclasses.field(default_factory=list)

    def image(self, image_id: str) -> ImageInfo:
        for info in self.images:
            if info.image_id == image_id:
                return info
        raise ValidationError(f"unknown image id {image_id!r}")

    def image_sizes(self) -> Dict[str, Tuple[int, int]]:
        return {info.image_id: (info.width, info.height) for info in self.images}

    def objects_by_image(self) -> Dict[str, List[ObjectAnnotation]]:
        result: Dict[str, List[ObjectAnnotation]] = {info.image_id: [] for info in self.images}
        for obj in self.objects:
            if obj.image_id not in result:
                raise ValidationError(f"object refers to unknown image id {obj.image_id!r}")
            result[obj.image_id].append(obj)
        return result

    def class_id(self, name: str) -> int:
        try:
            return self.class_names.index(name) + 1
        except ValueError as exc:
            raise ValidationError(
                f"unknown class {name!r}, expected one of {', '.join(self.class_names)}"
            ) from exc

    def ground_truths(self) -> Dict[str, List[GroundTruth]]:
        """Normalized ground truths per image id"""
        sizes = self.image_sizes()
        result: Dict[str, List[GroundTruth]] = {}
        for image_id, objects in self.objects_by_image().items():
            width, height = sizes[image_id]
            result[image_id] = [
                GroundTruth(
                    obj.class_id,
                    (
                        obj.box[0] / width,
                        obj.box[1] / height,
                        obj.box[2] / width,
                        obj.box[3] / height,
                    ),
                    obj.difficult,
                )
                for obj in objects
            ]
        return result

    def validate(self) -> None:
        """Check ids, class range and box bounds"""
        seen = set()
        for info in self.images:
            if info.image_id in seen:
                raise ValidationError(f"duplicate image id {info.image_id!r}")
            seen.add(info.image_id)
        sizes = self.image_sizes()
        for obj in self.objects:
            if obj.image_id not in sizes:
                raise ValidationError(f"object refers to unknown image id {obj.image_id!r}")
            if not 1 <= obj.class_id <= len(self.class_names):
                raise ValidationError(f"class id {obj.class_id} out of range")
            width, height = sizes[obj.image_id]
            xmin, ymin, xmax, ymax = obj.box
            if not (0 <= xmin < xmax <= width and 0 <= ymin < ymax <= height):
                raise ValidationError(
                    f"box {obj.box} of image {obj.image_id!r} is outside {width}x{height}"
                )


class DatasetStats(NamedTuple):
    buckets: Dict[str, int]
    per_class: Dict[str, int]
    images: int
    objects: int


def dataset_stats(ann: AnnotationSet) -> DatasetStats:
    """Object counts per size bucket and per class"""
    buckets = Counter({name: 0 for name in BUCKETS})
    per_class = Counter({name: 0 for name in ann.class_names})
    for obj in ann.objects:
        buckets[size_bucket(obj.area)] += 1
        per_class[ann.class_names[obj.class_id - 1]] += 1
    return DatasetStats(dict(buckets), dict(per_class), len(ann.images), len(ann.objects))


@dataclasses.dataclass
class SyntheticSpec:
    """Knobs of the synthetic shapes generator"""

    image_size: int = 160
    classes: Tuple[str, ...] = SHAPE_CLASSES
    objects_per_image: Tuple[int, int] = (1, 3)
    size_weights: Tuple[float, float, float] = (0.3, 0.4, 0.3)
    seed: int = 0
    max_overlap: float = 0.3
    max_retries: int = 200

    def validate(self) -> None:
        if len(self.size_weights) != 3 or min(self.size_weights) < 0:
            raise ConfigError("size_weights needs three non-negative entries")
        if abs(sum(self.size_weights) - 1.0) > 1e-9:
            raise ConfigError(f"size_weights must sum to 1, got {sum(self.size_weights)}")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid objects_per_image range {self.objects_per_image}")
        for name in self.classes:
            if name not in _MASKS:
                raise ConfigError(f"unknown shape class {name!r}")
        for bucket, weight in zip(BUCKETS, self.size_weights):
            if weight > 0 and _SIDE_RANGES[bucket][0] > self.image_size:
                raise ConfigError(
                    f"{bucket} objects do not fit in {self.image_size}x{self.image_size} images"
                )


def _square_mask(h: int, w: int) -> np.ndarray:
    return np.ones((h, w), dtype=bool)


def _disc_mask(h: int, w: int) -> np.ndarray:
    rows, cols = np.ogrid[:h, :w]
    dy = (rows + 0.5 - h / 2) / (h / 2)
    dx = (cols + 0.5 - w / 2) / (w / 2)
    return dx * dx + dy * dy <= 1.0


def _triangle_mask(h: int, w: int) -> np.ndarray:
    rows, cols = np.ogrid[:h, :w]
    half = np.maximum((rows + 1) / h * w / 2, 0.5)
    return np.abs(cols + 0.5 - w / 2) <= half


def _ring_mask(h: int, w: int) -> np.ndarray:
    rows, cols = np.ogrid[:h, :w]
    dy = (rows + 0.5 - h / 2) / (h / 2)
    dx = (cols + 0.5 - w / 2) / (w / 2)
    r2 = dx * dx + dy * dy
    return (r2 <= 1.0) & (r2 >= 0.35)


_MASKS = {
    "disc": _disc_mask,
    "square": _square_mask,
    "triangle": _triangle_mask,
    "ring": _ring_mask,
}


def _mask_box(mask: np.ndarray, x0: int, y0: int) -> Optional[Tuple[int, int, int, int]]:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if len(rows) == 0:
        return None
    return (x0 + int(cols[0]), y0 + int(rows[0]), x0 + int(cols[-1]) + 1, y0 + int(rows[-1]) + 1)


class _Placed(NamedTuple):
    class_id: int
    mask: np.ndarray
    x0: int
    y0: int
    box: Tuple[int, int, int, int]


def _place_objects(
    rng: np.random.Generator, spec: SyntheticSpec, buckets: Sequence[str]
) -> Optional[List[_Placed]]:
    size = spec.image_size
    placed: List[_Placed] = []
    for bucket in buckets:
        lo, hi = _SIDE_RANGES[bucket]
        hi = min(hi, size)
        for _ in range(spec.max_retries):
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            class_idx = int(rng.integers(len(spec.classes)))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            mask = _MASKS[spec.classes[class_idx]](h, w)
            box = _mask_box(mask, x0, y0)
            if box is None:
                continue
            if size_bucket((box[2] - box[0]) * (box[3] - box[1])) != bucket:
                continue
            if placed:
                overlaps = iou_matrix(np.array([box]), np.array([p.box for p in placed]))
                if overlaps.max() > spec.max_overlap:
                    continue
            placed.append(_Placed(class_idx + 1, mask, x0, y0, box))
            break
        else:
            return None
    return placed


def generate_dataset(
    spec: SyntheticSpec, n_images: int, *, prefix: str = "img"
) -> Tuple[np.ndarray, AnnotationSet]:
    """
    Render `n_images` images of random shapes. Returns an (n, 3, S, S) float32
    array with values in [0, 1] and the exact annotations. Output depends only
    on `spec` and `n_images`.
    """
    spec.validate()
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    images = np.empty((n_images, 3, size, size), dtype=np.float32)
    ann = AnnotationSet(class_names=tuple(spec.classes))
    lo, hi = spec.objects_per_image

    for idx in range(n_images):
        image_id = f"{prefix}{idx:05d}"
        count = int(rng.integers(lo, hi + 1))
        buckets = [BUCKETS[b] for b in rng.choice(3, size=count, p=spec.size_weights)]
        placed = None
        for _ in range(10):
            placed = _place_objects(rng, spec, buckets)
            if placed is not None:
                break
        if placed is None:
            raise GenerationError(
                f"could not place {count} objects ({', '.join(buckets)}) in image "
                f"{image_id} without overlap above {spec.max_overlap}; use fewer or "
                "smaller objects"
            )

        background = rng.uniform(0.0, 0.3, size=3)
        image = np.repeat(background[:, None, None], size, axis=1).repeat(size, axis=2)
        image += rng.normal(0.0, 0.02, size=image.shape)
        for obj in placed:
            color = rng.uniform(0.5, 1.0, size=3)
            h, w = obj.mask.shape
            region = image[:, obj.y0 : obj.y0 + h, obj.x0 : obj.x0 + w]
            region[:, obj.mask] = color[:, None]
            ann.objects.append(
                ObjectAnnotation(image_id, obj.class_id, tuple(float(v) for v in obj.box))  # type: ignore[arg-type]
            )
        images[idx] = np.clip(image, 0.0, 1.0)
        ann.images.append(ImageInfo(image_id, size, size))

    LOGGER.info("generated %d images with %d objects", n_images, len(ann.objects))
    return images, ann


def resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of an (n, c, h, w) batch to size x size"""
    _, _, h, w = images.shape
    if (h, w) == (size, size):
        return images
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return images[:, :, rows[:, None], cols[None, :]]


def flip_horizontal(
    images: np.ndarray, gts: Sequence[Sequence[GroundTruth]]
) -> Tuple[np.ndarray, List[List[GroundTruth]]]:
    """Mirror images left to right along with their normalized boxes"""
    flipped = [
        [
            GroundTruth(gt.class_id, (1.0 - gt.box[2], gt.box[1], 1.0 - gt.box[0], gt.box[3]), gt.difficult)
            for gt in image_gts
        ]
        for image_gts in gts
    ]
    return np.ascontiguousarray(images[..., ::-1]), flipped
