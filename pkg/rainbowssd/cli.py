import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from rainbowssd.boxes import count_boxes, generate_default_boxes, level_box_counts
from rainbowssd.checkpoint import load_checkpoint, save_checkpoint
from rainbowssd.config import FusionMode, RunConfig, load_run_config
from rainbowssd.data import AnnotationSet, SyntheticSpec, dataset_stats, generate_dataset, resize_nearest
from rainbowssd.exceptions import ConfigError, DataError, RainbowSSDException, ValidationError
from rainbowssd.formats import (
    DetectionRecord,
    detections_from_records,
    open_text,
    quantize_records,
    read_annotations,
    read_detection_records,
    read_images,
    records_from_detections,
    write_annotations,
    write_detection_records,
    write_images,
)
from rainbowssd.metrics import evaluate, export_pr_csv, pr_curves
from rainbowssd.model import SSDModel
from rainbowssd.postprocess import Detection, objectness_filter
from rainbowssd.pyramid import pyramid_shape_table
from rainbowssd.tensor import Tensor4, default_dtype, set_default_dtype
from rainbowssd.train import Trainer

LOGGER = logging.getLogger(__name__)

IMAGES_NAME = "images.rt4"
ANNOTATIONS_NAME = "annotations.jsonl"
EVAL_BATCH = 16

# flag dest -> (config section or None, config key)
_OVERRIDES = {
    "input_size": (None, "input_size"),
    "channel_scale": (None, "channel_scale"),
    "fusion": (None, "fusion"),
    "layout": (None, "layout"),
    "steps": ("train", "steps"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "seed": ("train", "seed"),
    "unshare_at_step": ("train", "unshare_at_step"),
    "dtype": ("train", "dtype"),
    "score_threshold": ("eval", "score_threshold"),
    "nms_threshold": ("eval", "nms_threshold"),
    "top_k": ("eval", "top_k"),
    "iou_threshold": ("eval", "iou_threshold"),
    "size_score_threshold": ("eval", "size_score_threshold"),
    "size_iou_threshold": ("eval", "size_iou_threshold"),
    "ap_method": ("eval", "ap_method"),
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="count", default=0)


def _add_config(parser: argparse.ArgumentParser, *, required: bool = True) -> None:
    parser.add_argument(
        "--config",
        required=required,
        default=None,
        help="Preset name (canonical-300, canonical-512, issd-300, toy-96) or JSON config path",
    )
    parser.add_argument("--input-size", type=int, default=None)
    parser.add_argument("--channel-scale", default=None, help="Channel multiplier, e.g. 1/16")
    parser.add_argument(
        "--fusion", default=None, choices=[mode.value for mode in FusionMode]
    )
    parser.add_argument(
        "--layout",
        default=None,
        help="Box layout: conventional, shared-4, shared-6 or comma separated counts",
    )


def _add_eval_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--score-threshold", type=float, default=None)
    parser.add_argument("--nms-threshold", type=float, default=None)
    parser.add_argument("--top-k", type=int, default=None)
    parser.add_argument("--iou-threshold", type=float, default=None)
    parser.add_argument("--size-score-threshold", type=float, default=None)
    parser.add_argument("--size-iou-threshold", type=float, default=None)
    parser.add_argument("--ap-method", default=None, choices=("interp11", "all_points"))
    parser.add_argument(
        "--raw-precision",
        action="store_const",
        default=False,
        const=True,
        help="Report raw rather than interpolated precision at fixed recall",
    )


def parse_args(args=None) -> argparse.Namespace:
    """
    Parse command line or passed arguments return the parsed namespace object
    as given from the argparse module.
    """
    parser = argparse.ArgumentParser(
        description="Single-shot detector with fused feature pyramids, trained from scratch"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train a model and write a checkpoint")
    _add_common(train)
    _add_config(train)
    train.add_argument("--data", required=True, help="Directory written by gen-data")
    train.add_argument("-o", "--output", required=True, help="Checkpoint path")
    train.add_argument("--log", default=None, help="JSON-lines training log path")
    train.add_argument("--steps", type=int, default=None)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--unshare-at-step", type=int, default=None)
    train.add_argument("--dtype", default=None, choices=("float32", "float64"))

    evaluate_cmd = sub.add_parser("eval", help="Evaluate a checkpoint or a detections file")
    _add_common(evaluate_cmd)
    _add_config(evaluate_cmd, required=False)
    _add_eval_options(evaluate_cmd)
    evaluate_cmd.add_argument("--checkpoint", default=None)
    evaluate_cmd.add_argument("--data", required=True, help="Directory written by gen-data")
    evaluate_cmd.add_argument(
        "--detections", default=None, help="Evaluate this detections file instead of a model"
    )
    evaluate_cmd.add_argument("--write-detections", default=None)
    evaluate_cmd.add_argument("--pr-csv", default=None)
    evaluate_cmd.add_argument(
        "--visualize",
        default=None,
        help="Write the detections scoring at least 0.3, the set drawn on images",
    )
    evaluate_cmd.add_argument(
        "--json", action="store_const", default=False, const=True, help="Emit JSON"
    )

    boxes = sub.add_parser("boxes", help="Print default-box counts per level")
    _add_common(boxes)
    _add_config(boxes)
    boxes.add_argument("--dump", default=None, help="Write every default box to this file")
    boxes.add_argument("--json", action="store_const", default=False, const=True)

    shapes = sub.add_parser("shapes", help="Print the fused pyramid shape table")
    _add_common(shapes)
    _add_config(shapes)
    shapes.add_argument("--json", action="store_const", default=False, const=True)

    gen = sub.add_parser("gen-data", help="Generate a synthetic shapes dataset")
    _add_common(gen)
    gen.add_argument("-o", "--output", default=None, help="Output directory")
    gen.add_argument("--images", type=int, default=100)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--image-size", type=int, default=SyntheticSpec.image_size)
    gen.add_argument(
        "--size-weights", default=None, help="small,medium,large mixture weights"
    )
    gen.add_argument("--objects", default=None, help="min,max objects per image")
    gen.add_argument("--prefix", default="img")
    gen.add_argument(
        "--stats", default=None, help="Only print statistics of this annotations file"
    )

    pr = sub.add_parser("pr-export", help="Write recall vs mean precision CSV")
    _add_common(pr)
    _add_config(pr, required=False)
    _add_eval_options(pr)
    pr.add_argument("--checkpoint", default=None)
    pr.add_argument("--data", required=True)
    pr.add_argument("--detections", default=None)
    pr.add_argument("-o", "--output", default=None, help="CSV path, stdout by default")

    return parser.parse_args(args=args)


def setup_logging(verbose: int) -> None:
    """Set our logging level and format based on verbosity level"""
    log_level = logging.ERROR
    log_format = "%(message)s"
    if verbose > 2:
        log_level = logging.DEBUG
        log_format = "%(levelname)s(%(module)s): %(message)s"
    elif verbose > 1:
        log_level = logging.INFO
        log_format = "%(levelname)s: %(message)s"
    elif verbose > 0:
        log_level = logging.WARNING

    logging.basicConfig(
        format=log_format,
        level=log_level,
        stream=sys.stderr,
    )


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    result: Dict[str, Any] = {}
    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "layout" and value not in ("conventional", "shared-4", "shared-6"):
            try:
                value = [int(v) for v in value.split(",")]
            except ValueError as exc:
                raise ConfigError(f"invalid --layout {value!r}") from exc
            result["boxes_per_position"] = value
            continue
        if section is None:
            result[key] = value
        else:
            result.setdefault(section, {})[key] = value
    if getattr(args, "raw_precision", False):
        result.setdefault("eval", {})["raw_precision"] = True
    return result


def _config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config, _overrides(args))


def _read_data(path: str, class_names=None) -> Tuple[np.ndarray, AnnotationSet]:
    images = read_images(os.path.join(path, IMAGES_NAME))
    ann = read_annotations(os.path.join(path, ANNOTATIONS_NAME), class_names)
    if len(images) != len(ann.images):
        raise ValidationError(
            f"{path}: {len(images)} images but {len(ann.images)} annotated images"
        )
    return images, ann


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    images, ann = _read_data(args.data, config.classes)
    prev_dtype = set_default_dtype(config.train.dtype)
    try:
        model = SSDModel(config, seed=config.train.seed)
        if args.log:
            with open_text(args.log, "w") as log:
                history = Trainer(model, images, ann, log=log).run()
        else:
            history = Trainer(model, images, ann).run()
        save_checkpoint(args.output, model, step=len(history))
    finally:
        set_default_dtype(prev_dtype)
    if history:
        print(
            f"trained {len(history)} steps: loss {history[0].total:.4f} -> "
            f"{history[-1].total:.4f}"
        )
    else:
        print("trained 0 steps")
    return 0


def _model_detections(
    model: SSDModel, images: np.ndarray, ann: AnnotationSet
) -> List[Detection]:
    size = model.config.pyramid.input_size
    dets: List[Detection] = []
    ids = [info.image_id for info in ann.images]
    for start in range(0, len(ids), EVAL_BATCH):
        batch = resize_nearest(images[start : start + EVAL_BATCH], size)
        tensor = Tensor4(batch.astype(default_dtype()), requires_grad=False)
        per_image = model.detect(tensor, ids[start : start + EVAL_BATCH])
        for image_id in ids[start : start + EVAL_BATCH]:
            dets.extend(per_image[image_id])
    return dets


def _records(
    args: argparse.Namespace,
) -> Tuple[RunConfig, List[DetectionRecord], AnnotationSet]:
    """Detection records from a file or from running a checkpoint"""
    if args.checkpoint is None and args.detections is None:
        raise ConfigError("either --checkpoint or --detections is required")

    if args.checkpoint is not None:
        model, _ = load_checkpoint(args.checkpoint)
        config = model.config
        overrides = _overrides(args).get("eval", {})
        for key, value in overrides.items():
            setattr(config.eval, key, value)
        config.eval.validate()
        images, ann = _read_data(args.data, config.classes)
        dets = _model_detections(model, images, ann)
        records = quantize_records(
            records_from_detections(dets, config.classes, ann.image_sizes())
        )
    else:
        if args.config is not None:
            config = _config(args)
            ann = read_annotations(os.path.join(args.data, ANNOTATIONS_NAME), config.classes)
        else:
            ann = read_annotations(os.path.join(args.data, ANNOTATIONS_NAME))
            config = load_run_config("toy-96", dict(_overrides(args), classes=list(ann.class_names)))
        records = read_detection_records(args.detections)
    return config, records, ann


def cmd_eval(args: argparse.Namespace) -> int:
    config, records, ann = _records(args)
    dets = detections_from_records(records, config.classes, ann.image_sizes())
    opts = config.eval
    report = evaluate(
        dets,
        ann.ground_truths(),
        ann.image_sizes(),
        config.classes,
        iou_threshold=opts.iou_threshold,
        size_score_threshold=opts.size_score_threshold,
        size_iou_threshold=opts.size_iou_threshold,
        raw_precision=opts.raw_precision,
        extra_thresholds={
            "score": opts.score_threshold,
            "nms": opts.nms_threshold,
            "top_k": opts.top_k,
            "ap_method": opts.ap_method,
        },
    )
    if args.write_detections:
        write_detection_records(args.write_detections, records)
    if args.visualize:
        shown = objectness_filter(dets)
        write_detection_records(
            args.visualize, records_from_detections(shown, config.classes, ann.image_sizes())
        )
    if args.pr_csv:
        curves = pr_curves(dets, ann.ground_truths(), config.num_classes, opts.iou_threshold)
        with open_text(args.pr_csv, "w") as fout:
            fout.write(export_pr_csv(curves, interpolated=not opts.raw_precision))
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    else:
        sys.stdout.write(report.format_text())
    return 0


def cmd_pr_export(args: argparse.Namespace) -> int:
    config, records, ann = _records(args)
    dets = detections_from_records(records, config.classes, ann.image_sizes())
    curves = pr_curves(dets, ann.ground_truths(), config.num_classes, config.eval.iou_threshold)
    text = export_pr_csv(curves, interpolated=not config.eval.raw_precision)
    if args.output:
        with open_text(args.output, "w") as fout:
            fout.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_boxes(args: argparse.Namespace) -> int:
    config = _config(args)
    assert config.layout is not None
    counts = level_box_counts(config.layout, config.pyramid)
    total = count_boxes(config.layout, config.pyramid)
    if args.dump:
        anchors = generate_default_boxes(config.layout, config.pyramid)
        with open_text(args.dump, "w") as fout:
            for row in anchors:
                fout.write(" ".join(repr(float(v)) for v in row) + "\n")
    if args.json:
        print(
            json.dumps(
                {
                    "layout": config.layout.describe(),
                    "levels": [
                        {"size": f, "boxes_per_position": k, "boxes": n}
                        for f, k, n in zip(
                            config.pyramid.spatial_sizes, config.layout.boxes_per_position, counts
                        )
                    ],
                    "total": total,
                },
                indent=2,
            )
        )
        return 0
    print(f"layout: {config.layout.describe()}")
    for idx, (f, k, n) in enumerate(
        zip(config.pyramid.spatial_sizes, config.layout.boxes_per_position, counts)
    ):
        print(f"level {idx}: {f}x{f} x {k} = {n}")
    print(f"total: {total}")
    return 0


def cmd_shapes(args: argparse.Namespace) -> int:
    config = _config(args)
    modes: Sequence[FusionMode] = (
        [config.fusion] if args.fusion is not None else list(FusionMode)
    )
    tables = {mode.value: pyramid_shape_table(config.pyramid, mode) for mode in modes}
    if args.json:
        print(
            json.dumps(
                {name: [row._asdict() for row in rows] for name, rows in tables.items()},
                indent=2,
            )
        )
        return 0
    for name, rows in tables.items():
        print(f"{name}:")
        for row in rows:
            print(f"  level {row.level}: {row.h}x{row.w}x{row.c}")
    return 0


def _pair(text: Optional[str], count: int, cast, flag: str) -> Optional[tuple]:
    if text is None:
        return None
    try:
        values = tuple(cast(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"invalid {flag} {text!r}") from exc
    if len(values) != count:
        raise ConfigError(f"{flag} needs {count} comma separated values")
    return values


def _print_stats(ann: AnnotationSet) -> None:
    stats = dataset_stats(ann)
    print(f"images: {stats.images} objects: {stats.objects}")
    print("sizes: " + " ".join(f"{k}={v}" for k, v in stats.buckets.items()))
    print("classes: " + " ".join(f"{k}={v}" for k, v in stats.per_class.items()))


def cmd_gen_data(args: argparse.Namespace) -> int:
    if args.stats:
        _print_stats(read_annotations(args.stats))
        return 0
    if not args.output:
        raise ConfigError("--output is required unless --stats is given")
    spec = SyntheticSpec(image_size=args.image_size, seed=args.seed)
    weights = _pair(args.size_weights, 3, float, "--size-weights")
    if weights is not None:
        spec.size_weights = weights  # type: ignore[assignment]
    objects = _pair(args.objects, 2, int, "--objects")
    if objects is not None:
        spec.objects_per_image = objects  # type: ignore[assignment]
    images, ann = generate_dataset(spec, args.images, prefix=args.prefix)
    try:
        os.makedirs(args.output, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {args.output!r}: {exc}") from exc
    write_images(os.path.join(args.output, IMAGES_NAME), images)
    write_annotations(os.path.join(args.output, ANNOTATIONS_NAME), ann)
    _print_stats(ann)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "boxes": cmd_boxes,
    "shapes": cmd_shapes,
    "gen-data": cmd_gen_data,
    "pr-export": cmd_pr_export,
}


def main(args=None) -> int:
    """Main CLI entrypoint, optionally using passed arguments rather than sys.argv"""
    args = parse_args(args=args)
    setup_logging(1 + args.verbose - args.quiet)
    return COMMANDS[args.command](args)


def entrypoint() -> None:
    """Console script wrapper mapping expected failures to exit codes"""
    try:
        sys.exit(main())
    except RainbowSSDException as exc:
        sys.stderr.write(f"error[{exc.kind}]: {exc}\n")
        sys.exit(exc.exit_code)
