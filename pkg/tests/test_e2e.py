import json
import os
import re
import sys

import pytest

from rainbowssd.cli import ANNOTATIONS_NAME, entrypoint, main
from rainbowssd.formats import DetectionRecord, read_annotations
from rainbowssd.train import read_log


def gen_data(path: str, images: int = 4, seed: int = 1) -> None:
    """Write a small synthetic dataset to `path`"""
    assert main(args=["gen-data", "-o", path, "--images", str(images), "--seed", str(seed)]) == 0


def write_gt_detections(data_dir: str, path: str) -> None:
    """A detections file reproducing every annotated object with score 1"""
    ann = read_annotations(os.path.join(data_dir, ANNOTATIONS_NAME))
    with open(path, "w", encoding="utf-8") as fout:
        for obj in ann.objects:
            record = DetectionRecord(obj.image_id, ann.class_names[obj.class_id - 1], 1.0, *obj.box)
            fout.write(record.format() + "\n")


def run_exit(monkeypatch, argv) -> int:
    """Run the console entrypoint and return its exit code"""
    monkeypatch.setattr(sys, "argv", ["rainbowssd"] + argv)
    with pytest.raises(SystemExit) as info:
        entrypoint()
    return info.value.code


@pytest.mark.parametrize(
    "argv,total",
    [
        (["--config", "canonical-300"], 8732),
        (["--config", "canonical-300", "--fusion", "rainbow", "--layout", "shared-4"], 7760),
        (["--config", "canonical-300", "--fusion", "rainbow", "--layout", "shared-6"], 11640),
        (["--config", "canonical-512"], 24564),
    ],
)
def test_boxes(capsys, argv, total):
    """Default box totals for the canonical layouts"""
    assert main(args=["boxes"] + argv) == 0
    out = capsys.readouterr().out
    assert f"total: {total}\n" in out


def test_boxes_levels(capsys):
    """Per-level lines and the JSON form"""
    assert main(args=["boxes", "--config", "canonical-300"]) == 0
    out = capsys.readouterr().out
    assert "level 0: 38x38 x 4 = 5776\n" in out
    assert "level 5: 1x1 x 4 = 4\n" in out
    assert main(args=["boxes", "--config", "toy-96", "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["total"] == 4 * (144 + 36 + 9 + 4 + 1)
    assert [level["size"] for level in data["levels"]] == [12, 6, 3, 2, 1]


@pytest.mark.io
def test_boxes_dump(tmp_dir, capsys):
    """The dump has one center-form box per line"""
    path = os.path.join(tmp_dir, "boxes.txt")
    assert main(args=["boxes", "--config", "toy-96", "--dump", path]) == 0
    with open(path, "r", encoding="utf-8") as fin:
        lines = fin.read().splitlines()
    assert len(lines) == 776
    assert len(lines[0].split()) == 4
    capsys.readouterr()


def test_shapes(capsys):
    """Every fusion mode is tabulated unless one is chosen"""
    assert main(args=["shapes", "--config", "canonical-300"]) == 0
    out = capsys.readouterr().out
    for mode in ("conventional", "pool", "deconv", "rainbow"):
        assert f"{mode}:\n" in out
    assert "  level 0: 38x38x2816\n" in out
    assert main(args=["shapes", "--config", "canonical-300", "--fusion", "rainbow", "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert list(data) == ["rainbow"]
    assert {row["c"] for row in data["rainbow"]} == {2816}


@pytest.mark.io
def test_gen_data_and_stats(tmp_dir, capsys):
    """Generation writes both files and prints the dataset summary"""
    data_dir = os.path.join(tmp_dir, "data")
    gen_data(data_dir, images=5)
    assert sorted(os.listdir(data_dir)) == ["annotations.jsonl", "images.rt4"]
    out = capsys.readouterr().out
    assert out.startswith("images: 5 objects: ")
    assert main(args=["gen-data", "--stats", os.path.join(data_dir, ANNOTATIONS_NAME)]) == 0
    assert capsys.readouterr().out.splitlines()[:2] == out.splitlines()[:2]


@pytest.mark.io
def test_eval_ground_truth_detections(tmp_dir, capsys):
    """Ground truth scored as detections gives a perfect report"""
    data_dir = os.path.join(tmp_dir, "data")
    gen_data(data_dir, images=6)
    dets = os.path.join(tmp_dir, "dets.txt")
    write_gt_detections(data_dir, dets)
    capsys.readouterr()

    assert main(args=["eval", "--data", data_dir, "--detections", dets, "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["map"]["interp11"] == pytest.approx(1.0)
    assert report["map"]["all_points"] == pytest.approx(1.0)
    assert report["map_07plus"] == pytest.approx(1.0)

    assert main(args=["eval", "--data", data_dir, "--detections", dets]) == 0
    out = capsys.readouterr().out
    assert "mAP[interp11]: 1.0000\n" in out
    assert "mAP@0.7+: 100.0\n" in out


@pytest.mark.io
def test_pr_export(tmp_dir, capsys):
    """Perfect detections export a flat curve at precision one"""
    data_dir = os.path.join(tmp_dir, "data")
    gen_data(data_dir)
    dets = os.path.join(tmp_dir, "dets.txt")
    write_gt_detections(data_dir, dets)
    capsys.readouterr()
    assert main(args=["pr-export", "--data", data_dir, "--detections", dets]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "recall,mean_precision"
    assert len(lines) == 102
    assert all(line.endswith(",1.000000") for line in lines[1:])


@pytest.mark.io
def test_train_and_eval(tmp_dir, capsys):
    """A short run writes a checkpoint that evaluates and reproduces its detections"""
    data_dir = os.path.join(tmp_dir, "data")
    gen_data(data_dir, images=4)
    ckpt = os.path.join(tmp_dir, "model.tar")
    log = os.path.join(tmp_dir, "train.jsonl")
    args = ["train", "--config", "toy-96", "--data", data_dir, "-o", ckpt, "--log", log]
    assert main(args=args + ["--steps", "2", "--batch-size", "2"]) == 0
    assert re.match(r"trained 2 steps: loss \d+\.\d{4} -> \d+\.\d{4}", capsys.readouterr().out)
    with open(log, "r", encoding="utf-8") as fin:
        assert len(fin.read().splitlines()) == 2

    first = os.path.join(tmp_dir, "first.txt")
    second = os.path.join(tmp_dir, "second.txt")
    assert main(args=["eval", "--checkpoint", ckpt, "--data", data_dir, "--write-detections", first]) == 0
    assert "mAP[interp11]: " in capsys.readouterr().out
    assert main(args=["eval", "--checkpoint", ckpt, "--data", data_dir, "--write-detections", second]) == 0
    with open(first, "r", encoding="utf-8") as fa, open(second, "r", encoding="utf-8") as fb:
        assert fa.read() == fb.read()

    # a detections file from a model evaluates to the same report
    json_args = ["eval", "--data", data_dir, "--json"]
    capsys.readouterr()
    assert main(args=json_args + ["--checkpoint", ckpt]) == 0
    from_model = json.loads(capsys.readouterr().out)
    assert main(args=json_args + ["--detections", first, "--config", "toy-96"]) == 0
    from_file = json.loads(capsys.readouterr().out)
    assert from_model["map"] == from_file["map"]
    assert from_model["size_recall"] == from_file["size_recall"]


def test_exit_codes(tmp_dir, monkeypatch, capsys):
    """Configuration and data failures map to distinct exit codes"""
    assert run_exit(monkeypatch, ["boxes", "--config", "no-such-preset"]) == 2
    assert "error[config]" in capsys.readouterr().err
    assert run_exit(monkeypatch, ["boxes", "--config", "canonical-300", "--layout", "shared-6"]) == 2
    assert run_exit(monkeypatch, ["boxes", "--config", "canonical-300", "--layout", "4,6"]) == 2
    assert run_exit(monkeypatch, ["eval", "--data", tmp_dir]) == 2
    assert run_exit(monkeypatch, ["eval", "--data", tmp_dir, "--detections", "dets.txt"]) == 3
    assert "error[data]" in capsys.readouterr().err


@pytest.mark.io
def test_exit_code_unwritable_output(tmp_dir, monkeypatch, capsys):
    """Outputs that cannot be created are data errors"""
    blocker = os.path.join(tmp_dir, "file")
    with open(blocker, "w", encoding="utf-8") as fout:
        fout.write("x")
    assert run_exit(monkeypatch, ["gen-data", "-o", blocker, "--images", "1"]) == 3
    assert "error[data]" in capsys.readouterr().err
    dump = os.path.join(tmp_dir, "missing", "boxes.txt")
    assert run_exit(monkeypatch, ["boxes", "--config", "toy-96", "--dump", dump]) == 3
    assert "cannot open" in capsys.readouterr().err


@pytest.mark.io
def test_eval_visualize(tmp_dir, capsys):
    """The drawing dump keeps detections scoring 0.3 and above"""
    data_dir = os.path.join(tmp_dir, "data")
    gen_data(data_dir)
    ann = read_annotations(os.path.join(data_dir, ANNOTATIONS_NAME))
    scores = [(0.9, 0.3, 0.29, 0.1)[idx % 4] for idx in range(len(ann.objects))]
    dets = os.path.join(tmp_dir, "dets.txt")
    with open(dets, "w", encoding="utf-8") as fout:
        for obj, score in zip(ann.objects, scores):
            record = DetectionRecord(obj.image_id, ann.class_names[obj.class_id - 1], score, *obj.box)
            fout.write(record.format() + "\n")
    shown = os.path.join(tmp_dir, "shown.txt")
    assert main(args=["eval", "--data", data_dir, "--detections", dets, "--visualize", shown]) == 0
    capsys.readouterr()
    with open(shown, "r", encoding="utf-8") as fin:
        shown_scores = sorted(float(line.split()[2]) for line in fin)
    assert shown_scores == sorted(s for s in scores if s >= 0.3)
    assert shown_scores


@pytest.mark.io
def test_exit_code_bad_detections(tmp_dir, monkeypatch, capsys):
    """A malformed detections line is a data error"""
    data_dir = os.path.join(tmp_dir, "data")
    gen_data(data_dir)
    dets = os.path.join(tmp_dir, "dets.txt")
    with open(dets, "w", encoding="utf-8") as fout:
        fout.write("img00000 disc 0.5 1 2 3\n")
    assert run_exit(monkeypatch, ["eval", "--data", data_dir, "--detections", dets]) == 3
    assert "line 1" in capsys.readouterr().err


@pytest.mark.slow
def test_toy_training_reduces_loss(tmp_dir, capsys):
    """Two hundred toy steps lower the training loss"""
    data_dir = os.path.join(tmp_dir, "data")
    gen_data(data_dir, images=32)
    ckpt = os.path.join(tmp_dir, "model.tar")
    args = ["train", "--config", "toy-96", "--data", data_dir, "-o", ckpt, "--steps", "200"]
    assert main(args=args) == 0
    match = re.search(r"loss (\d+\.\d+) -> (\d+\.\d+)", capsys.readouterr().out)
    assert match is not None
    assert float(match.group(2)) < float(match.group(1))


@pytest.mark.slow
def test_toy_rainbow_learns_shapes(tmp_dir, capsys):
    """The shared-classifier rainbow toy model learns the shapes task"""
    train_dir = os.path.join(tmp_dir, "train")
    test_dir = os.path.join(tmp_dir, "test")
    gen_data(train_dir, images=400, seed=1)
    gen_data(test_dir, images=100, seed=2)
    ckpt = os.path.join(tmp_dir, "model.tar")
    log = os.path.join(tmp_dir, "train.jsonl")
    args = ["train", "--config", "toy-96", "--data", train_dir, "-o", ckpt, "--log", log]
    assert main(args=args + ["--fusion", "rainbow", "--layout", "shared-4", "--seed", "0"]) == 0

    with open(log, "r", encoding="utf-8") as fin:
        history = read_log(fin)
    assert len(history) == 5000
    final = sum(r.total for r in history[-20:]) / 20
    assert final < 0.25 * history[0].total

    capsys.readouterr()
    assert main(args=["eval", "--checkpoint", ckpt, "--data", test_dir, "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["map"]["interp11"] >= 0.5
