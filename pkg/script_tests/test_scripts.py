# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

import json
import os
import subprocess

import pytest

# Environment passed to sub-processes so that they raise an error on warnings
env = os.environ.copy()
env['PYTHONWARNINGS'] = 'error'

TINY_CONFIG = {
    "schema": 1,
    "scene": {
        "image_size": [32, 32],
        "objects_per_scene": [1, 2],
        "num_classes": 2,
        "prior_stride": 8,
        "prior_size": 12.0,
        "object_size": [8.0, 16.0],
        "feature_dim": 8,
    },
    "train": {
        "epochs": 3,
        "scenes_per_epoch": 6,
        "val_scenes": 3,
        "lr_drop_epochs": [2],
        "mlc_enable_epoch": 1,
    },
    "eval": {"ar_limits": [3, 10]},
    "benchmark": {"seeds": [0, 1], "alpha_sweep": [0.5]},
}


@pytest.fixture
def tiny_config(tmpdir):
    path = tmpdir / "config.json"
    path.write_text(json.dumps(TINY_CONFIG), "utf-8")
    return str(path)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), "utf-8")
    return str(path)


def run_json(command):
    output = subprocess.check_output(command, env=env)
    return json.loads(output.decode("utf-8"))


def test_simulate_is_deterministic(tiny_config, tmpdir):
    for name in ("a", "b"):
        assert subprocess.call([
            "mlc-simulate", "--config", tiny_config, "--seed", "5",
            str(tmpdir / name)
        ], env=env) == 0
    for split in ("train", "val"):
        for filename in ("gts.jsonl", "scenes.json", "scenes.npz"):
            a = (tmpdir / "a" / split / filename).read_binary()
            b = (tmpdir / "b" / split / filename).read_binary()
            assert a == b
    index = json.loads((tmpdir / "a" / "val" / "scenes.json").read_text(
        "utf-8"))
    assert index["image_ids"] == [6, 7, 8]
    assert index["scene"]["seed"] == 5
    # existing outputs are not replaced without --overwrite
    assert subprocess.call([
        "mlc-simulate", "--config", tiny_config, "--seed", "5",
        str(tmpdir / "a")
    ], env=env) == 3
    assert subprocess.call([
        "mlc-simulate", "--config", tiny_config, "--seed", "5",
        "--overwrite", str(tmpdir / "a")
    ], env=env) == 0


def test_invalid_configuration_exit_code(tmpdir):
    config = dict(TINY_CONFIG, scene={"prior_stride": 0})
    path = tmpdir / "bad.json"
    path.write_text(json.dumps(config), "utf-8")
    assert subprocess.call([
        "mlc-simulate", "--config", str(path), str(tmpdir / "out")
    ], env=env) == 2
    assert subprocess.call([
        "mlc-simulate", "--config", str(tmpdir / "missing.json"),
        str(tmpdir / "out")
    ], env=env) == 2


def test_train_and_evaluate(tiny_config, tmpdir):
    scenes_dir = tmpdir / "scenes"
    out_dir = tmpdir / "run"
    assert subprocess.call([
        "mlc-simulate", "--config", tiny_config, "--seed", "2",
        str(scenes_dir)
    ], env=env) == 0
    assert subprocess.call([
        "mlc-train", "--config", tiny_config, "--seed", "2",
        "--scenes", str(scenes_dir), str(out_dir)
    ], env=env) == 0
    for filename in ("head.ckpt", "training-log.jsonl", "report.json",
                     "val-detections.jsonl", "val-gts.jsonl"):
        assert (out_dir / filename).check()
    report = json.loads((out_dir / "report.json").read_text("utf-8"))
    assert report["seed"] == 2
    assert report["epochs"] == 3
    log = (out_dir / "training-log.jsonl").read_text("utf-8").splitlines()
    assert [json.loads(line)["epoch"] for line in log] == [1, 2, 3]
    assert (out_dir / "val-gts.jsonl").read_text("utf-8") == (
        scenes_dir / "val" / "gts.jsonl").read_text("utf-8")

    # the dumped candidates reproduce the reported AP
    result = run_json([
        "mlc-eval", "--config", tiny_config,
        str(out_dir / "val-detections.jsonl"), str(out_dir / "val-gts.jsonl")
    ])
    assert result["ap"] == pytest.approx(report["validation"]["ap"],
                                         abs=1e-12)
    assert result["nms"]["mode"] == "standard"
    result = run_json([
        "mlc-eval", "--config", tiny_config, "--nms-mode", "rescored",
        str(out_dir / "val-detections.jsonl"), str(out_dir / "val-gts.jsonl")
    ])
    assert result["nms"]["mode"] == "rescored"

    # the scenes of mlc-simulate are those generated by mlc-train
    assert subprocess.call([
        "mlc-train", "--config", tiny_config, "--seed", "2",
        str(tmpdir / "again")
    ], env=env) == 0
    assert (tmpdir / "again" / "head.ckpt").read_binary() == (
        out_dir / "head.ckpt").read_binary()
    assert (tmpdir / "again" / "report.json").read_binary() == (
        out_dir / "report.json").read_binary()

    # training again from the checkpoint
    assert subprocess.call([
        "mlc-train", "--config", tiny_config, "--seed", "2",
        "--init-checkpoint", str(out_dir / "head.ckpt"),
        str(tmpdir / "resumed")
    ], env=env) == 0
    (tmpdir / "broken.ckpt").write_binary(b"not a checkpoint")
    assert subprocess.call([
        "mlc-train", "--config", tiny_config,
        "--init-checkpoint", str(tmpdir / "broken.ckpt"),
        str(tmpdir / "broken")
    ], env=env) == 3


GT_RECORD = {"image_id": 0, "object_id": 0, "class": 0,
             "box": [0.0, 0.0, 10.0, 10.0]}


def detection_record(conf, iou, iou_pred=None):
    record = {"image_id": 0, "class": 0, "box": [0.0, 0.0, 10.0, 10.0 * iou],
              "raw_conf": conf}
    if iou_pred is not None:
        record["iou_pred"] = iou_pred
    return record


def test_evaluate_dumps(tmpdir):
    gts = write_jsonl(tmpdir / "gts.jsonl", [GT_RECORD])
    dets = write_jsonl(tmpdir / "dets.jsonl", [detection_record(0.9, 1.0)])
    result = run_json(["mlc-eval", "--seed", "0", dets, gts])
    assert result["ap"] == pytest.approx(1.0)
    assert result["schema"] == 1
    empty = write_jsonl(tmpdir / "empty.jsonl", [])
    result = run_json(["mlc-eval", "--seed", "0", empty, gts])
    assert result["ap"] == 0.0


def test_evaluate_malformed_dumps(tmpdir):
    gts = write_jsonl(tmpdir / "gts.jsonl", [GT_RECORD])
    bad = tmpdir / "bad.jsonl"
    bad.write_text(json.dumps(detection_record(0.9, 1.0)) + "\n{oops\n",
                   "utf-8")
    assert subprocess.call(["mlc-eval", "--seed", "0", str(bad), gts],
                           env=env) == 3
    # rescored NMS needs iou_pred in every record
    dets = write_jsonl(tmpdir / "dets.jsonl", [detection_record(0.9, 1.0)])
    assert subprocess.call(["mlc-eval", "--seed", "0", "--nms-mode",
                            "rescored", dets, gts], env=env) == 3
    assert subprocess.call(["mlc-eval", "--seed", "0", dets,
                            str(tmpdir / "missing.jsonl")], env=env) == 3


@pytest.mark.parametrize("pairs,expected", [
    ([(0.1, 0.2), (0.2, 0.5), (0.3, 0.8)], 1.0),
    ([(0.1, 0.8), (0.2, 0.5), (0.3, 0.2)], -1.0),
    ([(0.1, 0.3), (0.2, 0.1), (0.3, 0.2)], -0.5),
])
def test_measure_divergence(tmpdir, pairs, expected):
    gts = write_jsonl(tmpdir / "gts.jsonl", [GT_RECORD])
    dets = write_jsonl(tmpdir / "dets.jsonl",
                       [detection_record(c, i) for c, i in pairs])
    result = run_json(["mlc-divergence", dets, gts])
    assert result["pooled"] == pytest.approx(expected)
    assert result["num_pairs"] == 3
    assert result["degenerate"] is False
    assert result["schema"] == 1


def test_benchmark(tiny_config, tmpdir):
    out_dir = tmpdir / "bench"
    assert subprocess.call([
        "mlc-benchmark", "--config", tiny_config, str(out_dir)
    ], env=env) == 0
    report = json.loads((out_dir / "benchmark.json").read_text("utf-8"))
    assert set(report["cells"]) >= {"baseline", "ml", "iur", "mlc"}
    assert report["config"]["benchmark"]["seeds"] == [0, 1]
    text = (out_dir / "benchmark.txt").read_text("utf-8")
    assert "Directional checks" in text


def test_evaluate_rescored_keeps_the_better_box(tmpdir):
    gts = write_jsonl(tmpdir / "gts.jsonl",
                      [dict(GT_RECORD, box=[0.0, 0.0, 10.0, 7.0])])
    # the confident box has IoU 0.7 with the object, the other one is exact
    dets = write_jsonl(tmpdir / "dets.jsonl", [
        detection_record(0.9, 1.0, iou_pred=0.3),
        detection_record(0.6, 0.7, iou_pred=0.9),
    ])
    standard = run_json(["mlc-eval", "--seed", "0", dets, gts])
    rescored = run_json(["mlc-eval", "--seed", "0", "--nms-mode", "rescored",
                         dets, gts])
    assert standard["num_detections"] == 1
    assert standard["ap"] < 1.0
    assert rescored["ap"] == pytest.approx(1.0)
