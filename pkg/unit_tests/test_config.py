# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

import argparse
import json

import pytest
from harmonized_detection.config import (
    Config,
    InvalidConfigError,
    add_argparse_options,
    apply_command_line,
    load_config,
    parse_config,
)
from harmonized_detection.utils import SEED_ENV_VAR


def test_defaults():
    config = parse_config({})
    assert config.to_dict() == Config().to_dict()
    assert load_config().to_dict() == Config().to_dict()
    assert config.scene.seed is None


def test_parse_config_sections():
    config = parse_config({
        "schema": 1,
        "scene": {"num_classes": 2, "feature_dim": 8, "seed": 12},
        "train": {"epochs": 4, "mlc_enable_epoch": 2, "iur": False},
        "assignment": {"alpha": 2},
        "losses": {"loc_loss": "iou-loss"},
        "nms": {"mode": "rescored"},
        "eval": {"iou_thresholds": [0.5, 0.75]},
        "benchmark": {"seeds": [0, 1]},
    })
    assert config.scene.num_classes == 2
    assert config.scene.seed == 12
    assert config.train.epochs == 4
    assert not config.train.iur
    assert config.train.assignment.alpha == 2.0
    assert config.train.losses.loc_loss == "iou-loss"
    assert config.nms.mode == "rescored"
    assert config.eval.iou_thresholds.tolist() == [0.5, 0.75]
    # the configuration echo can be parsed back
    assert parse_config(config.to_dict()).to_dict() == config.to_dict()


@pytest.mark.parametrize("document,key", [
    ({"schema": 2}, "schema"),
    ({"scenes": {}}, "scenes"),
    ({"scene": []}, "scene"),
    ({"scene": {"prior_strides": 8}}, "scene.prior_strides"),
    ({"scene": {"prior_stride": 0}}, "scene.prior_stride"),
    ({"scene": {"prior_stride": 8.5}}, "scene.prior_stride"),
    ({"scene": {"image_size": [64]}}, "scene.image_size"),
    ({"train": {"iur": 1}}, "train.iur"),
    ({"train": {"epochs": True}}, "train.epochs"),
    ({"train": {"baseline_mode": "soft"}}, "train.baseline_mode"),
    ({"assignment": {"alpha": -1}}, "assignment.alpha"),
    ({"nms": {"mode": "soft"}}, "nms.mode"),
])
def test_invalid_configurations(document, key):
    with pytest.raises(InvalidConfigError) as excinfo:
        parse_config(document)
    assert excinfo.value.key == key
    assert str(excinfo.value).startswith(key + ": ")


def test_parse_config_rejects_non_objects():
    with pytest.raises(InvalidConfigError):
        parse_config([])


def test_load_config(tmpdir):
    path = tmpdir / "config.json"
    path.write_text(json.dumps({"nms": {"iou_threshold": 0.6}}), "utf-8")
    assert load_config(str(path)).nms.iou_threshold == 0.6
    path.write_text("{", "utf-8")
    with pytest.raises(InvalidConfigError):
        load_config(str(path))
    path.write_text("[]", "utf-8")
    with pytest.raises(InvalidConfigError):
        load_config(str(path))
    with pytest.raises(InvalidConfigError):
        load_config(str(tmpdir / "missing.json"))


def parse_args(argv):
    parser = argparse.ArgumentParser()
    add_argparse_options(parser)
    parser.add_argument("--nms-mode", default=None)
    parser.add_argument("--epochs", type=int, default=None)
    return parser.parse_args(argv)


def test_seed_precedence(tmpdir, monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    assert apply_command_line(parse_args([])).scene.seed == 0
    monkeypatch.setenv(SEED_ENV_VAR, "17")
    assert apply_command_line(parse_args([])).scene.seed == 17
    path = tmpdir / "config.json"
    path.write_text(json.dumps({"scene": {"seed": 5}}), "utf-8")
    args = parse_args(["--config", str(path)])
    assert apply_command_line(args).scene.seed == 5
    args = parse_args(["--config", str(path), "--seed", "9"])
    assert apply_command_line(args).scene.seed == 9


def test_invalid_seed_environment(monkeypatch):
    monkeypatch.setenv(SEED_ENV_VAR, "abc")
    with pytest.raises(InvalidConfigError):
        apply_command_line(parse_args([]))
    # the command line takes precedence over the broken variable
    assert apply_command_line(parse_args(["--seed", "1"])).scene.seed == 1


def test_command_line_overrides(tmpdir):
    path = tmpdir / "config.json"
    path.write_text(json.dumps({"nms": {"mode": "rescored",
                                        "iou_threshold": 0.6},
                                "train": {"epochs": 5}}), "utf-8")
    config = apply_command_line(parse_args([
        "--config", str(path), "--nms-mode", "iou-nms", "--seed", "0"]))
    assert config.nms.mode == "iou-nms"
    assert config.nms.iou_threshold == 0.6
    assert config.train.epochs == 5
    with pytest.raises(InvalidConfigError) as excinfo:
        apply_command_line(parse_args(["--epochs", "0", "--seed", "0"]))
    assert excinfo.value.key == "train.epochs"
