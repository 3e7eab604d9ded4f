#! /usr/bin/env python3
#
# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

import io
import json
import logging
import pathlib
import sys

import harmonized_detection.assignment
import harmonized_detection.config
import harmonized_detection.file_accessor
import harmonized_detection.postprocess
import harmonized_detection.training
from harmonized_detection.checkpoint import (
    InvalidCheckpointError,
    read_checkpoint,
    save_checkpoint,
)
from harmonized_detection.dumps import (
    format_detections,
    format_ground_truth,
    read_scenes,
    scenes_ground_truth,
)
from harmonized_detection.file_accessor import read_file
from harmonized_detection.postprocess import Detections
from harmonized_detection.scene import generate_scenes
from harmonized_detection.scripts import run_command
from harmonized_detection.utils import (
    STREAM_TRAIN_SCENES,
    STREAM_VAL_SCENES,
    dumps_json,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "head.ckpt"
TRAINING_LOG_NAME = "training-log.jsonl"
REPORT_NAME = "report.json"
VAL_DETECTIONS_NAME = "val-detections.jsonl"
VAL_GTS_NAME = "val-gts.jsonl"


def _load_scenes(scenes_dir, config):
    scenes_dir = pathlib.Path(scenes_dir)
    train_scenes, metadata = read_scenes(
        harmonized_detection.file_accessor.FileAccessor(scenes_dir / "train"))
    val_scenes, _ = read_scenes(
        harmonized_detection.file_accessor.FileAccessor(scenes_dir / "val"))
    scene_cfg = harmonized_detection.config.parse_config(
        {"scene": metadata["scene"]}).scene
    if scene_cfg.to_dict() != config.scene.to_dict():
        logger.warning("using the scene configuration stored in %s instead "
                       "of the one given", scenes_dir)
    return scene_cfg, train_scenes, val_scenes


def _load_initial_params(path, scene_cfg):
    params = read_checkpoint(io.BytesIO(read_file(path)))
    if (params.num_classes, params.feature_dim) != (
            scene_cfg.num_classes, scene_cfg.feature_dim):
        raise InvalidCheckpointError(
            f"{path} holds a head for {params.num_classes} classes and "
            f"{params.feature_dim} features, the scenes have "
            f"{scene_cfg.num_classes} classes and {scene_cfg.feature_dim} "
            "features")
    logger.info("starting from the parameters stored in %s", path)
    return params


def train_detector(out_dir, config, scenes_dir=None, init_checkpoint=None,
                   options={}):
    """Train a detector head and store it with its validation results."""
    overwrite = options.get("overwrite", False)
    seed = config.scene.seed
    if scenes_dir is None:
        scene_cfg = config.scene
        train_scenes = generate_scenes(scene_cfg, seed,
                                       config.train.scenes_per_epoch,
                                       STREAM_TRAIN_SCENES)
        val_scenes = generate_scenes(scene_cfg, seed,
                                     config.train.val_scenes,
                                     STREAM_VAL_SCENES,
                                     first_image_id=len(train_scenes))
    else:
        scene_cfg, train_scenes, val_scenes = _load_scenes(scenes_dir,
                                                           config)
    initial_params = None
    if init_checkpoint is not None:
        initial_params = _load_initial_params(init_checkpoint, scene_cfg)
    params, log = harmonized_detection.training.train(
        scene_cfg, config.train, config.nms, config.eval, seed=seed,
        progress=True, train_scenes=train_scenes, val_scenes=val_scenes,
        initial_params=initial_params)
    report = harmonized_detection.training.evaluate_model(
        params, val_scenes, scene_cfg, config.train.assignment, config.nms,
        config.eval)

    accessor = harmonized_detection.file_accessor.get_accessor_for_dir(
        out_dir, options)
    checkpoint = io.BytesIO()
    save_checkpoint(checkpoint, params)
    accessor.store_file(CHECKPOINT_NAME, checkpoint.getvalue(),
                        overwrite=overwrite)
    accessor.store_file(
        TRAINING_LOG_NAME,
        "".join(json.dumps(record, sort_keys=True) + "\n"
                for record in log).encode("utf-8"),
        mime_type="application/x-ndjson", overwrite=overwrite)
    # Candidates before suppression: running mlc-eval on these dumps with
    # the same NMS settings reproduces the reported AP
    candidates = Detections.concatenate([
        harmonized_detection.training.detect(params, scene, scene_cfg,
                                             config.nms, suppress=False)
        for scene in val_scenes])
    accessor.store_file(VAL_DETECTIONS_NAME,
                        format_detections(candidates).encode("utf-8"),
                        mime_type="application/x-ndjson",
                        overwrite=overwrite)
    accessor.store_file(
        VAL_GTS_NAME,
        format_ground_truth(scenes_ground_truth(val_scenes)).encode("utf-8"),
        mime_type="application/x-ndjson", overwrite=overwrite)
    config_echo = config.to_dict()
    config_echo["scene"] = scene_cfg.to_dict()
    accessor.store_file(REPORT_NAME, dumps_json({
        "schema": 1,
        "seed": seed,
        "epochs": len(log),
        "final_loss": log[-1]["loss"]["total"] if log else None,
        "validation": report.to_dict(),
        "config": config_echo,
    }).encode("utf-8"), mime_type="application/json", overwrite=overwrite)
    logger.info("validation AP %s, divergence %s; results written to %s",
                report.ap, (report.divergence or {}).get("pooled"), out_dir)


def parse_command_line(argv):
    """Parse the script's command line."""
    import argparse
    parser = argparse.ArgumentParser(
        description="""\
Train the toy detector head on synthetic scenes.

The output directory receives the parameters (head.ckpt), one JSON record
per epoch (training-log.jsonl), the validation report (report.json) and
the validation candidates and ground truth as dumps readable by mlc-eval
and mlc-divergence (val-detections.jsonl, val-gts.jsonl).
""")
    parser.add_argument("out_dir", type=pathlib.Path,
                        help="output directory")
    parser.add_argument("--scenes", type=pathlib.Path, default=None,
                        help="directory written by mlc-simulate (scenes "
                        "are generated from the configuration if omitted)")
    parser.add_argument("--init-checkpoint", type=pathlib.Path, default=None,
                        help="head checkpoint to start from (e.g. the "
                        "head.ckpt of a previous run) instead of zero "
                        "parameters")

    harmonized_detection.config.add_argparse_options(parser)
    harmonized_detection.training.add_argparse_options(parser)
    harmonized_detection.assignment.add_argparse_options(parser)
    harmonized_detection.postprocess.add_argparse_options(parser)
    harmonized_detection.file_accessor.add_argparse_options(parser)

    args = parser.parse_args(argv[1:])
    return args


def _train(args):
    config = harmonized_detection.config.apply_command_line(args)
    return train_detector(args.out_dir, config, scenes_dir=args.scenes,
                          init_checkpoint=args.init_checkpoint,
                          options=vars(args))


def main(argv=sys.argv):
    """The script's entry point."""
    import harmonized_detection.utils
    harmonized_detection.utils.init_logging_for_cmdline()
    args = parse_command_line(argv)
    return run_command(_train, args)


if __name__ == "__main__":
    sys.exit(main())
