#! /usr/bin/env python3
#
# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

import logging
import pathlib
import sys

import harmonized_detection.config
import harmonized_detection.file_accessor
from harmonized_detection.dumps import write_scenes
from harmonized_detection.scene import generate_scenes
from harmonized_detection.scripts import run_command
from harmonized_detection.utils import STREAM_TRAIN_SCENES, STREAM_VAL_SCENES

logger = logging.getLogger(__name__)


def simulate_scenes(out_dir, config, options={}):
    """Generate the training and validation scenes of a configuration.

    The scenes are written to the ``train`` and ``val`` sub-directories of
    ``out_dir``, they are identical to those generated by mlc-train for the
    same configuration and seed.
    """
    out_dir = pathlib.Path(out_dir)
    seed = config.scene.seed
    train_scenes = generate_scenes(config.scene, seed,
                                   config.train.scenes_per_epoch,
                                   STREAM_TRAIN_SCENES)
    val_scenes = generate_scenes(config.scene, seed, config.train.val_scenes,
                                 STREAM_VAL_SCENES,
                                 first_image_id=len(train_scenes))
    for split, scenes in (("train", train_scenes), ("val", val_scenes)):
        accessor = harmonized_detection.file_accessor.get_accessor_for_dir(
            out_dir / split, options)
        write_scenes(accessor, scenes, config.scene,
                     overwrite=options.get("overwrite", False))
        logger.info("wrote %d %s scenes (%d objects) to %s", len(scenes),
                    split, sum(s.num_objects for s in scenes),
                    out_dir / split)


def parse_command_line(argv):
    """Parse the script's command line."""
    import argparse
    parser = argparse.ArgumentParser(
        description="""\
Generate synthetic detection scenes.

Each scene holds the ground-truth boxes, the grid of prior boxes and the
feature vector of every prior. The number of scenes is taken from the
train.scenes_per_epoch and train.val_scenes configuration keys.
""")
    parser.add_argument("out_dir", type=pathlib.Path,
                        help="output directory")

    harmonized_detection.config.add_argparse_options(parser)
    harmonized_detection.file_accessor.add_argparse_options(parser)

    args = parser.parse_args(argv[1:])
    return args


def _simulate(args):
    config = harmonized_detection.config.apply_command_line(args)
    return simulate_scenes(args.out_dir, config, options=vars(args))


def main(argv=sys.argv):
    """The script's entry point."""
    import harmonized_detection.utils
    harmonized_detection.utils.init_logging_for_cmdline()
    args = parse_command_line(argv)
    return run_command(_simulate, args)


if __name__ == "__main__":
    sys.exit(main())
