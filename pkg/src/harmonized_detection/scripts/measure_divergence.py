#! /usr/bin/env python3
#
# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

import logging
import pathlib
import sys

from harmonized_detection.scripts import run_command
from harmonized_detection.scripts.evaluate_detections import (
    dump_divergence,
    load_dumps,
)
from harmonized_detection.utils import dumps_json

logger = logging.getLogger(__name__)


def measure_divergence(detections_path, ground_truth_path):
    """Print the divergence metrics of a detection dump as JSON."""
    dets, gts = load_dumps(detections_path, ground_truth_path)
    summary = dump_divergence(dets, gts)
    summary["schema"] = 1
    logger.info("%d detection/object pairs, pooled divergence %s",
                summary["num_pairs"], summary["pooled"])
    sys.stdout.write(dumps_json(summary))


def parse_command_line(argv):
    """Parse the script's command line."""
    import argparse
    parser = argparse.ArgumentParser(
        description="""\
Measure the divergence between the confidences of a detector and the
localization quality of its boxes.

Each detection is paired with the same-class ground-truth object it
overlaps most. The pooled Spearman rank correlation between confidence and
IoU is reported, with the mean of the per-object correlations. A value
near 1 means that confidence ranks localization quality well.
""")
    parser.add_argument("detections", type=pathlib.Path,
                        help="detection dump (JSON lines), preferably "
                        "before suppression")
    parser.add_argument("ground_truth", type=pathlib.Path,
                        help="ground-truth dump (JSON lines)")

    args = parser.parse_args(argv[1:])
    return args


def main(argv=sys.argv):
    """The script's entry point."""
    import harmonized_detection.utils
    harmonized_detection.utils.init_logging_for_cmdline()
    args = parse_command_line(argv)
    return run_command(measure_divergence, args.detections,
                       args.ground_truth)


if __name__ == "__main__":
    sys.exit(main())
