#! /usr/bin/env python3
#
# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

import logging
import pathlib
import sys

import harmonized_detection.config
import harmonized_detection.postprocess
from harmonized_detection.dumps import (
    InvalidDumpError,
    parse_detections,
    parse_ground_truth,
)
from harmonized_detection.evaluation import evaluate_detections
from harmonized_detection.file_accessor import read_file
from harmonized_detection.postprocess import (
    DUMP_DIVERGENCE_POPULATION,
    batched_nms,
    get_suppressor,
    match_divergence_pairs,
)
from harmonized_detection.scripts import run_command
from harmonized_detection.training import divergence_summary
from harmonized_detection.utils import dumps_json

logger = logging.getLogger(__name__)


def load_dumps(detections_path, ground_truth_path):
    """Read a detection dump and a ground-truth dump.

    :raises InvalidDumpError: if a dump is malformed (the message names the
        file and the line)
    """
    dumps = []
    for path, parse in ((detections_path, parse_detections),
                        (ground_truth_path, parse_ground_truth)):
        try:
            dumps.append(parse(read_file(path)))
        except InvalidDumpError as exc:
            raise InvalidDumpError(f"{path}: {exc}") from exc
        except UnicodeDecodeError as exc:
            raise InvalidDumpError(f"{path}: not UTF-8 text ({exc})"
                                   ) from exc
    return tuple(dumps)


def dump_divergence(dets, gts):
    """Divergence metrics of a detection dump against its ground truth."""
    return divergence_summary(
        *match_divergence_pairs(dets, gts.boxes, gts.labels, gts.image_ids,
                                gts.object_ids),
        DUMP_DIVERGENCE_POPULATION)


def evaluate_dumps(detections_path, ground_truth_path, config):
    """Suppress the detections of a dump, then evaluate them.

    The report is printed on standard output.
    """
    dets, gts = load_dumps(detections_path, ground_truth_path)
    if (get_suppressor(config.nms).requires_iou_pred
            and not dets.has_iou_pred):
        raise InvalidDumpError(f"{detections_path}: NMS mode "
                               f"{config.nms.mode!r} requires an iou_pred "
                               "value in every detection record")
    suppressed = batched_nms(dets, config.nms)
    logger.info("%d of %d detections kept by %s NMS", len(suppressed),
                len(dets), config.nms.mode)
    report = evaluate_detections(suppressed, gts, config.eval,
                                 divergence=dump_divergence(dets, gts))
    result = report.to_dict()
    result["nms"] = config.nms.to_dict()
    sys.stdout.write(dumps_json(result))


def parse_command_line(argv):
    """Parse the script's command line."""
    import argparse
    parser = argparse.ArgumentParser(
        description="""\
Evaluate a dump of detections against a dump of ground-truth objects.

The detections (before suppression) go through the selected non-maximum
suppression, then AP, AP50, AP75 and AR@k are computed. The divergence
metrics of the unsuppressed detections are included in the report, which
is written as JSON on standard output.
""")
    parser.add_argument("detections", type=pathlib.Path,
                        help="detection dump (JSON lines)")
    parser.add_argument("ground_truth", type=pathlib.Path,
                        help="ground-truth dump (JSON lines)")

    harmonized_detection.config.add_argparse_options(parser)
    harmonized_detection.postprocess.add_argparse_options(parser)

    args = parser.parse_args(argv[1:])
    return args


def _evaluate(args):
    config = harmonized_detection.config.apply_command_line(args)
    return evaluate_dumps(args.detections, args.ground_truth, config)


def main(argv=sys.argv):
    """The script's entry point."""
    import harmonized_detection.utils
    harmonized_detection.utils.init_logging_for_cmdline()
    args = parse_command_line(argv)
    return run_command(_evaluate, args)


if __name__ == "__main__":
    sys.exit(main())
