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
from harmonized_detection.benchmark import format_report, run_benchmark
from harmonized_detection.scripts import run_command
from harmonized_detection.utils import dumps_json

logger = logging.getLogger(__name__)

REPORT_JSON_NAME = "benchmark.json"
REPORT_TEXT_NAME = "benchmark.txt"


def benchmark(out_dir, config, options={}):
    """Run the ablation benchmark and store its report."""
    report = run_benchmark(config.scene, config.train, config.nms,
                           config.eval, config.benchmark, progress=True)
    accessor = harmonized_detection.file_accessor.get_accessor_for_dir(
        out_dir, options)
    overwrite = options.get("overwrite", False)
    accessor.store_file(REPORT_JSON_NAME, dumps_json(report).encode("utf-8"),
                        mime_type="application/json", overwrite=overwrite)
    accessor.store_file(REPORT_TEXT_NAME,
                        format_report(report).encode("utf-8"),
                        mime_type="text/plain", overwrite=overwrite)
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    if failed:
        logger.warning("directional checks not reproduced: %s",
                       ", ".join(failed))
    logger.info("benchmark report written to %s", out_dir)


def parse_command_line(argv):
    """Parse the script's command line."""
    import argparse
    parser = argparse.ArgumentParser(
        description="""\
Run the ablation benchmark on synthetic scenes.

Every cell (baseline, mutual labeling, IoU prediction, their combination,
and the optional extra cells of the benchmark configuration) is trained
and evaluated for every seed of benchmark.seeds. The means and the
directional checks are written to benchmark.json and, as text tables, to
benchmark.txt. A failed directional check is reported but does not make
the command fail.
""")
    parser.add_argument("out_dir", type=pathlib.Path,
                        help="output directory")

    harmonized_detection.config.add_argparse_options(parser)
    harmonized_detection.file_accessor.add_argparse_options(parser)

    args = parser.parse_args(argv[1:])
    return args


def _benchmark(args):
    config = harmonized_detection.config.apply_command_line(args)
    return benchmark(args.out_dir, config, options=vars(args))


def main(argv=sys.argv):
    """The script's entry point."""
    import harmonized_detection.utils
    harmonized_detection.utils.init_logging_for_cmdline()
    args = parse_command_line(argv)
    return run_command(_benchmark, args)


if __name__ == "__main__":
    sys.exit(main())
