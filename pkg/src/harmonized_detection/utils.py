# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.


"""Miscellaneous utility functions.
"""

import json
import os

import numpy as np

__all__ = [
    "SEED_ENV_VAR",
    "default_seed",
    "make_rng",
    "format_table",
    "dumps_json",
]


SEED_ENV_VAR = "HARMONIZED_DETECTION_SEED"
"""Environment variable overriding the built-in default seed."""

# Independent random streams derived from one seed
STREAM_TRAIN_SCENES = 0
STREAM_VAL_SCENES = 1
STREAM_SHUFFLE = 2
STREAM_IOU_NOISE = 3


def default_seed():
    """Seed used when neither the command line nor the config sets one.

    :returns: the value of :data:`SEED_ENV_VAR` if it is set, else 0
    :rtype: int
    :raises ValueError: if the environment variable is not an integer
    """
    value = os.environ.get(SEED_ENV_VAR)
    if value is None or value == "":
        return 0
    return int(value)


def make_rng(seed, *spawn_key):
    """Create a reproducible random generator for one stream of a seed.

    The generator is :class:`numpy.random.PCG64` (a portable 64-bit
    permuted congruential generator) seeded through
    :class:`numpy.random.SeedSequence`. The ``spawn_key`` selects an
    independent stream, e.g. ``(STREAM_TRAIN_SCENES, scene_index)`` gives
    every scene its own stream, so that a scene does not depend on how
    many other scenes were drawn before it.

    :param int seed: non-negative 64-bit seed
    :param spawn_key: integers identifying the stream
    :rtype: numpy.random.Generator
    """
    seq = np.random.SeedSequence(entropy=int(seed),
                                 spawn_key=tuple(int(k) for k in spawn_key))
    return np.random.Generator(np.random.PCG64(seq))


def format_table(header, rows):
    """Format rows of values as an aligned plain-text table.

    Floats are printed with 4 decimals, ``None`` as ``-``.

    :param list header: column titles
    :param list rows: sequences of cells, same length as ``header``
    :returns: the table, lines separated by ``\\n``, with a trailing newline
    :rtype: str
    """
    def fmt(cell):
        if cell is None:
            return "-"
        if isinstance(cell, float):
            return f"{cell:.4f}"
        return str(cell)

    cells = [[str(h) for h in header]] + [[fmt(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for n, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths)))
                     .rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def dumps_json(obj):
    """Serialize to JSON with a stable key order (byte-identical reruns)."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def init_logging_for_cmdline():
    """Set up a sane logging configuration for command-line tools.

    This must be called early in the main function. Messages go to the
    standard error stream, standard output is kept for machine-readable
    results.
    """
    import logging
    logging.basicConfig(format="%(levelname)s: %(message)s", level="INFO")
