# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Command-line tools for simulation, training and offline evaluation.

Every tool exits with one of the codes below; the error is described on
the standard error stream.
"""

import logging

from harmonized_detection.checkpoint import InvalidCheckpointError
from harmonized_detection.config import InvalidConfigError
from harmonized_detection.dumps import InvalidDumpError
from harmonized_detection.file_accessor import DataAccessError
from harmonized_detection.scene import SceneGenerationError
from harmonized_detection.training import NumericalError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_NUMERICAL_ERROR = 4


def run_command(func, *args, **kwargs):
    """Call ``func`` and translate its errors into an exit code.

    :returns: the return value of ``func`` (0 if it returns ``None``), or
        the exit code matching the exception it raised
    :rtype: int
    """
    try:
        return func(*args, **kwargs) or EXIT_OK
    except (InvalidConfigError, SceneGenerationError) as exc:
        logger.critical("invalid configuration: %s", exc)
        return EXIT_CONFIG_ERROR
    except (InvalidDumpError, InvalidCheckpointError, DataAccessError) as exc:
        logger.critical("%s", exc)
        return EXIT_DATA_ERROR
    except NumericalError as exc:
        logger.critical("numerical failure: %s", exc)
        return EXIT_NUMERICAL_ERROR
