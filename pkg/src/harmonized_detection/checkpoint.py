# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Binary storage of detector head parameters.

A checkpoint is a little-endian binary file:

- the magic bytes ``b"MLCHEAD\\0"``;
- the format version and the number of arrays, as ``uint32``;
- for every array: the length of its name (``uint16``), the UTF-8 name,
  the number of dimensions (``uint8``), the shape (one ``uint32`` per
  dimension) and the ``float64`` values in C order.
"""

import logging
import struct

import numpy as np

from harmonized_detection.model import PARAM_NAMES, HeadParams

__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "InvalidCheckpointError",
    "save_checkpoint",
    "read_checkpoint",
]


logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MLCHEAD\0"
CHECKPOINT_VERSION = 1


class InvalidCheckpointError(Exception):
    """Raised when checkpoint data cannot be decoded properly."""
    pass


def save_checkpoint(file, params):
    """Store head parameters in checkpoint format.

    :param file: a file-like object opened in binary mode (its ``write``
        method will be called with :class:`bytes` objects)
    :param HeadParams params: the parameters to store
    """
    file.write(CHECKPOINT_MAGIC)
    file.write(struct.pack("<II", CHECKPOINT_VERSION, len(PARAM_NAMES)))
    for name in PARAM_NAMES:
        array = params[name]
        encoded_name = name.encode("utf-8")
        file.write(struct.pack("<H", len(encoded_name)))
        file.write(encoded_name)
        file.write(struct.pack("<B", array.ndim))
        file.write(struct.pack(f"<{array.ndim}I", *array.shape))
        file.write(array.astype("<f8").tobytes(order="C"))


def _read_exactly(file, size, what):
    buf = file.read(size)
    if len(buf) != size:
        raise InvalidCheckpointError(f"The checkpoint is truncated in {what}")
    return buf


def read_checkpoint(file):
    """Load head parameters stored in checkpoint format.

    :param file: a file-like object opened in binary mode
    :rtype: HeadParams
    :raises InvalidCheckpointError: if the data is not a valid checkpoint
    """
    if _read_exactly(file, 8, "the header") != CHECKPOINT_MAGIC:
        raise InvalidCheckpointError("Not a detector head checkpoint "
                                     "(wrong magic bytes)")
    version, count = struct.unpack("<II", _read_exactly(file, 8, "the header"))
    if version != CHECKPOINT_VERSION:
        raise InvalidCheckpointError(f"Unsupported checkpoint version "
                                     f"{version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exactly(file, 2, "a name"))
        try:
            name = _read_exactly(file, name_len, "a name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidCheckpointError("Invalid array name") from exc
        (ndim,) = struct.unpack("<B", _read_exactly(file, 1, name))
        shape = struct.unpack(f"<{ndim}I",
                              _read_exactly(file, 4 * ndim, name))
        size = int(np.prod(shape, dtype=np.int64))
        # frombuffer works on any file-like object, unlike numpy.fromfile
        buf = _read_exactly(file, 8 * size, name)
        arrays[name] = np.frombuffer(buf, "<f8").reshape(shape).astype(
            np.float64)
    if file.read(1):
        raise InvalidCheckpointError("Trailing data after the last array")
    unknown = set(arrays) - set(PARAM_NAMES)
    if unknown:
        logger.warning("ignoring unknown arrays %s in the checkpoint",
                       sorted(unknown))
    try:
        return HeadParams(arrays)
    except ValueError as exc:
        raise InvalidCheckpointError(str(exc)) from exc
