# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Reading and writing detection, ground-truth and scene dumps.

Detection and ground-truth dumps are JSON-lines files (UTF-8, one JSON
object per line, LF line endings):

- detection records: ``{"image_id": int, "class": int, "box": [x1, y1,
  x2, y2], "raw_conf": float, "iou_pred": float}``, ``iou_pred`` being
  optional;
- ground-truth records: ``{"image_id": int, "object_id": int, "class":
  int, "box": [x1, y1, x2, y2]}``.

Readers validate every line and never skip a record: a malformed line
(including a blank one) raises :exc:`InvalidDumpError` with its 1-based
line number.

A directory of scenes holds ``gts.jsonl``, ``scenes.npz`` (the
``priors_<image_id>`` and ``features_<image_id>`` arrays) and
``scenes.json`` (the list of image ids and the scene configuration).
"""

import io
import json
import logging
import math
import numbers

import numpy as np

from harmonized_detection.evaluation import GroundTruth
from harmonized_detection.postprocess import Detections
from harmonized_detection.scene import Scene
from harmonized_detection.utils import dumps_json

__all__ = [
    "SCENES_SCHEMA",
    "InvalidDumpError",
    "parse_detections",
    "parse_ground_truth",
    "format_detections",
    "format_ground_truth",
    "scenes_ground_truth",
    "write_scenes",
    "read_scenes",
]


logger = logging.getLogger(__name__)

SCENES_SCHEMA = 1


class InvalidDumpError(ValueError):
    """Raised when a dump cannot be decoded.

    :ivar int line_number: 1-based number of the offending line (``None``
        when the error is not tied to a line)
    """
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


def _is_int(value):
    return isinstance(value, numbers.Integral) and not isinstance(value, bool)


def _is_real(value):
    return (isinstance(value, numbers.Real) and not isinstance(value, bool)
            and math.isfinite(value))


def _records(buf):
    text = buf.decode("utf-8") if isinstance(buf, bytes) else buf
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for line_number, line in enumerate(lines, start=1):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidDumpError(f"invalid JSON ({exc.msg})",
                                   line_number) from exc
        if not isinstance(record, dict):
            raise InvalidDumpError("a record must be a JSON object",
                                   line_number)
        yield line_number, record


def _require(record, key, check, description, line_number):
    if key not in record:
        raise InvalidDumpError(f'missing "{key}"', line_number)
    value = record[key]
    if not check(value):
        raise InvalidDumpError(f'"{key}" must be {description}',
                               line_number)
    return value


def _box(record, line_number):
    box = _require(record, "box",
                   lambda b: (isinstance(b, list) and len(b) == 4
                              and all(_is_real(v) for v in b)),
                   "a list of 4 finite numbers", line_number)
    if box[0] > box[2] or box[1] > box[3]:
        raise InvalidDumpError("the box must satisfy x1 <= x2 and y1 <= y2",
                               line_number)
    return box


def _unit(value):
    return _is_real(value) and 0 <= value <= 1


def parse_detections(buf):
    """Decode a detection dump.

    Detections get ids in file order (0-based record index).

    :param buf: the dump contents (:class:`bytes` or :class:`str`)
    :rtype: Detections
    :raises InvalidDumpError: on the first malformed line
    """
    boxes, labels, raw_conf, iou_pred, image_ids = [], [], [], [], []
    for line_number, record in _records(buf):
        image_ids.append(_require(record, "image_id", _is_int,
                                  "an integer", line_number))
        labels.append(_require(record, "class",
                               lambda v: _is_int(v) and v >= 0,
                               "a non-negative integer", line_number))
        boxes.append(_box(record, line_number))
        raw_conf.append(_require(record, "raw_conf", _unit,
                                 "a number in [0, 1]", line_number))
        if record.get("iou_pred") is None:
            iou_pred.append(math.nan)
        else:
            iou_pred.append(_require(record, "iou_pred", _unit,
                                     "a number in [0, 1]", line_number))
    logger.debug("read %d detection records", len(boxes))
    return Detections(np.array(boxes, dtype=np.float64).reshape(-1, 4),
                      labels, raw_conf, iou_pred, image_ids)


def parse_ground_truth(buf):
    """Decode a ground-truth dump.

    :param buf: the dump contents (:class:`bytes` or :class:`str`)
    :rtype: GroundTruth
    :raises InvalidDumpError: on the first malformed line, or on a repeated
        ``(image_id, object_id)`` pair
    """
    boxes, labels, image_ids, object_ids = [], [], [], []
    seen = set()
    for line_number, record in _records(buf):
        image_id = _require(record, "image_id", _is_int, "an integer",
                            line_number)
        object_id = _require(record, "object_id", _is_int, "an integer",
                             line_number)
        if (image_id, object_id) in seen:
            raise InvalidDumpError(f"duplicate object {object_id} in image "
                                   f"{image_id}", line_number)
        seen.add((image_id, object_id))
        labels.append(_require(record, "class",
                               lambda v: _is_int(v) and v >= 0,
                               "a non-negative integer", line_number))
        boxes.append(_box(record, line_number))
        image_ids.append(image_id)
        object_ids.append(object_id)
    logger.debug("read %d ground-truth records", len(boxes))
    return GroundTruth(np.array(boxes, dtype=np.float64).reshape(-1, 4),
                       labels, image_ids, object_ids)


def format_detections(dets):
    """Encode detections as a JSON-lines dump.

    :param Detections dets: the detections, written in their order
    :rtype: str
    """
    lines = []
    for i in range(len(dets)):
        record = {
            "image_id": int(dets.image_ids[i]),
            "class": int(dets.labels[i]),
            "box": [float(v) for v in dets.boxes[i]],
            "raw_conf": float(dets.raw_conf[i]),
        }
        if np.isfinite(dets.iou_pred[i]):
            record["iou_pred"] = float(dets.iou_pred[i])
        lines.append(json.dumps(record, sort_keys=True) + "\n")
    return "".join(lines)


def format_ground_truth(gts):
    """Encode ground-truth objects as a JSON-lines dump.

    :param GroundTruth gts: the objects
    :rtype: str
    """
    return "".join(
        json.dumps({
            "image_id": int(gts.image_ids[i]),
            "object_id": int(gts.object_ids[i]),
            "class": int(gts.labels[i]),
            "box": [float(v) for v in gts.boxes[i]],
        }, sort_keys=True) + "\n"
        for i in range(len(gts)))


def scenes_ground_truth(scenes):
    """Ground truth of a list of scenes (object ids are per-image)."""
    return GroundTruth(
        np.concatenate([s.gt_boxes for s in scenes]),
        np.concatenate([s.gt_labels for s in scenes]),
        np.concatenate([np.full(s.num_objects, s.image_id)
                        for s in scenes]),
        np.concatenate([np.arange(s.num_objects) for s in scenes]))


def write_scenes(accessor, scenes, scene_cfg, overwrite=False):
    """Store scenes in a directory.

    :param FileAccessor accessor: accessor rooted at the target directory
    :param list scenes: the scenes
    :param SceneConfig scene_cfg: configuration echoed in ``scenes.json``
    :raises DataAccessError: if a file cannot be written
    """
    arrays = {}
    for scene in scenes:
        arrays[f"priors_{scene.image_id}"] = scene.priors
        arrays[f"features_{scene.image_id}"] = scene.features
    npz = io.BytesIO()
    np.savez(npz, **arrays)
    metadata = {
        "schema": SCENES_SCHEMA,
        "image_ids": [scene.image_id for scene in scenes],
        "scene": scene_cfg.to_dict(),
    }
    accessor.store_file("gts.jsonl",
                        format_ground_truth(scenes_ground_truth(scenes))
                        .encode("utf-8"),
                        mime_type="application/x-ndjson",
                        overwrite=overwrite)
    accessor.store_file("scenes.npz", npz.getvalue(), overwrite=overwrite)
    accessor.store_file("scenes.json", dumps_json(metadata).encode("utf-8"),
                        mime_type="application/json", overwrite=overwrite)


def read_scenes(accessor):
    """Load scenes stored by :func:`write_scenes`.

    :param FileAccessor accessor: accessor rooted at the scene directory
    :returns: ``(scenes, metadata)``
    :rtype: tuple
    :raises InvalidDumpError: if the files are inconsistent
    :raises DataAccessError: if a file cannot be read
    """
    try:
        metadata = json.loads(accessor.fetch_file("scenes.json")
                              .decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidDumpError(f"invalid scenes.json: {exc}") from exc
    if (not isinstance(metadata, dict)
            or metadata.get("schema") != SCENES_SCHEMA
            or not isinstance(metadata.get("image_ids"), list)):
        raise InvalidDumpError("scenes.json is not a scene index")
    gts = parse_ground_truth(accessor.fetch_file("gts.jsonl"))
    try:
        arrays = np.load(io.BytesIO(accessor.fetch_file("scenes.npz")))
    except (OSError, ValueError) as exc:
        raise InvalidDumpError(f"invalid scenes.npz: {exc}") from exc
    scenes = []
    with arrays:
        for image_id in metadata["image_ids"]:
            try:
                priors = arrays[f"priors_{image_id}"]
                features = arrays[f"features_{image_id}"]
            except KeyError as exc:
                raise InvalidDumpError(f"scenes.npz lacks the arrays of "
                                       f"image {image_id}") from exc
            objects = gts.in_image(image_id)
            objects = objects[np.argsort(gts.object_ids[objects],
                                         kind="stable")]
            scenes.append(Scene(image_id, gts.boxes[objects],
                                gts.labels[objects], priors, features))
    return scenes, metadata
