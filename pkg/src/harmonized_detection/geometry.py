# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Axis-aligned box arithmetic shared by every other module.

Boxes are stored as NumPy arrays whose last axis holds ``(x1, y1, x2, y2)``
in pixel coordinates. They are treated as continuous real rectangles: the
area is ``(x2 - x1) * (y2 - y1)``, without the "+1" pixel correction of
some datasets.

Box deltas (the regression parameterization of the detector head) are
arrays whose last axis holds ``(dx, dy, dw, dh)``: centre offsets
normalized by the prior size, and log-ratios of the sizes.
"""

import numpy as np

__all__ = [
    "InvalidBoxError",
    "as_boxes",
    "box_area",
    "box_centers",
    "iou",
    "pairwise_iou",
    "aligned_iou",
    "encode",
    "decode",
]


class InvalidBoxError(ValueError):
    """Raised when an array does not hold valid boxes."""
    pass


def as_boxes(boxes):
    """Convert to a float64 array of boxes and check the box invariants.

    :param boxes: array-like of shape (..., 4)
    :rtype: numpy.ndarray
    :raises InvalidBoxError: if the shape is wrong, a coordinate is not
        finite, or ``x1 > x2`` or ``y1 > y2``
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim == 0 or boxes.shape[-1] != 4:
        raise InvalidBoxError(f"boxes must have shape (..., 4), got "
                              f"{boxes.shape}")
    if not np.all(np.isfinite(boxes)):
        raise InvalidBoxError("box coordinates must be finite")
    if np.any(boxes[..., 0] > boxes[..., 2]) or np.any(
            boxes[..., 1] > boxes[..., 3]):
        raise InvalidBoxError("boxes must satisfy x1 <= x2 and y1 <= y2")
    return boxes


def box_area(boxes):
    """Area of boxes (zero for degenerate boxes)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    return ((boxes[..., 2] - boxes[..., 0])
            * (boxes[..., 3] - boxes[..., 1]))


def box_centers(boxes):
    """Centres of boxes, as an array of shape (..., 2)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    return 0.5 * (boxes[..., :2] + boxes[..., 2:])


def _iou_from_corners(a, b):
    # a and b broadcast against each other
    iw = np.clip(np.minimum(a[..., 2], b[..., 2])
                 - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3])
                 - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    out = np.zeros(np.broadcast(union, inter).shape)
    np.divide(inter, union, out=out, where=union > 0)
    # rounding can push identical boxes a hair above 1
    return np.clip(out, 0.0, 1.0)


def iou(a, b):
    """Intersection-over-union of two boxes.

    :param a: a box ``(x1, y1, x2, y2)``
    :param b: a box ``(x1, y1, x2, y2)``
    :returns: ``|a ∩ b| / |a ∪ b|``, or 0 if the union has zero area
    :rtype: float
    """
    return float(_iou_from_corners(np.asarray(a, dtype=np.float64),
                                   np.asarray(b, dtype=np.float64)))


def pairwise_iou(boxes_a, boxes_b):
    """IoU of every box of ``boxes_a`` with every box of ``boxes_b``.

    :param numpy.ndarray boxes_a: array of shape (N, 4)
    :param numpy.ndarray boxes_b: array of shape (M, 4)
    :returns: array of shape (N, M)
    """
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    return _iou_from_corners(a[:, np.newaxis, :], b[np.newaxis, :, :])


def aligned_iou(boxes_a, boxes_b):
    """Element-wise IoU of two arrays of boxes with the same shape."""
    return _iou_from_corners(np.asarray(boxes_a, dtype=np.float64),
                             np.asarray(boxes_b, dtype=np.float64))


def _centers_sizes(boxes):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    cx = boxes[..., 0] + 0.5 * w
    cy = boxes[..., 1] + 0.5 * h
    return cx, cy, w, h


def encode(prior, target):
    """Express target boxes as deltas relative to prior boxes.

    ``dx = (tcx - pcx) / pw``, ``dy = (tcy - pcy) / ph``,
    ``dw = ln(tw / pw)``, ``dh = ln(th / ph)``.

    :param prior: prior box(es), shape (..., 4), non-degenerate
    :param target: target box(es), broadcastable against ``prior``
    :returns: deltas of shape (..., 4)
    :raises InvalidBoxError: if a prior or a target is degenerate
    """
    prior = np.asarray(prior, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    pcx, pcy, pw, ph = _centers_sizes(prior)
    tcx, tcy, tw, th = _centers_sizes(target)
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise InvalidBoxError("cannot encode relative to a degenerate prior")
    if np.any(tw <= 0) or np.any(th <= 0):
        raise InvalidBoxError("cannot encode a degenerate target box")
    return np.stack([
        (tcx - pcx) / pw,
        (tcy - pcy) / ph,
        np.log(tw / pw),
        np.log(th / ph),
    ], axis=-1)


def decode(prior, delta, clamp=False, bounds=None):
    """Apply deltas to prior boxes (exact inverse of :func:`encode`).

    :param prior: prior box(es), shape (..., 4), non-degenerate
    :param delta: deltas ``(dx, dy, dw, dh)``, broadcastable against
        ``prior``
    :param bool clamp: clip the output to the scene bounds
    :param bounds: scene size ``(width, height)``, required when ``clamp``
        is set
    :returns: boxes of shape (..., 4)
    """
    prior = np.asarray(prior, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    pcx, pcy, pw, ph = _centers_sizes(prior)
    cx = pcx + delta[..., 0] * pw
    cy = pcy + delta[..., 1] * ph
    half_w = 0.5 * pw * np.exp(delta[..., 2])
    half_h = 0.5 * ph * np.exp(delta[..., 3])
    boxes = np.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h],
                     axis=-1)
    if clamp:
        if bounds is None:
            raise ValueError("clamping requires the scene bounds")
        width, height = bounds
        boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0.0, width)
        boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0.0, height)
    return boxes
