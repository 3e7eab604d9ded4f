# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""COCO-style average precision and proposal average recall.

Average precision (AP) is computed per class over all images, at every
IoU threshold of :class:`EvalConfig`, from a precision-recall curve whose
precision is replaced by its monotone (non-increasing) envelope and
sampled at evenly spaced recall values. The reported AP is the mean over
the classes present in the ground truth and over the thresholds.

Average recall (AR@k) is class-agnostic: the top-k detections of every
image are matched to the objects, and the recall is averaged over the IoU
thresholds.
"""

import logging

import numpy as np

from harmonized_detection.geometry import as_boxes, pairwise_iou

__all__ = [
    "GroundTruth",
    "EvalConfig",
    "EvalReport",
    "match_detections",
    "average_precision",
    "average_recall",
    "evaluate_detections",
]


logger = logging.getLogger(__name__)


class GroundTruth:
    """Ground-truth objects of a set of images, as parallel arrays.

    :param boxes: object boxes, shape (K, 4)
    :param labels: object classes, shape (K,)
    :param image_ids: image of every object, shape (K,)
    :param object_ids: identifier of every object (default ``0..K-1``)
    """
    def __init__(self, boxes, labels, image_ids, object_ids=None):
        self.boxes = as_boxes(np.asarray(boxes, dtype=np.float64)
                              .reshape(-1, 4))
        n = self.boxes.shape[0]
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        self.image_ids = np.asarray(image_ids, dtype=np.int64).reshape(-1)
        if object_ids is None:
            self.object_ids = np.arange(n, dtype=np.int64)
        else:
            self.object_ids = np.asarray(object_ids,
                                         dtype=np.int64).reshape(-1)
        for name in ("labels", "image_ids", "object_ids"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have {n} entries")

    def __len__(self):
        return self.boxes.shape[0]

    def in_image(self, image_id):
        """Indices of the objects of one image."""
        return np.flatnonzero(self.image_ids == image_id)


class EvalConfig:
    """Parameters of the evaluation.

    :param iou_thresholds: IoU thresholds, strictly increasing in (0, 1]
        (default 0.50, 0.55, ..., 0.95)
    :param int recall_points: number of recall values at which the
        precision envelope is sampled
    :param ar_limits: numbers of detections per image for AR@k
    """
    def __init__(self, iou_thresholds=None, recall_points=101,
                 ar_limits=(3, 10, 30)):
        if iou_thresholds is None:
            iou_thresholds = np.round(np.linspace(0.5, 0.95, 10), 2)
        thresholds = np.asarray(iou_thresholds, dtype=np.float64).ravel()
        if (thresholds.size == 0 or np.any(thresholds <= 0)
                or np.any(thresholds > 1)
                or np.any(np.diff(thresholds) <= 0)):
            raise ValueError("iou_thresholds must be strictly increasing in "
                             "(0, 1]")
        if int(recall_points) != recall_points or recall_points < 2:
            raise ValueError("recall_points must be an integer >= 2")
        limits = [int(k) for k in ar_limits]
        if any(k < 1 for k in limits) or list(ar_limits) != limits:
            raise ValueError("ar_limits must be positive integers")
        self.iou_thresholds = thresholds
        self.recall_points = int(recall_points)
        self.ar_limits = tuple(limits)

    def to_dict(self):
        return {
            "iou_thresholds": [float(t) for t in self.iou_thresholds],
            "recall_points": self.recall_points,
            "ar_limits": list(self.ar_limits),
        }


def _threshold_key(threshold):
    return f"{threshold:.2f}"


class EvalReport:
    """Evaluation metrics of a set of detections.

    ``ap`` is ``None`` when the ground truth has no object.
    ``ap_per_threshold`` maps thresholds formatted with 2 decimals
    (``"0.50"``) to AP, ``ar_at_k`` maps k to AR@k. ``divergence`` is
    ``None`` or a dict with the pooled and per-object Spearman metrics.
    """
    def __init__(self, ap, ap_per_threshold, ar_at_k, divergence=None,
                 num_images=0, num_detections=0, num_objects=0):
        self.ap = ap
        self.ap_per_threshold = ap_per_threshold
        self.ar_at_k = ar_at_k
        self.divergence = divergence
        self.num_images = num_images
        self.num_detections = num_detections
        self.num_objects = num_objects

    @property
    def ap50(self):
        return self.ap_per_threshold.get(_threshold_key(0.5))

    @property
    def ap75(self):
        return self.ap_per_threshold.get(_threshold_key(0.75))

    def to_dict(self):
        return {
            "schema": 1,
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "ap_per_threshold": dict(self.ap_per_threshold),
            "ar": {str(k): v for k, v in self.ar_at_k.items()},
            "divergence": self.divergence,
            "num_images": self.num_images,
            "num_detections": self.num_detections,
            "num_objects": self.num_objects,
        }


def match_detections(det_boxes, det_labels, gt_boxes, gt_labels,
                     iou_threshold):
    """Greedily match the detections of one image to its objects.

    Detections are visited in the given order (by descending score); each
    takes the unmatched object of its class with the highest IoU (lowest
    index on ties), and is a true positive if that IoU is at least
    ``iou_threshold``. Pass identical labels for class-agnostic matching.

    :returns: boolean true-positive flag of every detection
    :rtype: numpy.ndarray
    """
    det_labels = np.asarray(det_labels)
    gt_labels = np.asarray(gt_labels)
    overlaps = pairwise_iou(det_boxes, gt_boxes)
    flags = np.zeros(overlaps.shape[0], dtype=bool)
    if overlaps.shape[1] == 0:
        return flags
    available = np.ones(overlaps.shape[1], dtype=bool)
    for i in range(overlaps.shape[0]):
        candidates = available & (gt_labels == det_labels[i])
        if not candidates.any():
            continue
        row = np.where(candidates, overlaps[i], -1.0)
        best = np.argmax(row)
        if row[best] >= iou_threshold:
            flags[i] = True
            available[best] = False
    return flags


def average_precision(flags, num_gt, cfg=None):
    """Area under the interpolated precision-recall curve.

    :param flags: true-positive flags of the detections, by descending
        score
    :param int num_gt: number of ground-truth objects
    :param EvalConfig cfg: provides ``recall_points``
    :returns: the AP, 0.0 if ``num_gt`` is 0 and there are detections,
        ``None`` if there are neither objects nor detections
    """
    if cfg is None:
        cfg = EvalConfig()
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0:
        return 0.0 if flags.size else None
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # Monotone envelope: best precision at this recall or beyond
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.linspace(0.0, 1.0, cfg.recall_points)
    idx = np.searchsorted(recall, levels, side="left")
    sampled = np.zeros(levels.size)
    valid = idx < recall.size
    sampled[valid] = envelope[idx[valid]]
    return float(np.mean(sampled))


def _ranked(dets, indices):
    # descending score, then ascending id
    return indices[np.lexsort((dets.ids[indices], -dets.score[indices]))]


def average_recall(dets, gts, k, cfg=None):
    """Class-agnostic recall of the top-k detections of every image.

    :param Detections dets: detections (or proposals) of all images,
        ranked by their ``score``
    :param GroundTruth gts: objects of all images
    :param int k: number of detections kept per image
    :param EvalConfig cfg: provides the IoU thresholds
    :returns: the recall pooled over images, averaged over thresholds
        (``None`` if there is no object)
    """
    if cfg is None:
        cfg = EvalConfig()
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(gts) == 0:
        return None
    recalls = []
    for threshold in cfg.iou_thresholds:
        found = 0
        for image_id in np.unique(gts.image_ids):
            top = _ranked(dets, np.flatnonzero(dets.image_ids == image_id))
            top = top[:k]
            objects = gts.in_image(image_id)
            flags = match_detections(dets.boxes[top],
                                     np.zeros(top.size, np.int64),
                                     gts.boxes[objects],
                                     np.zeros(objects.size, np.int64),
                                     threshold)
            found += int(np.count_nonzero(flags))
        recalls.append(found / len(gts))
    return float(np.mean(recalls))


def _class_flags(dets, gts, label, threshold):
    ranked = _ranked(dets, np.flatnonzero(dets.labels == label))
    flags = np.zeros(ranked.size, dtype=bool)
    for image_id in np.unique(dets.image_ids[ranked]):
        pos = np.flatnonzero(dets.image_ids[ranked] == image_id)
        objects = gts.in_image(image_id)
        objects = objects[gts.labels[objects] == label]
        flags[pos] = match_detections(dets.boxes[ranked[pos]],
                                      dets.labels[ranked[pos]],
                                      gts.boxes[objects],
                                      gts.labels[objects], threshold)
    return flags


def evaluate_detections(dets, gts, cfg=None, proposals=None,
                        divergence=None):
    """Compute the AP and AR metrics of a set of detections.

    :param Detections dets: detections after suppression, ranked by
        ``score``
    :param GroundTruth gts: objects of all evaluated images
    :param EvalConfig cfg: evaluation parameters
    :param Detections proposals: class-agnostic proposals used for AR@k
        (``dets`` is used when omitted)
    :param dict divergence: divergence metrics copied into the report
    :rtype: EvalReport
    """
    if cfg is None:
        cfg = EvalConfig()
    if proposals is None:
        proposals = dets
    labels = np.unique(gts.labels)
    ap_per_threshold = {}
    for threshold in cfg.iou_thresholds:
        per_class = []
        for label in labels:
            flags = _class_flags(dets, gts, label, threshold)
            num_gt = int(np.count_nonzero(gts.labels == label))
            per_class.append(average_precision(flags, num_gt, cfg))
        ap_per_threshold[_threshold_key(threshold)] = (
            float(np.mean(per_class)) if per_class else None)
    values = [v for v in ap_per_threshold.values() if v is not None]
    ap = float(np.mean(values)) if values else None
    ar_at_k = {k: average_recall(proposals, gts, k, cfg)
               for k in cfg.ar_limits}
    image_ids = np.union1d(np.unique(gts.image_ids), np.unique(dets.image_ids))
    logger.debug("evaluated %d detections on %d images: AP=%s",
                 len(dets), image_ids.size, ap)
    return EvalReport(ap, ap_per_threshold, ar_at_k, divergence,
                      num_images=int(image_ids.size),
                      num_detections=len(dets), num_objects=len(gts))
