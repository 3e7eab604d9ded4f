# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Score fusion, non-maximum suppression and the divergence metric.

Three suppression modes are available (see :func:`get_suppressor`):

``standard``
    rank detections by their raw classification confidence;
``rescored``
    rank by the fused score ``raw_conf * iou_pred``;
``iou-nms``
    rank by the predicted IoU alone; the survivor of a cluster takes the
    highest raw confidence of the detections it suppresses.

The divergence between classification and localization is measured by the
Spearman rank correlation between the confidences and the IoUs of the
candidates matched to ground truth (:func:`divergence_metric`).
"""

import logging

import numpy as np
from scipy.stats import rankdata

from harmonized_detection.geometry import as_boxes, pairwise_iou

__all__ = [
    "NMS_MODES",
    "DIVERGENCE_POPULATION",
    "DUMP_DIVERGENCE_POPULATION",
    "DivergenceError",
    "Detections",
    "NmsConfig",
    "add_argparse_options",
    "get_suppressor",
    "Suppressor",
    "StandardSuppressor",
    "RescoredSuppressor",
    "IouNmsSuppressor",
    "fuse_score",
    "nms",
    "batched_nms",
    "divergence_metric",
    "per_object_divergence",
    "match_divergence_pairs",
]


logger = logging.getLogger(__name__)

NMS_MODES = ("standard", "rescored", "iou-nms")

DIVERGENCE_POPULATION = (
    "pre-NMS candidates matched to a ground-truth object; confidence of "
    "the ground-truth class against the IoU of the regressed box with that "
    "object; pooled over all evaluated images"
)

DUMP_DIVERGENCE_POPULATION = (
    "detections matched to the same-class ground-truth object of highest "
    "IoU (IoU > 0) in the same image; raw confidence against that IoU; "
    "pooled over all images"
)


class DivergenceError(ValueError):
    """Raised when the divergence metric has too few samples."""
    pass


class Detections:
    """A batch of detections stored as parallel arrays.

    :param boxes: boxes, shape (N, 4)
    :param labels: class indices, shape (N,)
    :param raw_conf: classification confidences, shape (N,)
    :param iou_pred: predicted IoUs, shape (N,), NaN where absent (or
        ``None`` if no detection has one)
    :param image_ids: image of every detection (default all 0)
    :param ids: unique detection ids used to break ties (default
        ``0..N-1``)
    :param score: ranking quality (defaults to ``raw_conf``)
    :raises ValueError: if the arrays have inconsistent lengths
    """
    def __init__(self, boxes, labels, raw_conf, iou_pred=None,
                 image_ids=None, ids=None, score=None):
        self.boxes = as_boxes(np.asarray(boxes, dtype=np.float64)
                              .reshape(-1, 4))
        n = self.boxes.shape[0]
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        self.raw_conf = np.asarray(raw_conf, dtype=np.float64).reshape(-1)
        if iou_pred is None:
            self.iou_pred = np.full(n, np.nan)
        else:
            self.iou_pred = np.asarray(iou_pred,
                                       dtype=np.float64).reshape(-1)
        if image_ids is None:
            self.image_ids = np.zeros(n, dtype=np.int64)
        else:
            self.image_ids = np.asarray(image_ids,
                                        dtype=np.int64).reshape(-1)
        if ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        else:
            self.ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if score is None:
            self.score = self.raw_conf.copy()
        else:
            self.score = np.asarray(score, dtype=np.float64).reshape(-1)
        for name in ("labels", "raw_conf", "iou_pred", "image_ids", "ids",
                     "score"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have {n} entries")

    def __len__(self):
        return self.boxes.shape[0]

    @classmethod
    def empty(cls):
        return cls(np.empty((0, 4)), [], [])

    @classmethod
    def concatenate(cls, batches):
        batches = list(batches)
        if not batches:
            return cls.empty()
        return cls(
            np.concatenate([b.boxes for b in batches]),
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.raw_conf for b in batches]),
            np.concatenate([b.iou_pred for b in batches]),
            np.concatenate([b.image_ids for b in batches]),
            np.concatenate([b.ids for b in batches]),
            np.concatenate([b.score for b in batches]),
        )

    def take(self, indices, score=None):
        """Select a subset of the detections (in the given order)."""
        indices = np.asarray(indices, dtype=np.int64)
        return Detections(self.boxes[indices], self.labels[indices],
                          self.raw_conf[indices], self.iou_pred[indices],
                          self.image_ids[indices], self.ids[indices],
                          self.score[indices] if score is None else score)

    @property
    def has_iou_pred(self):
        return len(self) == 0 or bool(np.all(np.isfinite(self.iou_pred)))


def fuse_score(raw_conf, iou_pred):
    """Integrated quality score: the product of confidence and IoU."""
    return np.multiply(raw_conf, iou_pred)


class NmsConfig:
    """Parameters of the non-maximum suppression.

    :param float iou_threshold: a detection is suppressed when its IoU with
        a survivor is at least this value, in (0, 1]
    :param str mode: one of :data:`NMS_MODES`
    :param int max_out: maximum number of detections kept per image
    :param float score_threshold: candidates with a lower raw confidence
        are discarded before suppression at inference time
    """
    def __init__(self, iou_threshold=0.5, mode="standard", max_out=100,
                 score_threshold=0.05):
        if not 0 < iou_threshold <= 1:
            raise ValueError(f"iou_threshold must be in (0, 1], got "
                             f"{iou_threshold}")
        if mode not in NMS_MODES:
            raise ValueError(f"invalid NMS mode {mode!r} (must be one of "
                             f"{NMS_MODES})")
        if int(max_out) != max_out or max_out < 1:
            raise ValueError("max_out must be a positive integer")
        if not 0 <= score_threshold <= 1:
            raise ValueError(f"score_threshold must be in [0, 1], got "
                             f"{score_threshold}")
        self.iou_threshold = float(iou_threshold)
        self.mode = mode
        self.max_out = int(max_out)
        self.score_threshold = float(score_threshold)

    def to_dict(self):
        return {
            "iou_threshold": self.iou_threshold,
            "mode": self.mode,
            "max_out": self.max_out,
            "score_threshold": self.score_threshold,
        }


def add_argparse_options(parser):
    """Add command-line options for non-maximum suppression.

    :param argparse.ArgumentParser parser: an argument parser
    """
    group = parser.add_argument_group("Options for non-maximum suppression")
    group.add_argument("--nms-mode", default=None, choices=NMS_MODES,
                       help='ranking used for suppression: "standard" (raw '
                       'confidence), "rescored" (confidence times '
                       'predicted IoU) or "iou-nms" (predicted IoU only) '
                       "[default: standard]")
    group.add_argument("--iou-threshold", type=float, default=None,
                       help="IoU at or above which a detection is "
                       "suppressed [default: 0.5]")


def get_suppressor(cfg):
    """Create the suppressor selected by an :class:`NmsConfig`.

    :rtype: Suppressor
    """
    if cfg.mode == "standard":
        return StandardSuppressor()
    elif cfg.mode == "rescored":
        return RescoredSuppressor()
    elif cfg.mode == "iou-nms":
        return IouNmsSuppressor()
    else:
        raise NotImplementedError("invalid NMS mode " + cfg.mode)


class Suppressor:
    """Base class for the ranking rules of greedy NMS."""

    requires_iou_pred = False

    def ranking_key(self, dets):
        """Key by which detections are ranked, highest first."""
        raise NotImplementedError

    def survivor_score(self, dets, survivor, suppressed):
        """Ranking quality given to a survivor.

        :param Detections dets: the detections being suppressed
        :param int survivor: index of the surviving detection
        :param numpy.ndarray suppressed: indices of the detections it
            suppresses
        """
        raise NotImplementedError


class StandardSuppressor(Suppressor):
    def ranking_key(self, dets):
        return dets.raw_conf

    def survivor_score(self, dets, survivor, suppressed):
        return dets.raw_conf[survivor]


class RescoredSuppressor(Suppressor):
    requires_iou_pred = True

    def ranking_key(self, dets):
        return fuse_score(dets.raw_conf, dets.iou_pred)

    def survivor_score(self, dets, survivor, suppressed):
        return fuse_score(dets.raw_conf[survivor], dets.iou_pred[survivor])


class IouNmsSuppressor(Suppressor):
    requires_iou_pred = True

    def ranking_key(self, dets):
        return dets.iou_pred

    def survivor_score(self, dets, survivor, suppressed):
        return max(dets.raw_conf[survivor],
                   np.max(dets.raw_conf[suppressed], initial=0.0))


def nms(dets, cfg=None):
    """Greedy non-maximum suppression of the detections of one class.

    Detections are visited by descending ranking key (ties by lowest id).
    Each visited detection survives and suppresses every remaining one
    whose IoU with it is ``>= cfg.iou_threshold``. The output is in
    visiting order, with ``score`` set to the survivor's ranking quality.

    :param Detections dets: detections of a single class and image
    :param NmsConfig cfg: suppression parameters
    :rtype: Detections
    :raises ValueError: if the mode needs IoU predictions that are missing
    """
    if cfg is None:
        cfg = NmsConfig()
    suppressor = get_suppressor(cfg)
    if suppressor.requires_iou_pred and not dets.has_iou_pred:
        raise ValueError(f"NMS mode {cfg.mode!r} requires IoU predictions "
                         "for every detection")
    if len(dets) == 0:
        return dets
    key = suppressor.ranking_key(dets)
    remaining = np.lexsort((dets.ids, -key))
    kept = []
    scores = []
    while remaining.size and len(kept) < cfg.max_out:
        survivor = remaining[0]
        rest = remaining[1:]
        overlaps = pairwise_iou(dets.boxes[survivor:survivor + 1],
                                dets.boxes[rest])[0]
        suppressed = overlaps >= cfg.iou_threshold
        kept.append(survivor)
        scores.append(suppressor.survivor_score(dets, survivor,
                                                rest[suppressed]))
        remaining = rest[~suppressed]
    return dets.take(kept, score=np.asarray(scores, dtype=np.float64))


def batched_nms(dets, cfg=None):
    """Run :func:`nms` separately for every image and class.

    At most ``cfg.max_out`` detections are kept per image, those of highest
    ``score`` (ties by lowest id). The output is grouped by increasing image
    id, and sorted by descending score within an image.

    :param Detections dets: detections of any number of images and classes
    :param NmsConfig cfg: suppression parameters
    :rtype: Detections
    """
    if cfg is None:
        cfg = NmsConfig()
    per_image = []
    for image_id in np.unique(dets.image_ids):
        in_image = np.flatnonzero(dets.image_ids == image_id)
        survivors = []
        for label in np.unique(dets.labels[in_image]):
            group = in_image[dets.labels[in_image] == label]
            survivors.append(nms(dets.take(group), cfg))
        merged = Detections.concatenate(survivors)
        order = np.lexsort((merged.ids, -merged.score))[:cfg.max_out]
        per_image.append(merged.take(order))
    return Detections.concatenate(per_image)


def divergence_metric(confidences, ious):
    """Spearman rank correlation between confidences and IoUs.

    Ranks are averaged over ties; the coefficient is the Pearson
    correlation of the two rank vectors.

    :param confidences: confidence of every pair
    :param ious: IoU of every pair
    :returns: ``(rho, degenerate)``; ``rho`` is 0.0 and ``degenerate`` is
        ``True`` when either variable is constant
    :rtype: tuple
    :raises DivergenceError: if there are fewer than 2 pairs or a value is
        not finite
    """
    x = np.asarray(confidences, dtype=np.float64).ravel()
    y = np.asarray(ious, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DivergenceError("confidences and IoUs must be paired")
    if x.size < 2:
        raise DivergenceError(f"the divergence metric needs at least 2 "
                              f"pairs, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DivergenceError("the divergence pairs must be finite")
    if np.all(x == x[0]) or np.all(y == y[0]):
        logger.debug("divergence metric of a constant variable")
        return 0.0, True
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    rho = np.sum(dx * dy) / np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    return float(np.clip(rho, -1.0, 1.0)), False


def per_object_divergence(confidences, ious, object_keys):
    """Mean of the divergence metric computed separately for every object.

    Objects with fewer than 2 pairs, or whose pairs are degenerate, are
    left out.

    :param object_keys: object identifier of every pair (any hashable
        row, e.g. ``(image_id, object_id)`` as an (N, 2) array)
    :returns: ``(mean_rho, num_objects)``, ``mean_rho`` is ``None`` when
        no object qualifies
    :rtype: tuple
    """
    x = np.asarray(confidences, dtype=np.float64).ravel()
    y = np.asarray(ious, dtype=np.float64).ravel()
    if x.size == 0:
        return None, 0
    keys = np.asarray(object_keys).reshape(x.size, -1)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    values = []
    for k in range(inverse.max() + 1):
        members = np.flatnonzero(inverse == k)
        if members.size < 2:
            continue
        rho, degenerate = divergence_metric(x[members], y[members])
        if not degenerate:
            values.append(rho)
    if not values:
        return None, 0
    return float(np.mean(values)), len(values)


def match_divergence_pairs(dets, gt_boxes, gt_labels, gt_image_ids,
                           gt_object_ids):
    """Pair detections with ground truth for the divergence metric.

    Every detection is matched to the object of the same class and image
    with which it has the highest IoU (lowest object id on ties), if that
    IoU is positive.

    :param Detections dets: detections before suppression
    :returns: ``(confidences, ious, object_keys)`` with ``object_keys`` an
        (M, 2) array of ``(image_id, object_id)``
    :rtype: tuple
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    gt_image_ids = np.asarray(gt_image_ids, dtype=np.int64)
    gt_object_ids = np.asarray(gt_object_ids, dtype=np.int64)
    confidences, ious, keys = [], [], []
    for image_id in np.unique(dets.image_ids):
        in_image = np.flatnonzero(dets.image_ids == image_id)
        gts = np.flatnonzero(gt_image_ids == image_id)
        if gts.size == 0:
            continue
        gts = gts[np.argsort(gt_object_ids[gts], kind="stable")]
        overlaps = pairwise_iou(dets.boxes[in_image], gt_boxes[gts])
        same_class = (dets.labels[in_image][:, np.newaxis]
                      == gt_labels[gts][np.newaxis, :])
        overlaps = np.where(same_class, overlaps, -1.0)
        best = np.argmax(overlaps, axis=1)
        best_iou = overlaps[np.arange(in_image.size), best]
        hit = best_iou > 0
        confidences.append(dets.raw_conf[in_image][hit])
        ious.append(best_iou[hit])
        keys.append(np.stack([np.full(np.count_nonzero(hit), image_id),
                              gt_object_ids[gts][best[hit]]], axis=1))
    if not confidences:
        return np.empty(0), np.empty(0), np.empty((0, 2), dtype=np.int64)
    return (np.concatenate(confidences), np.concatenate(ious),
            np.concatenate(keys))
