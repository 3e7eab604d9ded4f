# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Label assignment of candidate samples to ground-truth objects.

Assignment happens in two stages:

1. :func:`match_candidates` groups the priors by the object they match
   (using a :class:`Matcher`, see :func:`get_matcher`). The members of
   the group of object *k* are its candidate positives; under the
   IoU-band matcher this includes the *ignored* priors whose IoU falls in
   the ambiguous band.

2. The groups are labeled, either with the fixed baseline rule
   (:func:`fixed_label`: core positives only, ignored priors excluded) or
   with mutual labeling (:func:`mutual_label`), where the classification
   positives of an object are chosen by Otsu-thresholding the IoUs of the
   regressed boxes, and the localization positives by Otsu-thresholding
   the ground-truth class confidences.

Candidates are handled as parallel arrays indexed by candidate id (the
row index of the prior), ground-truth objects by their row index in the
ground-truth arrays.
"""

import logging

import numpy as np

from harmonized_detection.geometry import (
    aligned_iou,
    box_area,
    box_centers,
    pairwise_iou,
)
from harmonized_detection.thresholding import otsu_threshold, split

__all__ = [
    "ORIGIN_NEGATIVE",
    "ORIGIN_CORE",
    "ORIGIN_IGNORED",
    "ORIGIN_NAMES",
    "AssignmentError",
    "AssignmentConfig",
    "add_argparse_options",
    "get_matcher",
    "Matcher",
    "IouBandMatcher",
    "InsideBoxMatcher",
    "Grouping",
    "AssignmentResult",
    "match_candidates",
    "fixed_label",
    "mutual_label",
    "ignored_weights",
]


logger = logging.getLogger(__name__)

ORIGIN_NEGATIVE = 0
ORIGIN_CORE = 1
ORIGIN_IGNORED = 2
ORIGIN_NAMES = {
    ORIGIN_NEGATIVE: "negative",
    ORIGIN_CORE: "core-positive",
    ORIGIN_IGNORED: "ignored",
}

MATCHERS = ("iou-band", "inside-box")


class AssignmentError(ValueError):
    """Raised when candidates cannot be labeled consistently."""
    pass


class AssignmentConfig:
    """Parameters of the assignment.

    :param float alpha: exponent of the ignored-sample loss weights (0
        gives uniform weights)
    :param str matcher: ``"iou-band"`` or ``"inside-box"``
    :param float low: lower bound of the ignored IoU band (IoU-band
        matcher only)
    :param float high: IoU from which a prior is a core positive (IoU-band
        matcher only)
    :param int min_candidates: minimum number of core positives per object
        (low-quality matches are promoted to reach it)
    """

    def __init__(self, alpha=0.0, matcher="inside-box", low=0.4, high=0.5,
                 min_candidates=1):
        if not alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {alpha}")
        if matcher not in MATCHERS:
            raise ValueError(f"invalid matcher {matcher!r} (must be one of "
                             f"{MATCHERS})")
        if not 0 <= low <= high <= 1:
            raise ValueError("the IoU band must satisfy 0 <= low <= high "
                             f"<= 1, got ({low}, {high})")
        if int(min_candidates) != min_candidates or min_candidates < 1:
            raise ValueError("min_candidates must be a positive integer")
        self.alpha = float(alpha)
        self.matcher = matcher
        self.low = float(low)
        self.high = float(high)
        self.min_candidates = int(min_candidates)

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "matcher": self.matcher,
            "low": self.low,
            "high": self.high,
            "min_candidates": self.min_candidates,
        }


def add_argparse_options(parser):
    """Add command-line options for the assignment.

    :param argparse.ArgumentParser parser: an argument parser

    Options default to ``None`` so that values from the configuration
    file are kept unless a flag is given explicitly.
    """
    group = parser.add_argument_group("Options for label assignment")
    group.add_argument("--alpha", type=float, default=None,
                       help="exponent of the loss weights of the ignored "
                       "samples (0 gives them a weight of 1)")
    group.add_argument("--matcher", default=None, choices=MATCHERS,
                       help='prior matching rule: "iou-band" (IoU above '
                       "the band is positive, inside the band is ignored) "
                       'or "inside-box" (prior centre inside the box)')


def get_matcher(cfg):
    """Create the matcher selected by an :class:`AssignmentConfig`.

    :rtype: Matcher
    """
    if cfg.matcher == "iou-band":
        return IouBandMatcher(cfg.low, cfg.high)
    elif cfg.matcher == "inside-box":
        return InsideBoxMatcher()
    else:
        raise NotImplementedError("invalid matcher " + cfg.matcher)


class Matcher:
    """Base class for prior-to-object matching rules."""

    def match(self, priors, gt_boxes):
        """Match every prior to at most one object.

        :param numpy.ndarray priors: prior boxes, shape (N, 4)
        :param numpy.ndarray gt_boxes: object boxes, shape (K, 4), K >= 1
        :returns: ``(matched, origin)``: the object index of every prior
            (-1 for background) and its origin code (:data:`ORIGIN_CORE`,
            :data:`ORIGIN_IGNORED` or :data:`ORIGIN_NEGATIVE`)
        :rtype: tuple
        """
        raise NotImplementedError


class IouBandMatcher(Matcher):
    """Match priors to the object of highest IoU.

    IoU >= ``high`` gives a core positive, ``low <= IoU < high`` an
    ignored prior (still a candidate positive of the object), anything
    lower is background. Equal IoUs go to the lowest object index.
    """
    def __init__(self, low, high):
        self.low = low
        self.high = high

    def match(self, priors, gt_boxes):
        ious = pairwise_iou(priors, gt_boxes)
        best = np.argmax(ious, axis=1)
        best_iou = ious[np.arange(ious.shape[0]), best]
        origin = np.full(ious.shape[0], ORIGIN_NEGATIVE)
        origin[best_iou >= self.low] = ORIGIN_IGNORED
        origin[best_iou >= self.high] = ORIGIN_CORE
        matched = np.where(origin != ORIGIN_NEGATIVE, best, -1)
        return matched, origin


class InsideBoxMatcher(Matcher):
    """Match priors whose centre lies inside an object box.

    A centre inside several boxes goes to the one of smallest area (then
    to the lowest object index). All matched priors are core positives.
    """
    def match(self, priors, gt_boxes):
        centers = box_centers(priors)
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
        inside = ((centers[:, np.newaxis, 0] >= gt_boxes[np.newaxis, :, 0])
                  & (centers[:, np.newaxis, 0] <= gt_boxes[np.newaxis, :, 2])
                  & (centers[:, np.newaxis, 1] >= gt_boxes[np.newaxis, :, 1])
                  & (centers[:, np.newaxis, 1] <= gt_boxes[np.newaxis, :, 3]))
        areas = np.where(inside, box_area(gt_boxes)[np.newaxis, :], np.inf)
        best = np.argmin(areas, axis=1)
        hit = inside.any(axis=1)
        matched = np.where(hit, best, -1)
        origin = np.where(hit, ORIGIN_CORE, ORIGIN_NEGATIVE)
        return matched, origin


class Grouping:
    """Candidate groups of the objects of one image.

    :param numpy.ndarray matched: object index of every candidate, -1 for
        background
    :param numpy.ndarray origin: origin code of every candidate
    :param int num_objects: number of ground-truth objects
    """
    def __init__(self, matched, origin, num_objects):
        self.matched = np.asarray(matched, dtype=np.int64)
        self.origin = np.asarray(origin, dtype=np.int64)
        self.num_objects = int(num_objects)
        self.groups = [np.flatnonzero(self.matched == k)
                       for k in range(self.num_objects)]

    @property
    def num_candidates(self):
        return self.matched.shape[0]

    @property
    def background(self):
        """Indices of the candidates matched to no object."""
        return np.flatnonzero(self.matched < 0)

    @property
    def members(self):
        """Indices of all candidates matched to an object."""
        return np.flatnonzero(self.matched >= 0)


def match_candidates(priors, gt_boxes, cfg):
    """Group the priors by the object they match.

    Every object ends up with at least ``cfg.min_candidates`` core
    positives: when the matcher gives it fewer, its remaining priors of
    highest IoU (ignored members and negatives alike, IoU > 0 only) are
    promoted to :data:`ORIGIN_CORE`. An object whose matched
    priors all fall in the ignored band therefore does not keep them all
    ignored: its best one becomes a core positive, so the fixed rule
    trains on it and :func:`ignored_weights` gives it weight 1.

    :param numpy.ndarray priors: prior boxes, shape (N, 4)
    :param numpy.ndarray gt_boxes: object boxes, shape (K, 4)
    :param AssignmentConfig cfg: the assignment parameters
    :returns: the candidate groups ``J^k`` and the background set
    :rtype: Grouping
    """
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    num_priors = priors.shape[0]
    if gt_boxes.shape[0] == 0:
        return Grouping(np.full(num_priors, -1),
                        np.full(num_priors, ORIGIN_NEGATIVE), 0)
    matched, origin = get_matcher(cfg).match(priors, gt_boxes)
    matched = matched.copy()
    origin = origin.copy()

    # Low-quality matches: promote the best remaining priors of objects
    # that lack core positives. Core positives are never reassigned.
    ious = pairwise_iou(priors, gt_boxes)
    for k in range(gt_boxes.shape[0]):
        missing = cfg.min_candidates - np.count_nonzero(
            (matched == k) & (origin == ORIGIN_CORE))
        if missing <= 0:
            continue
        available = np.flatnonzero(
            ((matched == k) & (origin == ORIGIN_IGNORED))
            | (origin == ORIGIN_NEGATIVE))
        available = available[ious[available, k] > 0]
        order = np.lexsort((available, -ious[available, k]))
        promoted = available[order[:missing]]
        matched[promoted] = k
        origin[promoted] = ORIGIN_CORE
        logger.debug("object %d: promoted %d low-quality match(es)",
                     k, promoted.size)
    return Grouping(matched, origin, gt_boxes.shape[0])


class AssignmentResult:
    """Labeled candidate sets of one image.

    Index sets are sorted arrays of candidate ids:

    ``pos_cls``, ``neg_cls``
        positives and negatives of the classification task among the
        candidate positives
    ``pos_loc``
        positives of the localization task
    ``background``
        candidates matched to no object (classification negatives)
    ``excluded``
        candidate positives left out of training (the ignored priors of
        the fixed baseline rule)

    Per-candidate arrays: ``w_cls``, ``w_loc`` (loss weights), ``matched``
    and ``origin`` (from the grouping), ``iou`` and ``score`` (IoU of the
    regressed box with the matched object and confidence of its class,
    NaN for background). Per-object arrays: ``tau_cls``, ``tau_loc`` (Otsu
    thresholds of the confidences and IoUs, NaN when not computed).
    """
    def __init__(self, grouping, pos_cls, neg_cls, pos_loc, excluded,
                 iou, score, tau_cls, tau_loc, rescued=0):
        n = grouping.num_candidates
        self.matched = grouping.matched
        self.origin = grouping.origin
        self.num_objects = grouping.num_objects
        self.pos_cls = np.sort(np.asarray(pos_cls, dtype=np.int64))
        self.neg_cls = np.sort(np.asarray(neg_cls, dtype=np.int64))
        self.pos_loc = np.sort(np.asarray(pos_loc, dtype=np.int64))
        self.excluded = np.sort(np.asarray(excluded, dtype=np.int64))
        self.background = grouping.background
        self.iou = iou
        self.score = score
        self.tau_cls = tau_cls
        self.tau_loc = tau_loc
        self.w_cls = np.ones(n)
        self.w_loc = np.ones(n)
        self.rescued = rescued

    @property
    def num_candidates(self):
        return self.matched.shape[0]

    @property
    def cls_set(self):
        """Candidates entering the classification loss."""
        return np.union1d(np.union1d(self.pos_cls, self.neg_cls),
                          self.background)

    @property
    def iur_set(self):
        """Candidates entering the IoU prediction loss."""
        return np.union1d(self.pos_cls, self.pos_loc)

    def cls_targets(self, gt_labels):
        """Target class of every candidate, -1 for an all-negative target.

        :param numpy.ndarray gt_labels: class index of every object
        """
        targets = np.full(self.num_candidates, -1, dtype=np.int64)
        targets[self.pos_cls] = np.asarray(gt_labels)[
            self.matched[self.pos_cls]]
        return targets

    def check_invariants(self):
        """Verify the partition invariants of the labeled sets.

        :raises AssignmentError: if an invariant is violated
        """
        members = np.flatnonzero(self.matched >= 0)
        if np.intersect1d(self.pos_cls, self.neg_cls).size:
            raise AssignmentError("pos_cls and neg_cls overlap")
        labeled = np.union1d(np.union1d(self.pos_cls, self.neg_cls),
                             self.excluded)
        if not np.array_equal(labeled, members):
            raise AssignmentError("pos_cls, neg_cls and excluded do not "
                                  "cover exactly the matched candidates")
        if (np.intersect1d(self.excluded,
                           np.union1d(self.pos_cls, self.neg_cls)).size):
            raise AssignmentError("excluded candidates are also labeled")
        if not np.all(np.isin(self.pos_loc, members)):
            raise AssignmentError("pos_loc contains unmatched candidates")
        if np.intersect1d(self.background, members).size:
            raise AssignmentError("background overlaps the matched "
                                  "candidates")
        for k in np.unique(self.matched[members]):
            if not np.any(self.matched[self.pos_cls] == k):
                raise AssignmentError(f"object {k} has no classification "
                                      "positive")
            if not np.any(self.matched[self.pos_loc] == k):
                raise AssignmentError(f"object {k} has no localization "
                                      "positive")
        core = self.origin == ORIGIN_CORE
        if np.any(self.w_cls[core] != 1) or np.any(self.w_loc[core] != 1):
            raise AssignmentError("core positives must have unit weights")


def _matched_qualities(grouping, class_scores, boxes, gt_boxes, gt_labels):
    n = grouping.num_candidates
    class_scores = np.asarray(class_scores, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    if class_scores.ndim != 2 or class_scores.shape[0] != n:
        raise AssignmentError(f"expected class scores for {n} candidates, "
                              f"got shape {class_scores.shape}")
    if boxes.shape != (n, 4):
        raise AssignmentError(f"expected boxes for {n} candidates, got "
                              f"shape {boxes.shape}")
    members = grouping.members
    rows_ok = (np.all(np.isfinite(class_scores[members]), axis=1)
               & np.all(np.isfinite(boxes[members]), axis=1))
    if not np.all(rows_ok):
        j = members[np.argmin(rows_ok)]
        raise AssignmentError(f"candidate {j} is matched to object "
                              f"{grouping.matched[j]} but has no valid "
                              "scores or box")
    targets = grouping.matched[members]
    if np.any(gt_labels[targets] >= class_scores.shape[1]):
        raise AssignmentError("object label out of the range of the class "
                              "scores")
    score = np.full(n, np.nan)
    iou = np.full(n, np.nan)
    score[members] = class_scores[members, gt_labels[targets]]
    iou[members] = aligned_iou(boxes[members], gt_boxes[targets])
    return score, iou


def fixed_label(grouping, class_scores, boxes, gt_boxes, gt_labels):
    """Label candidates with the fixed baseline rule.

    Core positives are positive for both tasks, ignored priors are left
    out of training, background priors are classification negatives. All
    weights are 1.

    :rtype: AssignmentResult
    """
    score, iou = _matched_qualities(grouping, class_scores, boxes,
                                    gt_boxes, gt_labels)
    core = np.flatnonzero(grouping.origin == ORIGIN_CORE)
    ignored = np.flatnonzero(grouping.origin == ORIGIN_IGNORED)
    nan = np.full(grouping.num_objects, np.nan)
    return AssignmentResult(grouping, core, [], core, ignored, iou, score,
                            nan, nan.copy())


def _forced_positive(primary, secondary):
    # Highest primary quality, then highest secondary, then lowest id
    # (members are sorted by id)
    order = np.lexsort((np.arange(primary.size), -secondary, -primary))
    return order[0]


def mutual_label(grouping, class_scores, boxes, gt_boxes, gt_labels,
                 cfg=None):
    """Label candidates by mutual labeling.

    For every object *k* with candidate group ``J^k``, with ``S`` the
    confidences of the object's class and ``I`` the IoUs of the regressed
    boxes with the object:

    - classification positives are the members with ``I > Otsu(I)``, the
      other members are classification negatives;
    - localization positives are the members with ``S > Otsu(S)``.

    When a split leaves no positive (all values equal), the member with
    the best quality is forced positive: highest ``I`` (resp. ``S``), then
    highest ``S`` (resp. ``I``), then lowest candidate id. Loss weights are
    filled by :func:`ignored_weights`.

    :param Grouping grouping: output of :func:`match_candidates`
    :param numpy.ndarray class_scores: current per-class confidences,
        shape (N, C)
    :param numpy.ndarray boxes: current regressed boxes, shape (N, 4)
    :param numpy.ndarray gt_boxes: object boxes, shape (K, 4)
    :param numpy.ndarray gt_labels: object classes, shape (K,)
    :param AssignmentConfig cfg: assignment parameters (for ``alpha``)
    :rtype: AssignmentResult
    :raises AssignmentError: if a matched candidate has no valid scores
    """
    if cfg is None:
        cfg = AssignmentConfig()
    score, iou = _matched_qualities(grouping, class_scores, boxes,
                                    gt_boxes, gt_labels)
    tau_cls = np.full(grouping.num_objects, np.nan)
    tau_loc = np.full(grouping.num_objects, np.nan)
    pos_cls, neg_cls, pos_loc = [], [], []
    rescued = 0
    for k, members in enumerate(grouping.groups):
        if members.size == 0:
            continue
        s = score[members]
        i = iou[members]
        tau_loc[k] = otsu_threshold(i)
        tau_cls[k] = otsu_threshold(s)

        above, below = split(i, tau_loc[k])
        if above.size == 0:
            forced = _forced_positive(i, s)
            above = np.array([forced])
            below = below[below != forced]
            rescued += 1
        pos_cls.append(members[above])
        neg_cls.append(members[below])

        above, _ = split(s, tau_cls[k])
        if above.size == 0:
            above = np.array([_forced_positive(s, i)])
            rescued += 1
        pos_loc.append(members[above])

    def concat(parts):
        return np.concatenate(parts) if parts else np.empty(0, np.int64)

    result = AssignmentResult(grouping, concat(pos_cls), concat(neg_cls),
                              concat(pos_loc), [], iou, score,
                              tau_cls, tau_loc, rescued=rescued)
    return ignored_weights(result, grouping, cfg)


def ignored_weights(result, grouping, cfg):
    """Fill the loss weights of the originally ignored candidates.

    For an ignored candidate *j* of object *k*:
    ``w_cls = |I_j - tau_loc[k]| ** alpha`` and
    ``w_loc = |S_j - tau_cls[k]| ** alpha``, with ``0 ** 0 = 1``. Every
    other candidate gets a weight of 1.

    :param AssignmentResult result: output of :func:`mutual_label`, whose
        weights are updated in place
    :param Grouping grouping: the grouping the result was computed from
    :param AssignmentConfig cfg: assignment parameters (for ``alpha``)
    :returns: ``result``
    :rtype: AssignmentResult
    """
    n = grouping.num_candidates
    w_cls = np.ones(n)
    w_loc = np.ones(n)
    ignored = np.flatnonzero(grouping.origin == ORIGIN_IGNORED)
    if ignored.size:
        k = grouping.matched[ignored]
        w_cls[ignored] = np.power(
            np.abs(result.iou[ignored] - result.tau_loc[k]), cfg.alpha)
        w_loc[ignored] = np.power(
            np.abs(result.score[ignored] - result.tau_cls[k]), cfg.alpha)
    result.w_cls = w_cls
    result.w_loc = w_loc
    return result
