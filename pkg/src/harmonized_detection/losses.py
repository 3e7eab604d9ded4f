# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Training losses of the detector head, with analytic gradients.

Every term is a weighted mean over a set of candidates and returns its
value together with the gradient with respect to the head outputs
(class scores, box deltas or IoU predictions). :func:`mlc_total`
combines the terms according to an
:class:`~harmonized_detection.assignment.AssignmentResult` and
back-propagates them to the head parameters.
"""

import numpy as np

from harmonized_detection import model
from harmonized_detection.geometry import decode, encode

__all__ = [
    "EPSILON",
    "LOC_LOSSES",
    "EmptySampleSetError",
    "LossConfig",
    "LossBreakdown",
    "cls_loss",
    "loc_loss",
    "iur_loss",
    "align_loss",
    "mlc_total",
]


EPSILON = 1e-7
"""Confidences are clamped to [EPSILON, 1 - EPSILON] in cross-entropy."""

LOC_LOSSES = ("smooth-l1", "iou-loss")


class EmptySampleSetError(ValueError):
    """Raised when a loss term is requested over an empty set.

    :ivar str term: name of the failing loss term
    """
    def __init__(self, term):
        super().__init__(f"the {term} loss is computed over an empty set "
                         "of samples")
        self.term = term


class LossConfig:
    """Parameters of the loss.

    :param float gamma: weight of the IoU prediction loss
    :param str loc_loss: ``"smooth-l1"`` (on encoded deltas) or
        ``"iou-loss"`` (``1 - IoU``)
    :param float beta: transition point of the smooth-L1 loss
    :param float align_weight: weight of the prediction-alignment loss
        (only used when alignment is enabled)
    """
    def __init__(self, gamma=1.0, loc_loss="smooth-l1", beta=1.0,
                 align_weight=1.0):
        if not gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {gamma}")
        if loc_loss not in LOC_LOSSES:
            raise ValueError(f"invalid loc_loss {loc_loss!r} (must be one "
                             f"of {LOC_LOSSES})")
        if not beta > 0:
            raise ValueError(f"beta must be > 0, got {beta}")
        if not align_weight >= 0:
            raise ValueError(f"align_weight must be >= 0, got "
                             f"{align_weight}")
        self.gamma = float(gamma)
        self.loc_loss = loc_loss
        self.beta = float(beta)
        self.align_weight = float(align_weight)

    def to_dict(self):
        return {
            "gamma": self.gamma,
            "loc_loss": self.loc_loss,
            "beta": self.beta,
            "align_weight": self.align_weight,
        }


def _check_subset(subset, term):
    subset = np.asarray(subset, dtype=np.int64).ravel()
    if subset.size == 0:
        raise EmptySampleSetError(term)
    return subset


def cls_loss(class_scores, subset, targets, weights, eps=EPSILON):
    """Weighted binary cross-entropy of the class scores.

    The per-sample loss sums the cross-entropy of every class, with a
    positive target on the sample's target class only.

    :param numpy.ndarray class_scores: confidences, shape (N, C)
    :param subset: indices of the samples entering the loss
    :param numpy.ndarray targets: target class of every sample, -1 for an
        all-negative target, shape (N,)
    :param numpy.ndarray weights: loss weight of every sample, shape (N,)
    :returns: ``(value, grad)`` with ``grad`` of shape (N, C)
    :raises EmptySampleSetError: if ``subset`` is empty
    """
    subset = _check_subset(subset, "classification")
    scores = np.asarray(class_scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    c = scores[subset]
    y = np.zeros_like(c)
    t = targets[subset]
    pos = np.flatnonzero(t >= 0)
    y[pos, t[pos]] = 1.0
    cc = np.clip(c, eps, 1.0 - eps)
    per_sample = -np.sum(y * np.log(cc) + (1.0 - y) * np.log(1.0 - cc),
                         axis=1)
    w = weights[subset]
    value = float(np.sum(w * per_sample) / subset.size)
    # The clamp has a zero derivative outside [eps, 1 - eps]
    inside = (c > eps) & (c < 1.0 - eps)
    dl_dc = np.where(inside, -y / cc + (1.0 - y) / (1.0 - cc), 0.0)
    grad = np.zeros_like(scores)
    np.add.at(grad, subset, w[:, np.newaxis] * dl_dc / subset.size)
    return value, grad


def _smooth_l1(residual, beta):
    absr = np.abs(residual)
    small = absr < beta
    value = np.where(small, 0.5 * residual ** 2 / beta, absr - 0.5 * beta)
    grad = np.where(small, residual / beta, np.sign(residual))
    return value, grad


def _iou_loss(priors, deltas, targets):
    """1 - IoU of decoded boxes and its gradient w.r.t. the deltas."""
    boxes = decode(priors, deltas)
    x1, y1, x2, y2 = (boxes[:, i] for i in range(4))
    gx1, gy1, gx2, gy2 = (targets[:, i] for i in range(4))
    iw_raw = np.minimum(x2, gx2) - np.maximum(x1, gx1)
    ih_raw = np.minimum(y2, gy2) - np.maximum(y1, gy1)
    iw = np.clip(iw_raw, 0.0, None)
    ih = np.clip(ih_raw, 0.0, None)
    inter = iw * ih
    w = x2 - x1
    h = y2 - y1
    union = w * h + (gx2 - gx1) * (gy2 - gy1) - inter
    overlap = inter / union

    ox = (iw_raw > 0).astype(np.float64)
    oy = (ih_raw > 0).astype(np.float64)
    d_inter = np.stack([
        -ih * ox * (x1 > gx1),
        -iw * oy * (y1 > gy1),
        ih * ox * (x2 < gx2),
        iw * oy * (y2 < gy2),
    ], axis=1)
    d_area = np.stack([-h, -w, h, w], axis=1)
    d_iou = ((d_inter * (union + inter)[:, np.newaxis]
              - inter[:, np.newaxis] * d_area)
             / (union ** 2)[:, np.newaxis])
    g = -d_iou  # gradient of 1 - IoU w.r.t. (x1, y1, x2, y2)

    pw = priors[:, 2] - priors[:, 0]
    ph = priors[:, 3] - priors[:, 1]
    grad = np.stack([
        pw * (g[:, 0] + g[:, 2]),
        ph * (g[:, 1] + g[:, 3]),
        0.5 * w * (g[:, 2] - g[:, 0]),
        0.5 * h * (g[:, 3] - g[:, 1]),
    ], axis=1)
    return 1.0 - overlap, grad


def loc_loss(deltas, priors, subset, target_boxes, weights, cfg=None):
    """Weighted localization loss.

    :param numpy.ndarray deltas: predicted deltas, shape (N, 4)
    :param numpy.ndarray priors: prior boxes, shape (N, 4)
    :param subset: indices of the samples entering the loss
    :param numpy.ndarray target_boxes: target box of every sample, shape
        (N, 4) (only rows in ``subset`` are read)
    :param numpy.ndarray weights: loss weight of every sample, shape (N,)
    :param LossConfig cfg: selects smooth-L1 on encoded deltas or the
        IoU loss
    :returns: ``(value, grad)`` with ``grad`` of shape (N, 4)
    :raises EmptySampleSetError: if ``subset`` is empty
    """
    if cfg is None:
        cfg = LossConfig()
    subset = _check_subset(subset, "localization")
    deltas = np.asarray(deltas, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)[subset]
    targets = np.asarray(target_boxes, dtype=np.float64)[subset]
    weights = np.asarray(weights, dtype=np.float64)[subset]
    d = deltas[subset]
    if cfg.loc_loss == "smooth-l1":
        values, grads = _smooth_l1(d - encode(priors, targets), cfg.beta)
        per_sample = values.sum(axis=1)
    else:
        per_sample, grads = _iou_loss(priors, d, targets)
    value = float(np.sum(weights * per_sample) / subset.size)
    grad = np.zeros_like(deltas)
    np.add.at(grad, subset, weights[:, np.newaxis] * grads / subset.size)
    return value, grad


def iur_loss(iou_pred, subset, iou_targets):
    """Mean squared error of the IoU predictions.

    The targets are constants: no gradient flows into the regressed boxes
    through them.

    :param numpy.ndarray iou_pred: predicted IoUs, shape (N,)
    :param subset: indices of the samples entering the loss
    :param numpy.ndarray iou_targets: IoU of every sample's box with its
        object, shape (N,)
    :returns: ``(value, grad)`` with ``grad`` of shape (N,)
    :raises EmptySampleSetError: if ``subset`` is empty
    """
    subset = _check_subset(subset, "IoU prediction")
    iou_pred = np.asarray(iou_pred, dtype=np.float64)
    residual = iou_pred[subset] - np.asarray(iou_targets)[subset]
    value = float(np.mean(residual ** 2))
    grad = np.zeros_like(iou_pred)
    np.add.at(grad, subset, 2.0 * residual / subset.size)
    return value, grad


def align_loss(class_scores, subset, targets, iou_targets):
    """Mean squared error aligning target-class confidences with IoUs.

    :param numpy.ndarray class_scores: confidences, shape (N, C)
    :param subset: indices of the samples entering the loss, all with a
        target class
    :param numpy.ndarray targets: target class of every sample, shape (N,)
    :param numpy.ndarray iou_targets: IoU of every sample's box with its
        object (constant), shape (N,)
    :returns: ``(value, grad)`` with ``grad`` of shape (N, C)
    :raises EmptySampleSetError: if ``subset`` is empty
    """
    subset = _check_subset(subset, "prediction alignment")
    scores = np.asarray(class_scores, dtype=np.float64)
    labels = np.asarray(targets)[subset]
    residual = scores[subset, labels] - np.asarray(iou_targets)[subset]
    value = float(np.mean(residual ** 2))
    grad = np.zeros_like(scores)
    np.add.at(grad, (subset, labels), 2.0 * residual / subset.size)
    return value, grad


class LossBreakdown:
    """Values of the loss terms and gradients of their weighted sum.

    ``total = l_cls + l_loc + gamma * l_iur + align_weight * l_align``.
    ``grad_scores``, ``grad_deltas`` and ``grad_iou_pred`` hold the
    per-candidate gradients of ``total`` with respect to the head outputs,
    ``grads`` the gradient with respect to the head parameters.
    """
    def __init__(self, l_cls, l_loc, l_iur, l_align, total, grad_scores,
                 grad_deltas, grad_iou_pred, grads):
        self.l_cls = l_cls
        self.l_loc = l_loc
        self.l_iur = l_iur
        self.l_align = l_align
        self.total = total
        self.grad_scores = grad_scores
        self.grad_deltas = grad_deltas
        self.grad_iou_pred = grad_iou_pred
        self.grads = grads

    def to_dict(self):
        return {
            "cls": self.l_cls,
            "loc": self.l_loc,
            "iur": self.l_iur,
            "align": self.l_align,
            "total": self.total,
        }


def mlc_total(params, output, assignment, gt_boxes, gt_labels, cfg=None,
              align=False):
    """Total loss of one image and its gradient.

    ``L = L_cls(pos_cls ∪ neg_cls ∪ background) + L_loc(pos_loc)
    + gamma * L_iur(pos_cls ∪ pos_loc)``, plus
    ``align_weight * L_align(pos_cls)`` when ``align`` is set.

    :param HeadParams params: parameters used to compute ``output``
    :param HeadOutput output: head outputs for the image's candidates
    :param AssignmentResult assignment: labeled candidate sets
    :param numpy.ndarray gt_boxes: object boxes, shape (K, 4)
    :param numpy.ndarray gt_labels: object classes, shape (K,)
    :param LossConfig cfg: loss parameters
    :param bool align: add the prediction-alignment term
    :rtype: LossBreakdown
    :raises EmptySampleSetError: if a term has no samples (its ``term``
        attribute names it)
    """
    if cfg is None:
        cfg = LossConfig()
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    targets = assignment.cls_targets(gt_labels)
    target_boxes = np.zeros((assignment.num_candidates, 4))
    matched = assignment.matched >= 0
    target_boxes[matched] = gt_boxes[assignment.matched[matched]]

    l_cls, g_scores = cls_loss(output.class_scores, assignment.cls_set,
                               targets, assignment.w_cls)
    l_loc, g_deltas = loc_loss(output.deltas, output.priors,
                               assignment.pos_loc, target_boxes,
                               assignment.w_loc, cfg)
    l_iur, g_iou = iur_loss(output.iou_pred, assignment.iur_set,
                            assignment.iou)
    total = l_cls + l_loc + cfg.gamma * l_iur
    g_iou = cfg.gamma * g_iou
    l_align = 0.0
    if align:
        l_align, g_align = align_loss(output.class_scores,
                                      assignment.pos_cls, targets,
                                      assignment.iou)
        total += cfg.align_weight * l_align
        g_scores = g_scores + cfg.align_weight * g_align
    grads = model.backward(params, output, g_scores, g_deltas, g_iou)
    return LossBreakdown(l_cls, l_loc, l_iur, l_align, total, g_scores,
                         g_deltas, g_iou, grads)
