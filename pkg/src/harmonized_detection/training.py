# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Training and inference of the detector head on synthetic scenes.

Training runs plain SGD, one scene per step, over a fixed set of training
scenes shuffled at every epoch. Up to ``mlc_enable_epoch`` the labels come
from the fixed baseline rule; afterwards ``baseline_mode`` selects the
labeling:

``fixed-threshold``
    keep the fixed rule (the control run);
``mutual-labeling``
    label each task by Otsu-thresholding the other task's quality;
``prediction-alignment``
    keep the fixed rule and add a loss aligning the confidence of the
    ground-truth class with the IoU of the regressed box.
"""

import logging

import numpy as np
from tqdm import tqdm

from harmonized_detection import assignment as assignment_module
from harmonized_detection import losses as losses_module
from harmonized_detection import model
from harmonized_detection.evaluation import (
    EvalConfig,
    GroundTruth,
    evaluate_detections,
)
from harmonized_detection.geometry import aligned_iou
from harmonized_detection.postprocess import (
    DIVERGENCE_POPULATION,
    Detections,
    DivergenceError,
    NmsConfig,
    batched_nms,
    divergence_metric,
    per_object_divergence,
)
from harmonized_detection.scene import generate_scenes
from harmonized_detection.utils import (
    STREAM_IOU_NOISE,
    STREAM_SHUFFLE,
    STREAM_TRAIN_SCENES,
    STREAM_VAL_SCENES,
    make_rng,
)

__all__ = [
    "BASELINE_MODES",
    "NumericalError",
    "TrainConfig",
    "add_argparse_options",
    "learning_rate",
    "phase_mode",
    "train",
    "detect",
    "propose",
    "divergence_summary",
    "evaluate_model",
]


logger = logging.getLogger(__name__)

BASELINE_MODES = ("fixed-threshold", "mutual-labeling",
                  "prediction-alignment")


class NumericalError(ArithmeticError):
    """Raised when the loss becomes non-finite during training.

    :ivar int epoch: 1-based epoch of the failure
    :ivar int step: 1-based step within the epoch
    """
    def __init__(self, message, epoch, step):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step


class TrainConfig:
    """Parameters of the training loop.

    :param int epochs: number of epochs
    :param int scenes_per_epoch: number of training scenes
    :param int val_scenes: number of validation scenes
    :param float lr: initial learning rate
    :param lr_drop_epochs: the learning rate is multiplied by
        ``lr_drop_factor`` after each of these epochs
    :param float lr_drop_factor: learning rate decay factor
    :param int mlc_enable_epoch: last epoch trained with the fixed rule
    :param str baseline_mode: labeling after ``mlc_enable_epoch``, one of
        :data:`BASELINE_MODES`
    :param bool iur: train the IoU prediction branch
    :param int eval_interval: evaluate on the validation scenes every that
        many epochs (0: after the last epoch only)
    :param AssignmentConfig assignment: assignment parameters
    :param LossConfig losses: loss parameters
    :raises ValueError: if a parameter is out of range
    """
    def __init__(self, epochs=24, scenes_per_epoch=200, val_scenes=50,
                 lr=0.2, lr_drop_epochs=(20, 23), lr_drop_factor=0.1,
                 mlc_enable_epoch=12, baseline_mode="mutual-labeling",
                 iur=True, eval_interval=1, assignment=None, losses=None):
        if int(epochs) != epochs or epochs < 1:
            raise ValueError("epochs must be a positive integer")
        if scenes_per_epoch < 1 or val_scenes < 1:
            raise ValueError("scenes_per_epoch and val_scenes must be "
                             "positive")
        if not lr > 0:
            raise ValueError("lr must be positive")
        if any(int(e) != e or e < 1 for e in lr_drop_epochs):
            raise ValueError("lr_drop_epochs must be positive integers")
        if not 0 < lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor must be in (0, 1]")
        if not 0 <= mlc_enable_epoch <= epochs:
            raise ValueError("mlc_enable_epoch must satisfy 0 <= "
                             "mlc_enable_epoch <= epochs")
        if baseline_mode not in BASELINE_MODES:
            raise ValueError(f"invalid baseline_mode {baseline_mode!r} "
                             f"(must be one of {BASELINE_MODES})")
        if eval_interval < 0:
            raise ValueError("eval_interval must be >= 0")
        self.epochs = int(epochs)
        self.scenes_per_epoch = int(scenes_per_epoch)
        self.val_scenes = int(val_scenes)
        self.lr = float(lr)
        self.lr_drop_epochs = tuple(sorted(int(e) for e in lr_drop_epochs))
        self.lr_drop_factor = float(lr_drop_factor)
        self.mlc_enable_epoch = int(mlc_enable_epoch)
        self.baseline_mode = baseline_mode
        self.iur = bool(iur)
        self.eval_interval = int(eval_interval)
        if assignment is None:
            assignment = assignment_module.AssignmentConfig()
        if losses is None:
            losses = losses_module.LossConfig()
        self.assignment = assignment
        self.losses = losses

    def replace(self, **changes):
        """Copy of this configuration with some parameters changed."""
        kwargs = self.to_dict()
        kwargs["assignment"] = self.assignment
        kwargs["losses"] = self.losses
        kwargs.update(changes)
        return TrainConfig(**kwargs)

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "scenes_per_epoch": self.scenes_per_epoch,
            "val_scenes": self.val_scenes,
            "lr": self.lr,
            "lr_drop_epochs": list(self.lr_drop_epochs),
            "lr_drop_factor": self.lr_drop_factor,
            "mlc_enable_epoch": self.mlc_enable_epoch,
            "baseline_mode": self.baseline_mode,
            "iur": self.iur,
            "eval_interval": self.eval_interval,
        }


def add_argparse_options(parser):
    """Add command-line options for the training loop.

    :param argparse.ArgumentParser parser: an argument parser
    """
    group = parser.add_argument_group("Options for training")
    group.add_argument("--epochs", type=int, default=None,
                       help="number of training epochs [default: 24]")
    group.add_argument("--mlc-enable-epoch", type=int, default=None,
                       help="last epoch trained with the fixed labeling "
                       "rule [default: 12]")
    group.add_argument("--baseline-mode", default=None,
                       choices=BASELINE_MODES,
                       help="labeling rule used after --mlc-enable-epoch "
                       "[default: mutual-labeling]")
    group.add_argument("--iur", dest="iur", action="store_true",
                       default=None,
                       help="train the IoU prediction branch [default]")
    group.add_argument("--no-iur", dest="iur", action="store_false",
                       help="do not train the IoU prediction branch")


def learning_rate(cfg, epoch):
    """Learning rate of a 1-based epoch."""
    drops = sum(1 for e in cfg.lr_drop_epochs if epoch > e)
    return cfg.lr * cfg.lr_drop_factor ** drops


def phase_mode(cfg, epoch):
    """Labeling mode of a 1-based epoch."""
    if epoch <= cfg.mlc_enable_epoch:
        return "fixed-threshold"
    return cfg.baseline_mode


class _StepStats:
    def __init__(self):
        self.sums = {"cls": 0.0, "loc": 0.0, "iur": 0.0, "align": 0.0,
                     "total": 0.0}
        self.count = 0
        self.rescued = 0

    def add(self, breakdown, rescued):
        for key, value in breakdown.to_dict().items():
            self.sums[key] += value
        self.count += 1
        self.rescued += rescued

    def means(self):
        return {key: value / self.count for key, value in self.sums.items()}


def _train_step(params, scene, grouping, mode, cfg, epoch, step):
    output = model.forward(params, scene.features, scene.priors)
    if not (np.all(np.isfinite(output.class_scores))
            and np.all(np.isfinite(output.boxes))
            and np.all(np.isfinite(output.iou_pred))):
        raise NumericalError("the head outputs are not finite", epoch, step)
    if mode == "mutual-labeling":
        result = assignment_module.mutual_label(
            grouping, output.class_scores, output.boxes, scene.gt_boxes,
            scene.gt_labels, cfg.assignment)
    else:
        result = assignment_module.fixed_label(
            grouping, output.class_scores, output.boxes, scene.gt_boxes,
            scene.gt_labels)
    result.check_invariants()
    loss_cfg = cfg.losses
    if not cfg.iur:
        loss_cfg = losses_module.LossConfig(**{**loss_cfg.to_dict(),
                                               "gamma": 0.0})
    breakdown = losses_module.mlc_total(
        params, output, result, scene.gt_boxes, scene.gt_labels, loss_cfg,
        align=(mode == "prediction-alignment"))
    if not (np.isfinite(breakdown.total)
            and np.all(np.isfinite(breakdown.grads.flatten()))):
        raise NumericalError("the training loss is not finite", epoch, step)
    return breakdown, result


def train(scene_cfg, train_cfg, nms_cfg=None, eval_cfg=None, seed=None,
          progress=False, train_scenes=None, val_scenes=None,
          initial_params=None):
    """Train a detector head.

    :param SceneConfig scene_cfg: scene parameters (``seed`` is used unless
        ``seed`` is given)
    :param TrainConfig train_cfg: training parameters
    :param NmsConfig nms_cfg: suppression used for validation
    :param EvalConfig eval_cfg: evaluation parameters for validation
    :param int seed: seed of the scene and shuffle streams
    :param bool progress: show a progress bar on stderr
    :param list train_scenes: pre-generated training scenes
    :param list val_scenes: pre-generated validation scenes
    :param HeadParams initial_params: starting point (zero-initialized
        parameters by default)
    :returns: ``(params, log)``, ``log`` being a list of one dict per epoch
    :rtype: tuple
    :raises NumericalError: if the loss becomes non-finite
    """
    if nms_cfg is None:
        nms_cfg = NmsConfig()
    if eval_cfg is None:
        eval_cfg = EvalConfig()
    if seed is None:
        seed = scene_cfg.seed if scene_cfg.seed is not None else 0
    if train_scenes is None:
        train_scenes = generate_scenes(scene_cfg, seed,
                                       train_cfg.scenes_per_epoch,
                                       STREAM_TRAIN_SCENES)
    if val_scenes is None:
        val_scenes = generate_scenes(scene_cfg, seed, train_cfg.val_scenes,
                                     STREAM_VAL_SCENES,
                                     first_image_id=len(train_scenes))
    groupings = [assignment_module.match_candidates(
        s.priors, s.gt_boxes, train_cfg.assignment) for s in train_scenes]
    if initial_params is None:
        params = model.HeadParams.zeros(scene_cfg.num_classes,
                                        scene_cfg.feature_dim)
    else:
        params = initial_params.copy()
        if (params.num_classes, params.feature_dim) != (
                scene_cfg.num_classes, scene_cfg.feature_dim):
            raise ValueError("the initial parameters do not match the "
                             "number of classes and the feature dimension")
    log = []
    for epoch in tqdm(range(1, train_cfg.epochs + 1), desc="training",
                      unit="epoch", leave=False, disable=not progress):
        lr = learning_rate(train_cfg, epoch)
        mode = phase_mode(train_cfg, epoch)
        order = make_rng(seed, STREAM_SHUFFLE, epoch).permutation(
            len(train_scenes))
        stats = _StepStats()
        for step, index in enumerate(order, start=1):
            breakdown, result = _train_step(params, train_scenes[index],
                                            groupings[index], mode,
                                            train_cfg, epoch, step)
            params = model.sgd_step(params, breakdown.grads, lr)
            stats.add(breakdown, result.rescued)
        record = {
            "epoch": epoch,
            "lr": lr,
            "mode": mode,
            "loss": stats.means(),
            "rescued": stats.rescued,
        }
        last = epoch == train_cfg.epochs
        if last or (train_cfg.eval_interval
                    and epoch % train_cfg.eval_interval == 0):
            report = evaluate_model(params, val_scenes, scene_cfg,
                                    train_cfg.assignment, nms_cfg, eval_cfg)
            record["val"] = {
                "ap": report.ap,
                "ap50": report.ap50,
                "ap75": report.ap75,
                "divergence": (report.divergence or {}).get("pooled"),
            }
        logger.info("epoch %d/%d (%s, lr=%g): loss %.4f%s", epoch,
                    train_cfg.epochs, mode, lr, record["loss"]["total"],
                    f", val AP {record['val']['ap']:.4f}"
                    if record.get("val", {}).get("ap") is not None else "")
        log.append(record)
    return params, log


def _candidates(params, scene, scene_cfg):
    output = model.forward(params, scene.features, scene.priors)
    boxes = np.array(output.boxes)
    width, height = scene_cfg.image_size
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, width)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, height)
    return output, boxes


def detect(params, scene, scene_cfg, nms_cfg=None, iou_noise=0.0, rng=None,
           suppress=True):
    """Detections of the head on one scene.

    Every (prior, class) pair with a confidence of at least
    ``nms_cfg.score_threshold`` is a candidate, with id
    ``prior * num_classes + class``. Boxes are clipped to the image.

    :param float iou_noise: standard deviation of Gaussian noise added to
        the IoU predictions (clipped to [0, 1]), requires ``rng``
    :param bool suppress: run
        :func:`~harmonized_detection.postprocess.batched_nms`
        on the candidates
    :rtype: Detections
    """
    if nms_cfg is None:
        nms_cfg = NmsConfig()
    output, boxes = _candidates(params, scene, scene_cfg)
    iou_pred = output.iou_pred
    if iou_noise > 0:
        iou_pred = np.clip(
            iou_pred + rng.normal(0.0, iou_noise, size=iou_pred.shape),
            0.0, 1.0)
    num_classes = output.class_scores.shape[1]
    prior_idx, labels = np.nonzero(output.class_scores
                                   >= nms_cfg.score_threshold)
    dets = Detections(boxes[prior_idx], labels,
                      output.class_scores[prior_idx, labels],
                      iou_pred[prior_idx],
                      np.full(prior_idx.size, scene.image_id),
                      prior_idx * num_classes + labels)
    if suppress:
        dets = batched_nms(dets, nms_cfg)
    return dets


def propose(params, scene, scene_cfg, nms_cfg=None, use_iou=False):
    """Class-agnostic proposals of the head on one scene.

    The objectness of a prior is its highest class confidence, multiplied
    by its predicted IoU if ``use_iou`` is set. Proposals are suppressed
    with standard NMS on the objectness; all priors are candidates.

    :rtype: Detections
    """
    if nms_cfg is None:
        nms_cfg = NmsConfig()
    output, boxes = _candidates(params, scene, scene_cfg)
    objectness = output.class_scores.max(axis=1)
    if use_iou:
        objectness = objectness * output.iou_pred
    n = boxes.shape[0]
    dets = Detections(boxes, np.zeros(n, np.int64), objectness,
                      output.iou_pred, np.full(n, scene.image_id))
    agnostic = NmsConfig(iou_threshold=nms_cfg.iou_threshold,
                         mode="standard", max_out=nms_cfg.max_out,
                         score_threshold=0.0)
    return batched_nms(dets, agnostic)


def divergence_summary(confidences, ious, object_keys, population):
    """Pooled and per-object divergence metrics as a report dict."""
    summary = {
        "population": population,
        "num_pairs": int(np.size(confidences)),
    }
    try:
        rho, degenerate = divergence_metric(confidences, ious)
    except DivergenceError as exc:
        logger.warning("divergence metric not available: %s", exc)
        rho, degenerate = None, True
    if degenerate and rho is not None:
        logger.warning("the divergence population is degenerate (constant "
                       "confidences or IoUs)")
    mean, count = per_object_divergence(confidences, ious, object_keys)
    summary.update(pooled=rho, degenerate=degenerate, per_object_mean=mean,
                   num_objects=count)
    return summary


def _divergence_pairs(params, scenes, assignment_cfg):
    confidences, ious, keys = [], [], []
    for scene in scenes:
        grouping = assignment_module.match_candidates(
            scene.priors, scene.gt_boxes, assignment_cfg)
        members = grouping.members
        output = model.forward(params, scene.features, scene.priors)
        k = grouping.matched[members]
        confidences.append(output.class_scores[members, scene.gt_labels[k]])
        ious.append(aligned_iou(output.boxes[members], scene.gt_boxes[k]))
        keys.append(np.stack([np.full(members.size, scene.image_id), k],
                             axis=1))
    return (np.concatenate(confidences), np.concatenate(ious),
            np.concatenate(keys))


def evaluate_model(params, scenes, scene_cfg, assignment_cfg=None,
                   nms_cfg=None, eval_cfg=None, iou_noise=0.0, seed=0,
                   with_divergence=True):
    """Evaluate a head on scenes.

    Detections go through the suppression of ``nms_cfg``; AR@k is computed
    on class-agnostic proposals. The divergence metric pools, over all
    scenes, the candidates matched to an object by the assignment matcher.

    :param float iou_noise: noise added to the IoU predictions (drawn
        from the ``STREAM_IOU_NOISE`` stream of ``seed``)
    :rtype: EvalReport
    """
    if assignment_cfg is None:
        assignment_cfg = assignment_module.AssignmentConfig()
    if nms_cfg is None:
        nms_cfg = NmsConfig()
    dets, proposals = [], []
    for scene in scenes:
        rng = (make_rng(seed, STREAM_IOU_NOISE, scene.image_id)
               if iou_noise > 0 else None)
        dets.append(detect(params, scene, scene_cfg, nms_cfg, iou_noise,
                           rng))
        if eval_cfg is None or eval_cfg.ar_limits:
            proposals.append(propose(params, scene, scene_cfg, nms_cfg))
    gts = GroundTruth(
        np.concatenate([s.gt_boxes for s in scenes]),
        np.concatenate([s.gt_labels for s in scenes]),
        np.concatenate([np.full(s.num_objects, s.image_id)
                        for s in scenes]),
        np.concatenate([np.arange(s.num_objects) for s in scenes]))
    divergence = None
    if with_divergence:
        divergence = divergence_summary(
            *_divergence_pairs(params, scenes, assignment_cfg),
            DIVERGENCE_POPULATION)
    return evaluate_detections(Detections.concatenate(dets), gts, eval_cfg,
                               proposals=Detections.concatenate(proposals),
                               divergence=divergence)
