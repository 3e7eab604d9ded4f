# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Seeded synthetic detection scenes.

A scene is a small image containing a few labeled boxes, covered by a
regular grid of square priors. Instead of pixels, every prior carries a
feature vector built from its position inside the object whose box
contains its centre (the smallest such box, as with the inside-box
matcher). With ``C`` classes the layout is:

- columns ``0..C-1``: class evidence, the one-hot class embedding scaled
  by a constant presence term plus the *classification signal*, a
  Gaussian bump centred on the object's discriminative point;
- the next 4 columns: the regression target ``encode(prior, box)`` with
  a centre error whose size shrinks as the prior gets closer to the box
  centre;
- the next ``C`` columns: localization quality, the one-hot class
  embedding scaled by the *localization signal*, a Gaussian bump centred
  on the box centre;
- the remaining columns: pure noise.

Distances are measured in box-normalized coordinates (the box maps to
``[-1, 1]``) as a fraction of the normalized diagonal. The discriminative
point sits at ``divergence_bias`` from the box centre in a random
direction, so that the priors with the strongest class evidence are not
the ones that localize best. With ``divergence_bias = 0`` the two signals
coincide.
"""

import logging

import numpy as np

from harmonized_detection.assignment import InsideBoxMatcher
from harmonized_detection.geometry import encode, pairwise_iou
from harmonized_detection.utils import make_rng

__all__ = [
    "SceneGenerationError",
    "SceneConfig",
    "Scene",
    "prior_grid",
    "generate_scene",
    "generate_scenes",
]


logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 1000

#: Class evidence carried by every prior of an object.
PRESENCE = 0.5

# diagonal of the normalized box [-1, 1] x [-1, 1]
_NORMALIZED_DIAGONAL = 2.0 * np.sqrt(2.0)


class SceneGenerationError(ValueError):
    """Raised when no valid scene can be generated."""
    pass


class SceneConfig:
    """Parameters of the synthetic scenes.

    :param image_size: ``(width, height)`` in pixels
    :param objects_per_scene: inclusive ``(min, max)`` number of objects
    :param int num_classes: number of object classes
    :param int prior_stride: spacing of the prior grid in pixels
    :param float prior_size: side of the square priors in pixels
    :param object_size: inclusive ``(min, max)`` side of the object boxes
    :param int feature_dim: dimension of the prior features, at least
        ``2 * num_classes + 4``
    :param float divergence_bias: offset of the discriminative point from
        the box centre, as a fraction of the box diagonal, in [0, 1]
    :param float noise_sigma: standard deviation of the feature noise,
        also the smallest centre error of the regression target (as a
        fraction of the box side)
    :param float regression_noise: additional centre error of the
        regression target for priors far from the box centre
    :param float signal_width: width of the signal bumps, as a fraction of
        the box diagonal
    :param float max_gt_iou: maximum IoU between two objects of a scene
    :param int seed: seed of the scene streams (``None`` until resolved)
    :raises ValueError: if a parameter is out of range
    """
    def __init__(self, image_size=(64, 64), objects_per_scene=(1, 3),
                 num_classes=3, prior_stride=8, prior_size=24.0,
                 object_size=(16.0, 36.0), feature_dim=16,
                 divergence_bias=0.4, noise_sigma=0.05,
                 regression_noise=0.2, signal_width=0.15, max_gt_iou=0.3,
                 seed=None):
        width, height = image_size
        min_objects, max_objects = objects_per_scene
        min_size, max_size = object_size
        if not (width > 0 and height > 0):
            raise ValueError("image_size must be positive")
        if not 1 <= min_objects <= max_objects:
            raise ValueError("objects_per_scene must satisfy 1 <= min <= max")
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        if int(prior_stride) != prior_stride or prior_stride < 1:
            raise ValueError("prior_stride must be a positive integer")
        if prior_stride > min(width, height):
            raise ValueError("prior_stride is larger than the image")
        if not prior_size > 0:
            raise ValueError("prior_size must be positive")
        if not 0 < min_size <= max_size <= min(width, height):
            raise ValueError("object_size must satisfy 0 < min <= max <= "
                             "image size")
        if feature_dim < 2 * num_classes + 4:
            raise ValueError(f"feature_dim must be at least "
                             f"2 * num_classes + 4 = {2 * num_classes + 4}")
        if not 0 <= divergence_bias <= 1:
            raise ValueError("divergence_bias must be in [0, 1]")
        if not noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")
        if not regression_noise >= 0:
            raise ValueError("regression_noise must be >= 0")
        if not signal_width > 0:
            raise ValueError("signal_width must be positive")
        if not 0 <= max_gt_iou <= 1:
            raise ValueError("max_gt_iou must be in [0, 1]")
        if seed is not None and not 0 <= seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.image_size = (int(width), int(height))
        self.objects_per_scene = (int(min_objects), int(max_objects))
        self.num_classes = int(num_classes)
        self.prior_stride = int(prior_stride)
        self.prior_size = float(prior_size)
        self.object_size = (float(min_size), float(max_size))
        self.feature_dim = int(feature_dim)
        self.divergence_bias = float(divergence_bias)
        self.noise_sigma = float(noise_sigma)
        self.regression_noise = float(regression_noise)
        self.signal_width = float(signal_width)
        self.max_gt_iou = float(max_gt_iou)
        self.seed = None if seed is None else int(seed)

    @property
    def regression_columns(self):
        """Feature columns holding the noisy regression targets."""
        return slice(self.num_classes, self.num_classes + 4)

    @property
    def quality_columns(self):
        """Feature columns holding the class-wise localization signal."""
        return slice(self.num_classes + 4, 2 * self.num_classes + 4)

    def to_dict(self):
        return {
            "image_size": list(self.image_size),
            "objects_per_scene": list(self.objects_per_scene),
            "num_classes": self.num_classes,
            "prior_stride": self.prior_stride,
            "prior_size": self.prior_size,
            "object_size": list(self.object_size),
            "feature_dim": self.feature_dim,
            "divergence_bias": self.divergence_bias,
            "noise_sigma": self.noise_sigma,
            "regression_noise": self.regression_noise,
            "signal_width": self.signal_width,
            "max_gt_iou": self.max_gt_iou,
            "seed": self.seed,
        }


class Scene:
    """One synthetic image.

    ``gt_boxes`` (K, 4), ``gt_labels`` (K,), ``priors`` (N, 4),
    ``features`` (N, D). ``owner`` is the object each prior describes (-1
    for none), ``cls_signal`` and ``loc_signal`` the noise-free signal
    strengths of every prior.
    """
    def __init__(self, image_id, gt_boxes, gt_labels, priors, features,
                 owner=None, cls_signal=None, loc_signal=None):
        self.image_id = int(image_id)
        self.gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.gt_labels = np.asarray(gt_labels, dtype=np.int64)
        self.priors = np.asarray(priors, dtype=np.float64)
        self.features = np.asarray(features, dtype=np.float64)
        self.owner = owner
        self.cls_signal = cls_signal
        self.loc_signal = loc_signal

    @property
    def num_objects(self):
        return self.gt_boxes.shape[0]


def prior_grid(cfg):
    """Square priors centred on a regular grid covering the image.

    :rtype: numpy.ndarray
    """
    width, height = cfg.image_size
    stride = cfg.prior_stride
    xs = np.arange(stride / 2, width, stride)
    ys = np.arange(stride / 2, height, stride)
    cx, cy = np.meshgrid(xs, ys)
    cx = cx.ravel()
    cy = cy.ravel()
    half = cfg.prior_size / 2
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)


def _place_objects(cfg, rng):
    width, height = cfg.image_size
    num_objects = int(rng.integers(cfg.objects_per_scene[0],
                                   cfg.objects_per_scene[1] + 1))
    boxes = []
    attempts = 0
    while len(boxes) < num_objects:
        if attempts >= MAX_PLACEMENT_ATTEMPTS:
            raise SceneGenerationError(
                f"could not place {num_objects} objects with pairwise IoU "
                f"<= {cfg.max_gt_iou} in {MAX_PLACEMENT_ATTEMPTS} attempts")
        attempts += 1
        w, h = rng.uniform(cfg.object_size[0], cfg.object_size[1], size=2)
        x1 = rng.uniform(0.0, width - w)
        y1 = rng.uniform(0.0, height - h)
        box = np.array([x1, y1, x1 + w, y1 + h])
        if boxes and np.max(pairwise_iou(box, np.array(boxes))) \
                > cfg.max_gt_iou:
            continue
        boxes.append(box)
    labels = rng.integers(0, cfg.num_classes, size=num_objects)
    return np.array(boxes), labels


def generate_scene(cfg, rng, image_id=0):
    """Generate one scene.

    :param SceneConfig cfg: scene parameters
    :param numpy.random.Generator rng: source of randomness
    :param int image_id: identifier of the scene
    :rtype: Scene
    :raises SceneGenerationError: if the objects cannot be placed within
        the attempt limit
    """
    gt_boxes, gt_labels = _place_objects(cfg, rng)
    priors = prior_grid(cfg)
    num_priors = priors.shape[0]
    angles = rng.uniform(0.0, 2 * np.pi, size=gt_boxes.shape[0])
    discriminative = (cfg.divergence_bias * _NORMALIZED_DIAGONAL
                      * np.stack([np.cos(angles), np.sin(angles)], axis=1))
    owner, _ = InsideBoxMatcher().match(priors, gt_boxes)
    noise = rng.normal(0.0, 1.0, size=(num_priors, cfg.feature_dim))
    error_angles = rng.uniform(0.0, 2 * np.pi, size=num_priors)

    owned = np.flatnonzero(owner >= 0)
    k = owner[owned]
    sizes = gt_boxes[:, 2:] - gt_boxes[:, :2]
    centers = 0.5 * (gt_boxes[:, :2] + gt_boxes[:, 2:])
    prior_centers = 0.5 * (priors[:, :2] + priors[:, 2:])
    offsets = (prior_centers[owned] - centers[k]) / (0.5 * sizes[k])
    r_loc = np.linalg.norm(offsets, axis=1) / _NORMALIZED_DIAGONAL
    r_cls = (np.linalg.norm(offsets - discriminative[k], axis=1)
             / _NORMALIZED_DIAGONAL)
    cls_signal = np.zeros(num_priors)
    loc_signal = np.zeros(num_priors)
    loc_signal[owned] = np.exp(-0.5 * (r_loc / cfg.signal_width) ** 2)
    cls_signal[owned] = np.exp(-0.5 * (r_cls / cfg.signal_width) ** 2)

    c = cfg.num_classes
    features = cfg.noise_sigma * noise
    features[:, cfg.regression_columns] = 0.0
    features[owned, gt_labels[k]] += PRESENCE + cls_signal[owned]
    features[owned, c + 4 + gt_labels[k]] += loc_signal[owned]

    # centre error in fractions of the box side, dw and dh stay close
    error = cfg.noise_sigma + cfg.regression_noise * (1.0 - loc_signal[owned])
    phi = error_angles[owned]
    prior_sizes = priors[owned, 2:] - priors[owned, :2]
    targets = encode(priors[owned], gt_boxes[k])
    targets[:, 0] += error * np.cos(phi) * sizes[k, 0] / prior_sizes[:, 0]
    targets[:, 1] += error * np.sin(phi) * sizes[k, 1] / prior_sizes[:, 1]
    targets[:, 2:] += cfg.noise_sigma * noise[owned, c + 2:c + 4]
    features[owned, c:c + 4] = targets
    return Scene(image_id, gt_boxes, gt_labels, priors, features,
                 owner=owner, cls_signal=cls_signal, loc_signal=loc_signal)


def generate_scenes(cfg, seed, count, stream, first_image_id=0):
    """Generate scenes, each from its own random stream.

    Scene ``i`` uses the stream ``make_rng(seed, stream, i)``, so that it
    does not depend on how many scenes are generated.

    :param SceneConfig cfg: scene parameters
    :param int seed: the seed
    :param int count: number of scenes
    :param int stream: stream identifier (see
        :mod:`harmonized_detection.utils`)
    :param int first_image_id: image id of the first scene
    :rtype: list
    """
    scenes = []
    for i in range(count):
        rng = make_rng(seed, stream, i)
        scenes.append(generate_scene(cfg, rng, first_image_id + i))
    logger.debug("generated %d scenes from stream %d", count, stream)
    return scenes
