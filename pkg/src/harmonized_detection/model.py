# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""A toy differentiable detector head.

Each candidate (prior) carries a feature vector ``f`` of dimension D. The
head has three linear branches reading the same features:

- classification: ``c = sigmoid(w_cls @ f + b_cls)``, one score per class;
- localization: ``delta = w_loc @ f + b_loc``, decoded relative to the
  prior into a box;
- IoU prediction: ``P = sigmoid(w_iur @ f + b_iur)``, a single extra
  layer attached to the localization pathway.

Gradients are computed analytically by :func:`backward` from the
gradients of a loss with respect to the outputs.
"""

import numpy as np

from harmonized_detection.geometry import decode

__all__ = [
    "PARAM_NAMES",
    "HeadParams",
    "HeadOutput",
    "forward",
    "backward",
    "sgd_step",
]


PARAM_NAMES = ("w_cls", "b_cls", "w_loc", "b_loc", "w_iur", "b_iur")


def _sigmoid(z):
    # Split on the sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class HeadParams:
    """Parameters (or gradients) of the detector head.

    :param dict arrays: the arrays named in :data:`PARAM_NAMES`, with
        shapes ``w_cls`` (C, D), ``b_cls`` (C,), ``w_loc`` (4, D),
        ``b_loc`` (4,), ``w_iur`` (D,), ``b_iur`` (1,)
    :param bool check_finite: reject non-finite entries (gradients are
        created without this check)
    :raises ValueError: if an array is missing, not finite, or if the
        shapes are inconsistent
    """
    def __init__(self, arrays, check_finite=True):
        missing = set(PARAM_NAMES) - set(arrays)
        if missing:
            raise ValueError(f"missing head parameters {sorted(missing)}")
        self.arrays = {name: np.array(arrays[name], dtype=np.float64)
                       for name in PARAM_NAMES}
        num_classes, feature_dim = self.arrays["w_cls"].shape
        expected = {
            "w_cls": (num_classes, feature_dim),
            "b_cls": (num_classes,),
            "w_loc": (4, feature_dim),
            "b_loc": (4,),
            "w_iur": (feature_dim,),
            "b_iur": (1,),
        }
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name} has shape "
                                 f"{self.arrays[name].shape}, expected "
                                 f"{shape}")
            if check_finite and not np.all(np.isfinite(self.arrays[name])):
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def zeros(cls, num_classes, feature_dim):
        """Create all-zero parameters."""
        return cls({
            "w_cls": np.zeros((num_classes, feature_dim)),
            "b_cls": np.zeros(num_classes),
            "w_loc": np.zeros((4, feature_dim)),
            "b_loc": np.zeros(4),
            "w_iur": np.zeros(feature_dim),
            "b_iur": np.zeros(1),
        })

    @classmethod
    def random(cls, num_classes, feature_dim, rng, scale=0.1):
        """Create parameters drawn from a centred normal distribution."""
        zeros = cls.zeros(num_classes, feature_dim)
        return cls({name: rng.normal(0.0, scale, size=a.shape)
                    for name, a in zeros.arrays.items()})

    @property
    def num_classes(self):
        return self.arrays["w_cls"].shape[0]

    @property
    def feature_dim(self):
        return self.arrays["w_cls"].shape[1]

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self):
        return HeadParams(self.arrays)

    def flatten(self):
        """Concatenate all parameters into one vector (fixed name order)."""
        return np.concatenate([self.arrays[n].ravel() for n in PARAM_NAMES])

    def unflatten(self, vector):
        """Parameters of the same shapes as ``self`` filled from a vector."""
        vector = np.asarray(vector, dtype=np.float64)
        arrays = {}
        offset = 0
        for name in PARAM_NAMES:
            shape = self.arrays[name].shape
            size = int(np.prod(shape))
            arrays[name] = vector[offset:offset + size].reshape(shape)
            offset += size
        if offset != vector.size:
            raise ValueError("vector size does not match the parameters")
        return HeadParams(arrays)

    def __add__(self, other):
        return HeadParams({n: self.arrays[n] + other.arrays[n]
                           for n in PARAM_NAMES})

    def __mul__(self, factor):
        return HeadParams({n: factor * self.arrays[n] for n in PARAM_NAMES})

    __rmul__ = __mul__


class HeadOutput:
    """Outputs of :func:`forward` for a batch of N candidates.

    ``class_scores`` (N, C), ``deltas`` (N, 4), ``boxes`` (N, 4) and
    ``iou_pred`` (N,), plus the ``features`` and ``priors`` they were
    computed from.
    """
    def __init__(self, features, priors, class_scores, deltas, boxes,
                 iou_pred):
        self.features = features
        self.priors = priors
        self.class_scores = class_scores
        self.deltas = deltas
        self.boxes = boxes
        self.iou_pred = iou_pred


def forward(params, features, priors):
    """Run the head on a batch of candidates.

    :param HeadParams params: head parameters
    :param numpy.ndarray features: candidate features, shape (N, D)
    :param numpy.ndarray priors: prior boxes, shape (N, 4)
    :rtype: HeadOutput
    """
    features = np.asarray(features, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.feature_dim:
        raise ValueError(f"features must have shape (N, "
                         f"{params.feature_dim}), got {features.shape}")
    class_scores = _sigmoid(features @ params["w_cls"].T + params["b_cls"])
    deltas = features @ params["w_loc"].T + params["b_loc"]
    boxes = decode(priors, deltas)
    iou_pred = _sigmoid(features @ params["w_iur"] + params["b_iur"][0])
    return HeadOutput(features, priors, class_scores, deltas, boxes,
                      iou_pred)


def backward(params, output, grad_scores=None, grad_deltas=None,
             grad_iou_pred=None):
    """Back-propagate output gradients to the head parameters.

    :param HeadParams params: the parameters used by :func:`forward`
    :param HeadOutput output: the result of :func:`forward`
    :param numpy.ndarray grad_scores: dL/dclass_scores, shape (N, C)
    :param numpy.ndarray grad_deltas: dL/ddeltas, shape (N, 4)
    :param numpy.ndarray grad_iou_pred: dL/diou_pred, shape (N,)
    :returns: dL/dparams
    :rtype: HeadParams
    """
    f = output.features
    grads = HeadParams.zeros(params.num_classes, params.feature_dim).arrays
    if grad_scores is not None:
        c = output.class_scores
        dz = grad_scores * c * (1.0 - c)
        grads["w_cls"] = dz.T @ f
        grads["b_cls"] = dz.sum(axis=0)
    if grad_deltas is not None:
        grads["w_loc"] = grad_deltas.T @ f
        grads["b_loc"] = grad_deltas.sum(axis=0)
    if grad_iou_pred is not None:
        p = output.iou_pred
        dz = grad_iou_pred * p * (1.0 - p)
        grads["w_iur"] = dz @ f
        grads["b_iur"] = np.array([dz.sum()])
    return HeadParams(grads, check_finite=False)


def sgd_step(params, grads, lr):
    """One step of plain gradient descent: ``params - lr * grads``.

    :rtype: HeadParams
    :raises ValueError: if ``lr`` is not positive
    """
    if not lr > 0:
        raise ValueError(f"the learning rate must be positive, got {lr}")
    return HeadParams({n: params[n] - lr * grads[n] for n in PARAM_NAMES})
