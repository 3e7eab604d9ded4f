# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""JSON configuration files of the command-line tools.

A configuration file is a JSON object with an optional ``"schema": 1``
entry and the optional sections ``scene``, ``train``, ``assignment``,
``losses``, ``nms``, ``eval`` and ``benchmark``. Every key of a section is
optional and defaults to the value of the corresponding configuration
class. Unknown keys and values of the wrong type are rejected with an
:exc:`InvalidConfigError` naming the offending key, e.g.
``scene.prior_stride``.
"""

import json
import logging
import numbers
import re

from harmonized_detection.assignment import AssignmentConfig
from harmonized_detection.benchmark import BenchmarkConfig
from harmonized_detection.evaluation import EvalConfig
from harmonized_detection.file_accessor import DataAccessError, read_file
from harmonized_detection.losses import LossConfig
from harmonized_detection.postprocess import NmsConfig
from harmonized_detection.scene import SceneConfig
from harmonized_detection.training import TrainConfig
from harmonized_detection.utils import default_seed

__all__ = [
    "CONFIG_SCHEMA",
    "InvalidConfigError",
    "Config",
    "parse_config",
    "load_config",
    "add_argparse_options",
    "apply_command_line",
]


logger = logging.getLogger(__name__)

CONFIG_SCHEMA = 1


class InvalidConfigError(ValueError):
    """Raised when a configuration is invalid.

    :ivar str key: dotted name of the offending key (``None`` if the
        problem is not tied to one key)
    """
    def __init__(self, message, key=None):
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


def _integer(value):
    return isinstance(value, numbers.Integral) and not isinstance(value, bool)


def _number(value):
    return isinstance(value, numbers.Real) and not isinstance(value, bool)


def _boolean(value):
    return isinstance(value, bool)


def _string(value):
    return isinstance(value, str)


def _list_of(check, length=None):
    def check_list(value):
        return (isinstance(value, list)
                and (length is None or len(value) == length)
                and all(check(v) for v in value))
    return check_list


def _optional(check):
    return lambda value: value is None or check(value)


_TYPE_NAMES = {
    _integer: "an integer",
    _number: "a number",
    _boolean: "a boolean",
    _string: "a string",
}

# section name -> (configuration class, {key: (checker, description)})
_SECTIONS = {
    "scene": (SceneConfig, {
        "image_size": (_list_of(_integer, 2), "a list of 2 integers"),
        "objects_per_scene": (_list_of(_integer, 2), "a list of 2 integers"),
        "num_classes": (_integer, None),
        "prior_stride": (_integer, None),
        "prior_size": (_number, None),
        "object_size": (_list_of(_number, 2), "a list of 2 numbers"),
        "feature_dim": (_integer, None),
        "divergence_bias": (_number, None),
        "noise_sigma": (_number, None),
        "regression_noise": (_number, None),
        "signal_width": (_number, None),
        "max_gt_iou": (_number, None),
        "seed": (_optional(_integer), "an integer or null"),
    }),
    "train": (TrainConfig, {
        "epochs": (_integer, None),
        "scenes_per_epoch": (_integer, None),
        "val_scenes": (_integer, None),
        "lr": (_number, None),
        "lr_drop_epochs": (_list_of(_integer), "a list of integers"),
        "lr_drop_factor": (_number, None),
        "mlc_enable_epoch": (_integer, None),
        "baseline_mode": (_string, None),
        "iur": (_boolean, None),
        "eval_interval": (_integer, None),
    }),
    "assignment": (AssignmentConfig, {
        "alpha": (_number, None),
        "matcher": (_string, None),
        "low": (_number, None),
        "high": (_number, None),
        "min_candidates": (_integer, None),
    }),
    "losses": (LossConfig, {
        "gamma": (_number, None),
        "loc_loss": (_string, None),
        "beta": (_number, None),
        "align_weight": (_number, None),
    }),
    "nms": (NmsConfig, {
        "iou_threshold": (_number, None),
        "mode": (_string, None),
        "max_out": (_integer, None),
        "score_threshold": (_number, None),
    }),
    "eval": (EvalConfig, {
        "iou_thresholds": (_list_of(_number), "a list of numbers"),
        "recall_points": (_integer, None),
        "ar_limits": (_list_of(_integer), "a list of integers"),
    }),
    "benchmark": (BenchmarkConfig, {
        "seeds": (_list_of(_integer), "a list of integers"),
        "include_alignment": (_boolean, None),
        "alpha_sweep": (_list_of(_number), "a list of numbers"),
        "iou_noise_sigma": (_number, None),
        "bias_check": (_boolean, None),
        "min_divergence_gain": (_number, None),
    }),
}


class Config:
    """Complete configuration of the tools.

    ``train.assignment`` and ``train.losses`` hold the ``assignment`` and
    ``losses`` sections.
    """
    def __init__(self, scene=None, train=None, nms=None, eval=None,
                 benchmark=None):
        self.scene = scene if scene is not None else SceneConfig()
        self.train = train if train is not None else TrainConfig()
        self.nms = nms if nms is not None else NmsConfig()
        self.eval = eval if eval is not None else EvalConfig()
        self.benchmark = (benchmark if benchmark is not None
                          else BenchmarkConfig())

    def to_dict(self):
        return {
            "schema": CONFIG_SCHEMA,
            "scene": self.scene.to_dict(),
            "train": self.train.to_dict(),
            "assignment": self.train.assignment.to_dict(),
            "losses": self.train.losses.to_dict(),
            "nms": self.nms.to_dict(),
            "eval": self.eval.to_dict(),
            "benchmark": self.benchmark.to_dict(),
        }


def _build_section(name, values, extra=None):
    cls, keys = _SECTIONS[name]
    if not isinstance(values, dict):
        raise InvalidConfigError("must be a JSON object", name)
    for key, value in values.items():
        dotted = f"{name}.{key}"
        if key not in keys:
            raise InvalidConfigError("unknown key", dotted)
        check, description = keys[key]
        if not check(value):
            if description is None:
                description = _TYPE_NAMES[check]
            raise InvalidConfigError(f"must be {description}, got "
                                     f"{json.dumps(value)}", dotted)
    kwargs = dict(values)
    kwargs.update(extra or {})
    try:
        return cls(**kwargs)
    except ValueError as exc:
        # the messages of the configuration classes name the parameter
        message = str(exc)
        key = next((k for k in sorted(keys, key=len, reverse=True)
                    if re.search(rf"\b{k}\b", message)), None)
        raise InvalidConfigError(
            message, f"{name}.{key}" if key else name) from exc


def parse_config(document):
    """Build a :class:`Config` from a decoded JSON document.

    :param dict document: the decoded configuration
    :rtype: Config
    :raises InvalidConfigError: if the configuration is invalid
    """
    if not isinstance(document, dict):
        raise InvalidConfigError("the configuration must be a JSON object")
    schema = document.get("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise InvalidConfigError(f"unsupported schema version {schema!r} "
                                 f"(expected {CONFIG_SCHEMA})", "schema")
    for section in document:
        if section != "schema" and section not in _SECTIONS:
            raise InvalidConfigError("unknown section", section)
    assignment = _build_section("assignment",
                                document.get("assignment", {}))
    losses = _build_section("losses", document.get("losses", {}))
    return Config(
        scene=_build_section("scene", document.get("scene", {})),
        train=_build_section("train", document.get("train", {}),
                             {"assignment": assignment, "losses": losses}),
        nms=_build_section("nms", document.get("nms", {})),
        eval=_build_section("eval", document.get("eval", {})),
        benchmark=_build_section("benchmark",
                                 document.get("benchmark", {})),
    )


def load_config(path=None):
    """Read a configuration file.

    :param str path: path to a JSON file, ``None`` for the defaults
    :rtype: Config
    :raises InvalidConfigError: if the file cannot be read or is invalid
    """
    if path is None:
        return Config()
    return parse_config(_read_document(path))


def add_argparse_options(parser):
    """Add the options selecting the configuration and the seed.

    :param argparse.ArgumentParser parser: an argument parser
    """
    group = parser.add_argument_group("Configuration")
    group.add_argument("--config", default=None,
                       help="JSON configuration file [default: built-in "
                       "defaults]")
    group.add_argument("--seed", type=int, default=None,
                       help="seed of the random streams (overrides "
                       "scene.seed in the configuration and the "
                       "HARMONIZED_DETECTION_SEED environment variable)")


_FLAG_KEYS = {
    # option name -> (section, key)
    "epochs": ("train", "epochs"),
    "mlc_enable_epoch": ("train", "mlc_enable_epoch"),
    "baseline_mode": ("train", "baseline_mode"),
    "iur": ("train", "iur"),
    "alpha": ("assignment", "alpha"),
    "matcher": ("assignment", "matcher"),
    "nms_mode": ("nms", "mode"),
    "iou_threshold": ("nms", "iou_threshold"),
}


def apply_command_line(args):
    """Load the configuration and apply the command-line overrides.

    The seed is resolved as: ``--seed``, else ``scene.seed`` from the file,
    else the ``HARMONIZED_DETECTION_SEED`` environment variable, else 0.

    :param argparse.Namespace args: parsed command line (options that are
        absent or ``None`` are not applied)
    :rtype: Config
    :raises InvalidConfigError: if the configuration is invalid
    """
    if getattr(args, "config", None) is None:
        document = {}
    else:
        document = _read_document(args.config)
    for option, (section, key) in _FLAG_KEYS.items():
        value = getattr(args, option, None)
        if value is not None:
            document.setdefault(section, {})
            if not isinstance(document[section], dict):
                raise InvalidConfigError("must be a JSON object", section)
            document[section][key] = value
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = document.get("scene", {}).get("seed") \
            if isinstance(document.get("scene"), dict) else None
    if seed is None:
        try:
            seed = default_seed()
        except ValueError as exc:
            raise InvalidConfigError(
                f"the HARMONIZED_DETECTION_SEED environment variable is not "
                f"an integer: {exc}") from exc
    document.setdefault("scene", {})
    if isinstance(document["scene"], dict):
        document["scene"]["seed"] = seed
    return parse_config(document)


def _read_document(path):
    try:
        document = json.loads(read_file(path).decode("utf-8"))
    except DataAccessError as exc:
        raise InvalidConfigError(f"cannot read the configuration: {exc}"
                                 ) from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise InvalidConfigError("the configuration must be a JSON object")
    logger.debug("read configuration from %s", path)
    return document
