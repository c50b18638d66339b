"""
Default parameters of the laboratory and their validation.

Parameters are stored in a validating dictionary, :data:`rcParams`, which
works like matplotlib's own ``rcParams``. Every configuration object of the
package (:class:`rosar.pgd.AttackConfig`, :class:`rosar.bound_search.SearchConfig`,
:class:`rosar.training.TrainConfig`, ...) reads its defaults from it.

Example::

   >>> from rosar.rcsetup import rcParams, rc_context
   >>> rcParams["pgd.steps"]
   40
   >>> with rc_context({"pgd.steps": 10}):
   ...     rosar.pgd.AttackConfig().steps
   10

A JSON configuration file can be loaded with :func:`rc_file`::

   {"version": 1, "params": {"pgd.steps": 20, "search.max_iter": 5}}
"""

__all__ = ["rcParams", "defaultParams", "RcParams", "rc_context", "rc_file"]

# Standard library modules.
import contextlib
import json
import os

# Third party modules.
from matplotlib.rcsetup import (
    validate_float,
    validate_float_or_None,
    validate_int,
    ValidateInStrings,
)

# Local modules.

# Globals and constants variables.
CONFIG_VERSION = 1

_VALID_DIRECTIONS = ["high_eps_unsafe", "low_eps_unsafe"]
_validate_direction = ValidateInStrings("direction", _VALID_DIRECTIONS, ignorecase=True)

_VALID_SELECTIONS = ["all", "top"]
_validate_selection = ValidateInStrings("selection", _VALID_SELECTIONS, ignorecase=True)


def _range_validator(lower, upper, include_lower=True, include_upper=True):
    def validator(s):
        value = validate_float(s)
        below = value < lower if include_lower else value <= lower
        above = value > upper if include_upper else value >= upper
        if below or above:
            lbracket = "[" if include_lower else "("
            rbracket = "]" if include_upper else ")"
            raise ValueError(
                f"{value} is outside {lbracket}{lower}, {upper}{rbracket}"
            )
        return value

    return validator


def _validate_positive_int(s):
    value = validate_int(s)
    if value < 1:
        raise ValueError(f"{value} must be at least 1")
    return value


def _validate_non_negative_int(s):
    value = validate_int(s)
    if value < 0:
        raise ValueError(f"{value} must be non-negative")
    return value


def _validate_positive_float(s):
    value = validate_float(s)
    if value <= 0.0:
        raise ValueError(f"{value} must be strictly positive")
    return value


def _validate_positive_float_or_None(s):
    value = validate_float_or_None(s)
    if value is not None and value <= 0.0:
        raise ValueError(f"{value} must be strictly positive or None")
    return value


def _validate_epoch_list(s):
    if isinstance(s, str):
        s = [v for v in s.split(",") if v.strip()]
    values = [_validate_non_negative_int(v) for v in s]
    if not values:
        raise ValueError("at least one epoch count is required")
    return sorted(set(values))


_validate_unit = _range_validator(0.0, 1.0)
_validate_open_unit = _range_validator(0.0, 1.0, False, False)

defaultParams = {
    # Reproducibility
    "seed": [0, validate_int],
    # Micro detector
    "detector.input_size": [64, _validate_positive_int],
    "detector.channels": [1, _validate_positive_int],
    "detector.num_classes": [2, _validate_positive_int],
    "detector.conf_threshold": [0.25, _validate_unit],
    "detector.nms_iou": [0.45, _validate_unit],
    # Safety properties
    "property.xi_obj": [0.25, _validate_open_unit],
    # PGD attack
    "pgd.steps": [40, _validate_positive_int],
    "pgd.restarts": [3, _validate_positive_int],
    "pgd.step_factor": [2.5, _validate_positive_float],
    "pgd.time_limit": [10.0, _validate_positive_float_or_None],
    # Bound search
    "search.max_iter": [5, _validate_positive_int],
    "search.selection": ["all", _validate_selection],
    "search.p1.lower": [0.0, _validate_unit],
    "search.p1.upper": [0.08, _validate_unit],
    "search.p1.direction": ["high_eps_unsafe", _validate_direction],
    "search.p2.lower": [0.60, _validate_unit],
    "search.p2.upper": [1.0, _validate_unit],
    "search.p2.direction": ["low_eps_unsafe", _validate_direction],
    # Training and fine-tuning
    "train.epochs": [30, _validate_non_negative_int],
    "train.lr": [0.01, _validate_positive_float],
    "train.momentum": [0.9, _validate_unit],
    "train.clip_norm": [5.0, _validate_positive_float_or_None],
    "finetune.lr_factor": [0.1, _validate_positive_float],
    "finetune.epochs": [[5, 10, 15, 20], _validate_epoch_list],
    "finetune.selected_epochs": [15, _validate_non_negative_int],
    # Adversarial patch
    "patch.size": [16, _validate_positive_int],
    "patch.scale": [0.4, _range_validator(0.0, 1.0, include_lower=False)],
    "patch.epochs": [20, _validate_non_negative_int],
    "patch.step_size": [0.02, _validate_positive_float],
    "patch.w_obj": [1.0, validate_float],
    "patch.w_tv": [0.5, validate_float],
    # Evaluation
    "eval.iou_threshold": [0.5, _validate_unit],
    # Execution
    "workers": [1, _validate_positive_int],
}


class RcParams(dict):
    """
    A dictionary of parameters which validates values on the way in.
    """

    validate = {key: converter for key, (default, converter) in defaultParams.items()}

    def __init__(self, *args, **kwargs):
        super().__init__()
        self.update(*args, **kwargs)

    def __setitem__(self, key, val):
        try:
            converter = self.validate[key]
        except KeyError as err:
            raise KeyError(
                f"{key} is not a valid rc parameter (see rcParams.keys() for "
                f"a list of valid parameters)"
            ) from err

        try:
            cval = converter(val)
        except ValueError as ve:
            raise ValueError(f"Key {key}: {ve}") from None
        super().__setitem__(key, cval)

    def update(self, *args, **kwargs):
        for key, val in dict(*args, **kwargs).items():
            self[key] = val

    def copy(self):
        return RcParams(dict(self))


def _default_rc_params():
    params = RcParams(
        {key: default for key, (default, converter) in defaultParams.items()}
    )
    seed = os.environ.get("ROSAR_SEED")
    if seed is not None:
        params["seed"] = seed
    return params


rcParams = _default_rc_params()


@contextlib.contextmanager
def rc_context(params=None):
    """
    Temporarily update :data:`rcParams`.

    :arg params: parameters to set inside the context
    :type params: :class:`dict`
    """
    orig = rcParams.copy()
    try:
        if params is not None:
            rcParams.update(params)
        yield rcParams
    finally:
        dict.clear(rcParams)
        dict.update(rcParams, orig)


def read_config(path):
    """
    Reads a JSON configuration file and returns its content after checking
    the version.
    """
    with open(path, "r", encoding="utf-8") as fp:
        try:
            config = json.load(fp)
        except json.JSONDecodeError as ex:
            raise ValueError(f"{path}: invalid JSON ({ex})") from ex

    if not isinstance(config, dict):
        raise ValueError(f"{path}: configuration must be a JSON object")
    if "version" not in config:
        raise KeyError("version")
    if config["version"] != CONFIG_VERSION:
        raise ValueError(
            f"{path}: unsupported configuration version {config['version']!r}"
        )
    return config


def rc_file(path):
    """
    Updates :data:`rcParams` from the ``params`` section of a JSON
    configuration file.
    """
    config = read_config(path)
    rcParams.update(config.get("params", {}))
    return config
