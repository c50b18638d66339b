"""
Projected gradient descent on the property margin.

The margin of a property instance is

    ``min(y_obj - xi_obj, y_p - max_{l != p} y_l)``

at the target cell, on decoded scores. It is negative when the property is
violated. The attack descends the margin with signed gradient steps and
projects every iterate back into the feasible region of the property.
"""

__all__ = [
    "AttackConfig",
    "AttackResult",
    "CounterExample",
    "attack_margin",
    "margin_from_scores",
    "run_pgd",
    "pgd",
    "save_counterexample",
    "load_counterexample",
    "replay_counterexample",
]

# Standard library modules.
import dataclasses
import logging
import os
import time

# Third party modules.
import numpy as np

# Local modules.
from rosar.rcsetup import rcParams
from rosar.autodiff import Tensor, backward, sigmoid, softmax, reduce_max, minimum
from rosar.detector import forward
from rosar.properties import PropertySpec, project, violates, check_violation
from rosar.sonar import write_annotations, read_annotations
from rosar.fileio import write_json, read_json, write_npy, read_npy, write_pgm

# Globals and constants variables.
logger = logging.getLogger(__name__)

COUNTEREXAMPLE_VERSION = 1


@dataclasses.dataclass
class AttackConfig:
    """
    :arg steps: gradient steps per restart (default: rcParams['pgd.steps'])
    :arg restarts: random restarts (default: rcParams['pgd.restarts'])
    :arg step_size: step size; ``None`` uses ``step_factor`` times the mean
        width of the perturbable pixels divided by *steps*
    :arg step_factor: see *step_size* (default: rcParams['pgd.step_factor'])
    :arg time_limit: seconds per attack, ``None`` for no limit
        (default: rcParams['pgd.time_limit'])
    :arg seed: random seed of the starting points (default: rcParams['seed'])
    """

    steps: int = dataclasses.field(default_factory=lambda: rcParams["pgd.steps"])
    restarts: int = dataclasses.field(default_factory=lambda: rcParams["pgd.restarts"])
    step_size: float = None
    step_factor: float = dataclasses.field(
        default_factory=lambda: rcParams["pgd.step_factor"]
    )
    time_limit: float = dataclasses.field(
        default_factory=lambda: rcParams["pgd.time_limit"]
    )
    seed: int = dataclasses.field(default_factory=lambda: rcParams["seed"])

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.time_limit is not None and self.time_limit <= 0:
            raise ValueError(f"time_limit must be > 0 or None, got {self.time_limit}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class CounterExample:
    x_adv: np.ndarray
    x_orig: np.ndarray
    spec: PropertySpec
    margin: float
    steps_used: int
    restart: int
    source_id: str = None

    @property
    def epsilon(self):
        return self.spec.epsilon


@dataclasses.dataclass
class AttackResult:
    counterexample: CounterExample
    deadline_fired: bool
    steps: int
    step_size: float

    @property
    def found(self):
        return self.counterexample is not None


def _margin(model, x, spec):
    raw = forward(model, x)
    i, j = spec.target_cell
    p = spec.target_class
    objectness = sigmoid(raw.obj[i, j, 0])
    scores = softmax(raw.cls[i, j])
    others = np.array([index for index in range(raw.num_classes) if index != p])
    gap = scores[p] - reduce_max(scores[others])
    margin = minimum(objectness - spec.xi_obj, gap)
    return margin, float(objectness.item()), tuple(float(v) for v in scores.data)


def attack_margin(model, x, spec):
    """
    Differentiable margin of the property instance *spec* at input *x*.

    :arg x: image array, or a :class:`Tensor` with ``requires_grad=True``
        to obtain the input gradient
    :return: scalar tensor, negative when the property is violated
    """
    margin, _objectness, _scores = _margin(model, x, spec)
    return margin


def margin_from_scores(objectness, class_scores, spec):
    """
    Margin computed from already decoded scores.
    """
    p = spec.target_class
    best_other = max(v for index, v in enumerate(class_scores) if index != p)
    return min(objectness - spec.xi_obj, class_scores[p] - best_other)


def default_step_size(region, config):
    perturbable = region.perturbable
    if not perturbable.any():
        return 0.0
    return config.step_factor * float(region.width[perturbable].mean()) / config.steps


def run_pgd(model, x_bar, spec, config=None, source_id=None):
    """
    Searches the feasible region of *spec* around *x_bar* for an input that
    violates the property.

    Each restart starts from a uniformly drawn point of the region and takes
    ``config.steps`` signed gradient steps on the margin, restricted to the
    perturbable pixels and followed by a projection. The search stops at the
    first iterate that violates the property, or when the time limit fires.

    :return: the attack outcome
    :rtype: :class:`AttackResult`
    """
    if config is None:
        config = AttackConfig()
    x_bar = np.asarray(x_bar, dtype=np.float64)
    region = spec.region(x_bar)
    if region.is_singleton():
        return AttackResult(None, False, 0, 0.0)

    step_size = config.step_size or default_step_size(region, config)
    mask = region.perturbable.astype(np.float64)
    rng = np.random.default_rng(config.seed)
    deadline = None
    if config.time_limit is not None:
        deadline = time.monotonic() + config.time_limit

    total = 0
    for restart in range(config.restarts):
        x = project(rng.uniform(region.lower, region.upper), region)
        for step in range(config.steps + 1):
            if deadline is not None and time.monotonic() > deadline:
                logger.debug("Deadline fired after %d steps", total)
                return AttackResult(None, True, total, step_size)

            x_t = Tensor(x, requires_grad=True)
            margin, objectness, scores = _margin(model, x_t, spec)
            if violates(objectness, scores, spec) and check_violation(model, x, spec):
                ce = CounterExample(
                    x_adv=x.copy(),
                    x_orig=x_bar.copy(),
                    spec=spec,
                    margin=margin.item(),
                    steps_used=step,
                    restart=restart,
                    source_id=source_id,
                )
                return AttackResult(ce, False, total, step_size)
            if step == config.steps:
                break

            backward(margin)
            direction = np.sign(x_t.grad) * mask
            x = project(x - step_size * direction, region)
            total += 1

    return AttackResult(None, False, total, step_size)


def pgd(model, x_bar, spec, config=None, source_id=None):
    """
    Same as :func:`run_pgd` but returns only the counter-example, or
    ``None`` when none was found.
    """
    return run_pgd(model, x_bar, spec, config, source_id).counterexample


def save_counterexample(ce, directory, name, annotations=(), metadata=None):
    """
    Writes a counter-example as ``<name>.pgm`` and ``<name>.jsonl`` (dataset
    image and copied annotations), ``<name>.npy`` and ``<name>.orig.npy``
    (exact pixels) and the ``<name>.json`` sidecar.

    :return: path of the sidecar
    """
    os.makedirs(directory, exist_ok=True)
    write_pgm(os.path.join(directory, name + ".pgm"), ce.x_adv)
    write_annotations(os.path.join(directory, name + ".jsonl"), annotations)
    write_npy(os.path.join(directory, name + ".npy"), ce.x_adv)
    write_npy(os.path.join(directory, name + ".orig.npy"), ce.x_orig)

    sidecar = {
        "format_version": COUNTEREXAMPLE_VERSION,
        "source_id": ce.source_id,
        "spec": ce.spec.to_dict(),
        "epsilon": ce.epsilon,
        "margin": ce.margin,
        "steps_used": ce.steps_used,
        "restart": ce.restart,
        "image": name + ".pgm",
        "labels": name + ".jsonl",
        "pixels": name + ".npy",
        "original": name + ".orig.npy",
        "metadata": metadata or {},
    }
    path = os.path.join(directory, name + ".json")
    write_json(path, sidecar)
    return path


def load_counterexample(path):
    """
    Reads a counter-example sidecar.

    :return: counter-example and its annotations
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Counter-example not found: {path}")
    sidecar = read_json(path)
    if sidecar.get("format_version") != COUNTEREXAMPLE_VERSION:
        raise ValueError(f"{path}: unsupported format {sidecar.get('format_version')!r}")
    directory = os.path.dirname(path)
    ce = CounterExample(
        x_adv=read_npy(os.path.join(directory, sidecar["pixels"])),
        x_orig=read_npy(os.path.join(directory, sidecar["original"])),
        spec=PropertySpec.from_dict(sidecar["spec"]),
        margin=sidecar["margin"],
        steps_used=sidecar["steps_used"],
        restart=sidecar["restart"],
        source_id=sidecar["source_id"],
    )
    annotations = read_annotations(os.path.join(directory, sidecar["labels"]))
    return ce, annotations


def replay_counterexample(model, ce):
    """
    Re-checks a counter-example.

    :return: ``(inside_region, violates)``
    """
    region = ce.spec.region(ce.x_orig)
    return region.contains(ce.x_adv), check_violation(model, ce.x_adv, ce.spec)
