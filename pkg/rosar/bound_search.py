"""
Binary search of the perturbation threshold at which a property fails.

For every detection of every image (an *instance*), the search bisects the
interval ``[lower, upper]`` of the property parameter ``eps``. Each midpoint
is attacked with :func:`rosar.pgd.run_pgd`; a counter-example moves the
unsafe side of the bracket to the midpoint, its absence moves the safe side.
Which side is unsafe depends on the property:

    * ``high_eps_unsafe``: larger ``eps`` admits more perturbation (``p1``)
    * ``low_eps_unsafe``: smaller ``eps`` admits more perturbation (``p2``,
      where ``eps`` is the darkest allowed fraction of the pixel value)

The threshold of an instance is the midpoint of the final bracket. Every
counter-example found along the way is saved.
"""

__all__ = [
    "HIGH_EPS_UNSAFE",
    "LOW_EPS_UNSAFE",
    "SearchConfig",
    "Instance",
    "IterationLog",
    "RobustnessRecord",
    "Evaluation",
    "eval_prop",
    "find_instances",
    "binary_search_bound",
    "write_records",
    "read_records",
    "assemble_adv_dataset",
]

# Standard library modules.
import concurrent.futures
import dataclasses
import json
import logging
import os
import typing
import warnings

# Third party modules.
import numpy as np
from tqdm import tqdm

# Local modules.
from rosar.rcsetup import rcParams
from rosar.detector import forward, decode, decode_cell
from rosar.properties import P1, P2, PropertySpec, violates, sample_lines
from rosar.pgd import AttackConfig, run_pgd, save_counterexample, load_counterexample
from rosar.sonar import ADVERSARIAL, DatasetEntry, DatasetManifest
from rosar.fileio import atomic_write_text

# Globals and constants variables.
logger = logging.getLogger(__name__)

HIGH_EPS_UNSAFE = "high_eps_unsafe"
LOW_EPS_UNSAFE = "low_eps_unsafe"
_DIRECTIONS = [HIGH_EPS_UNSAFE, LOW_EPS_UNSAFE]

SELECT_ALL = "all"
SELECT_TOP = "top"
_SELECTIONS = [SELECT_ALL, SELECT_TOP]

RECORD_VERSION = 1

_COUNTEREXAMPLE_DIR = "counterexamples"


def _derive_seed(*values):
    return int(np.random.SeedSequence([int(v) for v in values]).generate_state(1)[0])


@dataclasses.dataclass
class SearchConfig:
    """
    :arg kind: property, ``p1`` or ``p2``
    :arg lower: initial lower bound (default: rcParams['search.<kind>.lower'])
    :arg upper: initial upper bound (default: rcParams['search.<kind>.upper'])
    :arg max_iter: bisection steps (default: rcParams['search.max_iter'])
    :arg time_limit: seconds per attack, ``None`` for no limit
        (default: rcParams['pgd.time_limit'])
    :arg direction: unsafe side of the bracket
        (default: rcParams['search.<kind>.direction'])
    :arg selection: ``all`` detections or the ``top`` one per image
        (default: rcParams['search.selection'])
    :arg attack: PGD settings; its time limit and seed are overridden per
        instance
    :arg xi_obj: objectness threshold (default: rcParams['property.xi_obj'])
    :arg seed: base seed of line configurations and attacks
        (default: rcParams['seed'])
    """

    kind: str
    lower: float = None
    upper: float = None
    max_iter: int = dataclasses.field(default_factory=lambda: rcParams["search.max_iter"])
    time_limit: float = dataclasses.field(
        default_factory=lambda: rcParams["pgd.time_limit"]
    )
    direction: str = None
    selection: str = dataclasses.field(
        default_factory=lambda: rcParams["search.selection"]
    )
    attack: AttackConfig = None
    xi_obj: float = dataclasses.field(default_factory=lambda: rcParams["property.xi_obj"])
    seed: int = dataclasses.field(default_factory=lambda: rcParams["seed"])

    def __post_init__(self):
        if self.kind not in (P1, P2):
            raise ValueError(f"Unknown property: {self.kind}. Valid properties: p1, p2")
        if self.lower is None:
            self.lower = rcParams[f"search.{self.kind}.lower"]
        if self.upper is None:
            self.upper = rcParams[f"search.{self.kind}.upper"]
        if self.direction is None:
            self.direction = rcParams[f"search.{self.kind}.direction"]
        if self.attack is None:
            self.attack = AttackConfig()

        if not self.lower < self.upper:
            raise ValueError(f"lower must be < upper, got [{self.lower}, {self.upper}]")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.time_limit is not None and self.time_limit <= 0:
            raise ValueError(f"time_limit must be > 0 or None, got {self.time_limit}")
        if self.direction not in _DIRECTIONS:
            raise ValueError(
                f"Unknown direction: {self.direction}. "
                f"Valid directions: {', '.join(_DIRECTIONS)}"
            )
        if self.selection not in _SELECTIONS:
            raise ValueError(
                f"Unknown selection: {self.selection}. "
                f"Valid selections: {', '.join(_SELECTIONS)}"
            )

    @classmethod
    def for_property(cls, kind, **kwargs):
        return cls(kind, **kwargs)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["attack"] = self.attack.to_dict()
        return d


@dataclasses.dataclass(frozen=True)
class Instance:
    """
    One detection of one image, the unit of the search.
    """

    entry: DatasetEntry
    index: int
    cell: tuple
    target_class: int
    lines: tuple
    seed: int

    @property
    def image_id(self):
        return self.entry.image_id


@dataclasses.dataclass(frozen=True)
class IterationLog:
    """
    One bisection step: the attacked midpoint, the bracket after the update
    and the attack outcome.
    """

    mid: float
    low: float
    high: float
    found: bool
    deadline_fired: bool

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class RobustnessRecord:
    image_id: str
    cell: tuple
    target_class: int
    kind: str
    threshold: float
    lower: float
    upper: float
    direction: str
    iterations: list = dataclasses.field(default_factory=list)
    counterexamples: list = dataclasses.field(default_factory=list)
    lines: tuple = None
    model_id: str = None

    @property
    def any_deadline_fired(self):
        return any(log.deadline_fired for log in self.iterations)

    def to_dict(self):
        return {
            "format_version": RECORD_VERSION,
            "image_id": self.image_id,
            "cell": list(self.cell),
            "p": self.target_class,
            "kind": self.kind,
            "threshold": self.threshold,
            "lower": self.lower,
            "upper": self.upper,
            "direction": self.direction,
            "iterations": [log.to_dict() for log in self.iterations],
            "counterexamples": list(self.counterexamples),
            "lines": None if self.lines is None else list(self.lines),
            "model_id": self.model_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            image_id=d["image_id"],
            cell=tuple(d["cell"]),
            target_class=d["p"],
            kind=d["kind"],
            threshold=d["threshold"],
            lower=d["lower"],
            upper=d["upper"],
            direction=d["direction"],
            iterations=[IterationLog(**log) for log in d["iterations"]],
            counterexamples=list(d["counterexamples"]),
            lines=None if d.get("lines") is None else tuple(d["lines"]),
            model_id=d.get("model_id"),
        )


class Evaluation(typing.NamedTuple):
    found: bool
    counterexample: object = None
    deadline_fired: bool = False


def eval_prop(
    kind,
    model,
    image,
    cell,
    epsilon,
    time_limit=None,
    target_class=None,
    lines=None,
    attack=None,
    xi_obj=None,
    seed=None,
    source_id=None,
):
    """
    Attacks one property instance at *epsilon*.

    :arg kind: ``p1`` or ``p2``
    :arg cell: grid cell of the protected detection
    :arg time_limit: seconds, ``None`` for no limit
    :arg target_class: correct class (default: class of the baseline detection)
    :arg lines: line configuration of ``p2`` (default: sampled from *seed*)
    :arg attack: PGD settings (default: :class:`rosar.pgd.AttackConfig`)
    :arg xi_obj: objectness threshold (default: rcParams['property.xi_obj'])
    :return: whether a counter-example was found, the counter-example and
        whether the deadline fired
    :rtype: :class:`Evaluation`
    """
    if xi_obj is None:
        xi_obj = rcParams["property.xi_obj"]
    if attack is None:
        attack = AttackConfig()
    if seed is None:
        seed = attack.seed

    image = np.asarray(image, dtype=np.float64)
    baseline = decode_cell(forward(model, image), cell)
    if target_class is None:
        target_class = baseline.class_argmax
    if kind == P2 and lines is None:
        lines = sample_lines(image.shape[0], seed)

    spec = PropertySpec(kind, epsilon, cell, target_class, lines, xi_obj)
    if violates(baseline.objectness, baseline.class_scores, spec):
        raise ValueError(
            f"No valid baseline detection of class {target_class} at cell {tuple(cell)}"
        )

    attack = dataclasses.replace(attack, time_limit=time_limit, seed=seed)
    result = run_pgd(model, image, spec, attack, source_id=source_id)
    return Evaluation(result.found, result.counterexample, result.deadline_fired)


def find_instances(model, dataset, cfg):
    """
    Lists the instances of *dataset*: the detections kept by decoding at
    ``xi_obj`` and non-maximum suppression, or only the most confident one per
    image with ``selection="top"``.

    :return: instances and the number of skipped detections
    """
    instances = []
    skipped = 0
    for index, entry in enumerate(dataset):
        detections = decode(forward(model, entry.image), conf_threshold=cfg.xi_obj)
        if cfg.selection == SELECT_TOP and detections:
            detections = [max(detections, key=lambda d: d.objectness)]
        if not detections:
            logger.debug("No detection on %s", entry.image_id)

        for detection in detections:
            p = detection.class_argmax
            i, j = detection.cell
            seed = _derive_seed(cfg.seed, index, i, j)
            lines = sample_lines(entry.image.shape[0], seed) if cfg.kind == P2 else None
            mid = (cfg.lower + cfg.upper) / 2.0
            spec = PropertySpec(cfg.kind, mid, detection.cell, p, lines, cfg.xi_obj)
            if violates(detection.objectness, detection.class_scores, spec):
                skipped += 1
                continue
            instances.append(Instance(entry, index, detection.cell, p, lines, seed))

    return instances, skipped


def _model_evaluator(model, cfg):
    def evaluate(instance, epsilon):
        return eval_prop(
            cfg.kind,
            model,
            instance.entry.image,
            instance.cell,
            epsilon,
            time_limit=cfg.time_limit,
            target_class=instance.target_class,
            lines=instance.lines,
            attack=cfg.attack,
            xi_obj=cfg.xi_obj,
            seed=instance.seed,
            source_id=instance.image_id,
        )

    return evaluate


def _search_instance(instance, cfg, evaluate, out_dir, model_id):
    low, high = cfg.lower, cfg.upper
    iterations = []
    counterexamples = []
    i, j = instance.cell

    for iteration in range(cfg.max_iter):
        mid = (low + high) / 2.0
        result = evaluate(instance, mid)

        if result.found and result.counterexample is not None and out_dir is not None:
            name = f"{instance.image_id}_c{i}-{j}_{cfg.kind}_it{iteration}"
            save_counterexample(
                result.counterexample,
                os.path.join(out_dir, _COUNTEREXAMPLE_DIR),
                name,
                instance.entry.annotations,
                metadata={"model_id": model_id, "iteration": iteration},
            )
            counterexamples.append(f"{_COUNTEREXAMPLE_DIR}/{name}.json")

        if (cfg.direction == HIGH_EPS_UNSAFE) == bool(result.found):
            high = mid
        else:
            low = mid

        iterations.append(IterationLog(mid, low, high, bool(result.found), result.deadline_fired))
        logger.debug(
            "%s cell %s it %d: eps=%.6f found=%s", instance.image_id, instance.cell,
            iteration, mid, result.found,
        )

    return RobustnessRecord(
        image_id=instance.image_id,
        cell=tuple(instance.cell),
        target_class=instance.target_class,
        kind=cfg.kind,
        threshold=(low + high) / 2.0,
        lower=cfg.lower,
        upper=cfg.upper,
        direction=cfg.direction,
        iterations=iterations,
        counterexamples=counterexamples,
        lines=instance.lines,
        model_id=model_id,
    )


def binary_search_bound(
    model,
    dataset,
    cfg,
    evaluate=None,
    out_dir=None,
    workers=None,
    model_id=None,
    progress=False,
):
    """
    Estimates the robustness threshold of every instance of *dataset*.

    :arg model: detector
    :arg dataset: images to search
    :arg cfg: search settings
    :type cfg: :class:`SearchConfig`
    :arg evaluate: callable ``(instance, epsilon) -> Evaluation`` replacing
        the attack, mainly for testing (default: :func:`eval_prop`)
    :arg out_dir: directory receiving ``counterexamples/`` (not saved when
        ``None``)
    :arg workers: number of instances searched in parallel
        (default: rcParams['workers'])
    :arg model_id: identifier written in the records
    :return: one record per instance, in dataset order
    """
    if len(dataset) == 0:
        raise ValueError("Cannot search an empty dataset")
    if workers is None:
        workers = rcParams["workers"]
    if model_id is None:
        model_id = f"seed-{model.seed}"
    if evaluate is None:
        evaluate = _model_evaluator(model, cfg)

    instances, skipped = find_instances(model, dataset, cfg)
    if skipped:
        warnings.warn(f"{skipped} detection(s) skipped: class scores tie at baseline")
    logger.info(
        "Searching %d instance(s) of %s on %d image(s)", len(instances), cfg.kind, len(dataset)
    )

    def search(instance):
        return _search_instance(instance, cfg, evaluate, out_dir, model_id)

    with tqdm(total=len(instances), desc=f"search {cfg.kind}", disable=not progress) as bar:
        if workers > 1:
            records = []
            with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
                for record in executor.map(search, instances):
                    records.append(record)
                    bar.update()
        else:
            records = []
            for instance in instances:
                records.append(search(instance))
                bar.update()

    return records


def write_records(path, records):
    """
    Writes records as JSON lines.
    """
    lines = [json.dumps(record.to_dict(), sort_keys=True) for record in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_records(path):
    records = []
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, 1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
                if data.get("format_version") != RECORD_VERSION:
                    raise ValueError(f"unsupported format {data.get('format_version')!r}")
                records.append(RobustnessRecord.from_dict(data))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as ex:
                raise ValueError(f"{path}:{lineno}: invalid record ({ex})") from ex
    return records


def assemble_adv_dataset(records, out_dir, name):
    """
    Collects every counter-example referenced by *records* into an
    adversarial dataset. Annotations are those copied from the source images.

    :arg records: search records
    :arg out_dir: directory the counter-example paths are relative to
    :arg name: dataset name
    """
    entries = []
    for record in records:
        for relpath in record.counterexamples:
            path = os.path.join(out_dir, relpath)
            if not os.path.exists(path):
                raise FileNotFoundError(f"Counter-example not found: {path}")
            ce, annotations = load_counterexample(path)
            image_id = os.path.splitext(os.path.basename(relpath))[0]
            entries.append(DatasetEntry(image_id, ce.x_adv, annotations, ce.source_id))

    kinds = sorted({record.kind for record in records})
    logger.info("Assembled %d counter-example(s) into %s", len(entries), name)
    return DatasetManifest(
        name=name,
        variant=ADVERSARIAL,
        entries=entries,
        metadata={"properties": kinds, "records": len(records)},
    )
