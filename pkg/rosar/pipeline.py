"""
End-to-end robustness pipeline driven by a JSON configuration.

Stages, in order:

    1. generate the datasets
    2. train the original detector (and the patch surrogate)
    3. search the robustness thresholds of the original detector
    4. assemble the counter-example datasets, train the patch and build the
       patched dataset
    5. fine-tune the original detector on every adversarial dataset
    6. search the thresholds of the fine-tuned detectors
    7. evaluate every detector on the configured datasets
    8. write ``robustness.csv`` and ``summary.json``

Each stage writes its outputs into its own directory and finishes with a
``run_manifest.json``. A stage whose manifest exists is not run again.

Minimal configuration::

   {
     "version": 1,
     "seed": 7,
     "datasets": {"train": {"variant": "clean", "count": 10, "seed": 1}}
   }

Optional keys: ``params`` (rcParams overrides), ``models``
(``original_seed``, ``surrogate_seed``, and ``original_weights`` or
``surrogate_weights`` to start from a weight file instead of training),
``properties``, ``patch``, ``search_dataset`` and ``evaluate`` (dataset names).
"""

__all__ = ["REQUIRED_KEYS", "StageError", "validate_config", "Pipeline"]

# Standard library modules.
import datetime
import logging
import os
import time

# Third party modules.

# Local modules.
from rosar import __version__
from rosar.rcsetup import rcParams, rc_context, CONFIG_VERSION
from rosar.detector import DetectorConfig, init_model, save_model, load_model
from rosar.sonar import VARIANTS, generate_dataset, write_dataset, read_dataset
from rosar.properties import P1, P2
from rosar.bound_search import (
    SearchConfig,
    binary_search_bound,
    write_records,
    read_records,
    assemble_adv_dataset,
)
from rosar.patch import (
    train_patch,
    save_patch,
    load_patch,
    build_patch_dataset,
    transfer_report,
)
from rosar.training import TrainConfig, train, finetune_sweep
from rosar.metrics import evaluate, report
from rosar.fileio import write_json, read_json

# Globals and constants variables.
logger = logging.getLogger(__name__)

REQUIRED_KEYS = ["version", "seed", "datasets"]

RUN_MANIFEST = "run_manifest.json"
RUN_MANIFEST_VERSION = 1

ORIGINAL = "original"
SURROGATE = "surrogate"
PATCH = "patch"


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def _timestamp():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_run_manifest(out_dir, command, params, inputs=(), outputs=(), started=None,
                       extra=None):
    """
    Writes ``run_manifest.json`` in *out_dir*: the command, its resolved
    parameters, the current rcParams, inputs, outputs, the package version and
    the wall-clock time.
    """
    finished = time.time()
    manifest = {
        "format_version": RUN_MANIFEST_VERSION,
        "command": command,
        "params": params,
        "rc_params": dict(rcParams),
        "seed": rcParams["seed"],
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "finished": _timestamp(),
        "wall_clock": None if started is None else finished - started,
    }
    if extra:
        manifest.update(extra)
    write_json(os.path.join(out_dir, RUN_MANIFEST), manifest)


def validate_config(config):
    """
    Checks the required keys of a pipeline configuration.

    :raises KeyError: naming the missing key
    """
    for key in REQUIRED_KEYS:
        if key not in config:
            raise KeyError(key)
    if config["version"] != CONFIG_VERSION:
        raise ValueError(f"Unsupported configuration version: {config['version']!r}")

    datasets = config["datasets"]
    if "train" not in datasets:
        raise KeyError("datasets.train")
    for name, spec in datasets.items():
        for key in ("variant", "count"):
            if key not in spec:
                raise KeyError(f"datasets.{name}.{key}")
        if spec["variant"] not in VARIANTS:
            raise ValueError(
                f"Unknown variant for dataset {name}: {spec['variant']}. "
                f"Valid variants: {', '.join(VARIANTS)}"
            )
    for kind in config.get("properties", [P1, P2]):
        if kind not in (P1, P2):
            raise ValueError(f"Unknown property: {kind}. Valid properties: p1, p2")


class Pipeline:
    """
    Runs the stages of a configuration into *out_dir*.

    :arg config: parsed configuration
    :arg out_dir: root output directory
    :arg workers: attack and evaluation threads (default: rcParams['workers'])
    :arg progress: show progress bars
    """

    def __init__(self, config, out_dir, workers=None, progress=False):
        validate_config(config)
        self.config = config
        self.out_dir = out_dir
        self.workers = workers
        self.progress = progress
        self.completed = []
        self.skipped = []

    # Paths

    def _path(self, *parts):
        return os.path.join(self.out_dir, *parts)

    def dataset_dir(self, name):
        return self._path("data", name)

    def model_path(self, model_id):
        return self._path("models", model_id + ".weights")

    def search_dir(self, model_id, kind):
        return self._path("search", f"{model_id}-{kind}")

    def adv_dir(self, source):
        return self._path("adv", source)

    # Settings

    @property
    def seed(self):
        return int(self.config["seed"])

    @property
    def properties(self):
        return list(self.config.get("properties", [P1, P2]))

    @property
    def patch_enabled(self):
        return bool(self.config.get("patch", True))

    @property
    def search_dataset(self):
        return self.config.get("search_dataset", "train")

    @property
    def eval_datasets(self):
        return list(self.config.get("evaluate", sorted(self.config["datasets"])))

    @property
    def sweep_epochs(self):
        epochs = set(rcParams["finetune.epochs"])
        epochs.add(rcParams["finetune.selected_epochs"])
        return sorted(epochs)

    @property
    def adv_sources(self):
        sources = list(self.properties)
        if self.patch_enabled:
            sources.append(PATCH)
        return sources

    def retrained_id(self, source, epochs=None):
        if epochs is None:
            epochs = rcParams["finetune.selected_epochs"]
        return f"{source}-e{epochs}"

    # Execution

    def run(self):
        """
        Runs every stage that is not up to date.

        :raises StageError: naming the failing stage
        """
        params = dict(self.config.get("params", {}))
        params["seed"] = self.seed
        with rc_context(params):
            if self.workers is None:
                self.workers = rcParams["workers"]
            for name, directory, func in self._stages():
                self._run_stage(name, directory, func)
        return self.completed

    def _run_stage(self, name, directory, func):
        if os.path.exists(os.path.join(directory, RUN_MANIFEST)):
            logger.info("Stage %s is up to date", name)
            self.skipped.append(name)
            return

        logger.info("Running stage %s", name)
        started = time.time()
        os.makedirs(directory, exist_ok=True)
        try:
            params, inputs, outputs, extra = func(directory)
        except Exception as ex:
            raise StageError(name, ex) from ex
        write_run_manifest(directory, f"pipeline:{name}", params, inputs, outputs, started, extra)
        self.completed.append(name)

    def _stages(self):
        for name in sorted(self.config["datasets"]):
            yield f"data:{name}", self.dataset_dir(name), self._stage_data(name)

        yield "train", self._path("models", ORIGINAL), self._stage_train(ORIGINAL)
        if self.patch_enabled:
            yield "train-surrogate", self._path("models", SURROGATE), self._stage_train(SURROGATE)

        for kind in self.properties:
            yield (
                f"search:{ORIGINAL}-{kind}",
                self.search_dir(ORIGINAL, kind),
                self._stage_search(ORIGINAL, kind),
            )
            yield f"adv:{kind}", self.adv_dir(kind), self._stage_adv(kind)

        if self.patch_enabled:
            yield "train-patch", self._path(PATCH), self._stage_patch()
            yield f"adv:{PATCH}", self.adv_dir(PATCH), self._stage_patch_dataset()

        for source in self.adv_sources:
            yield f"retrain:{source}", self._path("models", source), self._stage_retrain(source)

        for source in self.adv_sources:
            model_id = self.retrained_id(source)
            for kind in self.properties:
                yield (
                    f"search:{model_id}-{kind}",
                    self.search_dir(model_id, kind),
                    self._stage_search(model_id, kind),
                )

        yield "evaluate", self._path("eval"), self._stage_evaluate()
        yield "report", self._path("report"), self._stage_report()

    # Stages

    def _stage_data(self, name):
        def run(directory):
            spec = self.config["datasets"][name]
            config = DetectorConfig()
            seed = int(spec.get("seed", self.seed))
            manifest = generate_dataset(
                spec["variant"],
                int(spec["count"]),
                seed,
                name=name,
                h=config.height,
                w=config.width,
                c=config.channels,
            )
            write_dataset(manifest, directory)
            return dict(spec, seed=seed), [], [directory], None

        return run

    def _model_seed(self, role):
        models = self.config.get("models", {})
        default = self.seed if role == ORIGINAL else self.seed + 1
        return int(models.get(f"{role}_seed", default))

    def _stage_train(self, role):
        def run(directory):
            path = self.model_path(role)
            weights = self.config.get("models", {}).get(f"{role}_weights")
            if weights is not None:
                model = load_model(weights)
                save_model(model, path)
                logger.info("Model %s loaded from %s, training skipped", role, weights)
                return {"weights": weights}, [weights], [path], None

            dataset = read_dataset(self.dataset_dir("train"))
            model = init_model(DetectorConfig(), self._model_seed(role))
            cfg = TrainConfig()
            model = train(model, dataset, cfg, progress=self.progress)
            save_model(model, path)
            params = {"model_seed": model.seed, "train": cfg.to_dict()}
            return params, [self.dataset_dir("train")], [path], None

        return run

    def _stage_search(self, model_id, kind):
        def run(directory):
            path = self.model_path(model_id)
            if not os.path.exists(path):
                logger.warning("No model %s, search skipped", model_id)
                write_records(os.path.join(directory, "records.jsonl"), [])
                return {"kind": kind}, [], [], {"skipped": f"missing model {model_id}"}

            model = load_model(path)
            dataset = read_dataset(self.dataset_dir(self.search_dataset))
            cfg = SearchConfig(kind)
            records = binary_search_bound(
                model,
                dataset,
                cfg,
                out_dir=directory,
                workers=self.workers,
                model_id=model_id,
                progress=self.progress,
            )
            records_path = os.path.join(directory, "records.jsonl")
            write_records(records_path, records)
            return cfg.to_dict(), [path, self.dataset_dir(self.search_dataset)], [records_path], None

        return run

    def _stage_adv(self, kind):
        def run(directory):
            search_dir = self.search_dir(ORIGINAL, kind)
            records = read_records(os.path.join(search_dir, "records.jsonl"))
            manifest = assemble_adv_dataset(records, search_dir, f"{kind}-adversarial")
            write_dataset(manifest, directory)
            return {"kind": kind}, [search_dir], [directory], {"entries": len(manifest)}

        return run

    def _stage_patch(self):
        def run(directory):
            dataset = read_dataset(self.dataset_dir("train"))
            surrogate = load_model(self.model_path(SURROGATE))
            victim = load_model(self.model_path(ORIGINAL))
            patch = train_patch(surrogate, dataset, progress=self.progress)
            prefix = os.path.join(directory, "patch")
            save_patch(patch, prefix)

            transfer = transfer_report(patch, surrogate, victim, dataset)
            transfer_path = os.path.join(directory, "transfer.json")
            write_json(transfer_path, transfer)
            params = {k: v for k, v in patch.metadata.items() if k != "loss_history"}
            inputs = [self.model_path(SURROGATE), self.model_path(ORIGINAL)]
            return params, inputs, [prefix + ".json", transfer_path], None

        return run

    def _stage_patch_dataset(self):
        def run(directory):
            dataset = read_dataset(self.dataset_dir("train"))
            patch = load_patch(self._path(PATCH, "patch"))
            manifest = build_patch_dataset(dataset, patch, workers=self.workers)
            write_dataset(manifest, directory)
            return {"scale": rcParams["patch.scale"]}, [self._path(PATCH)], [directory], None

        return run

    def _stage_retrain(self, source):
        def run(directory):
            adv = read_dataset(self.adv_dir(source))
            params = {"epochs": self.sweep_epochs, "lr_factor": rcParams["finetune.lr_factor"]}
            if len(adv) == 0:
                logger.warning("Adversarial dataset %s is empty, fine-tuning skipped", source)
                return params, [self.adv_dir(source)], [], {"skipped": "empty dataset"}

            model = load_model(self.model_path(ORIGINAL))
            snapshots = finetune_sweep(model, adv, self.sweep_epochs, progress=self.progress)
            outputs = []
            for epochs, snapshot in sorted(snapshots.items()):
                path = self.model_path(self.retrained_id(source, epochs))
                save_model(snapshot, path)
                outputs.append(path)
            return params, [self.adv_dir(source)], outputs, None

        return run

    def _model_ids(self):
        model_ids = [ORIGINAL]
        for source in self.adv_sources:
            for epochs in self.sweep_epochs:
                model_id = self.retrained_id(source, epochs)
                if os.path.exists(self.model_path(model_id)):
                    model_ids.append(model_id)
        return model_ids

    def _stage_evaluate(self):
        def run(directory):
            datasets = {name: read_dataset(self.dataset_dir(name)) for name in self.eval_datasets}
            evaluations = {}
            for model_id in self._model_ids():
                model = load_model(self.model_path(model_id))
                evaluations[model_id] = {}
                for name, dataset in datasets.items():
                    if dataset.box_count == 0:
                        logger.warning("Dataset %s has no box, evaluation skipped", name)
                        continue
                    result = evaluate(model, dataset, workers=self.workers)
                    evaluations[model_id][name] = result.to_dict()
            path = os.path.join(directory, "evaluation.json")
            write_json(path, evaluations)
            return {"datasets": self.eval_datasets}, [], [path], None

        return run

    def _stage_report(self):
        def run(directory):
            records = []
            model_ids = [ORIGINAL] + [self.retrained_id(s) for s in self.adv_sources]
            for model_id in model_ids:
                for kind in self.properties:
                    path = os.path.join(self.search_dir(model_id, kind), "records.jsonl")
                    records.extend(read_records(path))

            evaluations = read_json(os.path.join(self._path("eval"), "evaluation.json"))
            extra = {}
            transfer_path = self._path(PATCH, "transfer.json")
            if os.path.exists(transfer_path):
                extra["patch_transfer"] = read_json(transfer_path)
            report(records, directory, evaluations, baseline_model=ORIGINAL, extra=extra)
            outputs = [os.path.join(directory, "robustness.csv"),
                       os.path.join(directory, "summary.json")]
            return {"models": model_ids}, [], outputs, None

        return run
