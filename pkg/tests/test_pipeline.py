""" """

# Standard library modules.
import copy
import json
import os

# Third party modules.
import pytest

# Local modules.
from rosar.pgd import load_counterexample, replay_counterexample
from rosar.detector import load_model, save_model
from rosar.bound_search import read_records
from rosar.rcsetup import read_config
from rosar.pipeline import Pipeline, StageError, validate_config

# Globals and constants variables.
BENCHMARK_CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "benchmark.json")

TRAIN_COUNT = 4

SMOKE_CONFIG = {
    "version": 1,
    "seed": 3,
    "datasets": {
        "train": {"variant": "clean", "count": TRAIN_COUNT, "seed": 1},
        "noisy": {"variant": "noisy", "count": 2, "seed": 2},
    },
    "properties": ["p1", "p2"],
    "patch": True,
    "params": {
        "pgd.time_limit": None,
        "pgd.steps": 3,
        "pgd.restarts": 1,
        "search.max_iter": 2,
        "search.selection": "top",
        # every detection of the pixel detector falls below xi_obj at eps = 0.675
        "search.p1.upper": 0.9,
        "train.epochs": 1,
        "finetune.epochs": [1],
        "finetune.selected_epochs": 1,
        "patch.epochs": 1,
    },
}


@pytest.fixture
def config(tmp_path, pixel_model):
    config = copy.deepcopy(SMOKE_CONFIG)
    path = str(tmp_path / "pixel.weights")
    save_model(pixel_model, path)
    config["models"] = {"original_weights": path}
    return config


def _read(path):
    with open(path, "rb") as fp:
        return fp.read()


def _read_summary(out):
    with open(os.path.join(out, "report", "summary.json"), "r", encoding="utf-8") as fp:
        return json.load(fp)


def test_validate_config_missing_train(config):
    del config["datasets"]["train"]
    with pytest.raises(KeyError, match="datasets.train"):
        validate_config(config)


def test_validate_config_missing_key(config):
    del config["seed"]
    with pytest.raises(KeyError, match="seed"):
        validate_config(config)


def test_validate_config_invalid(config):
    config["datasets"]["noisy"]["variant"] = "foggy"
    with pytest.raises(ValueError, match="Unknown variant"):
        validate_config(config)

    config["datasets"]["noisy"]["variant"] = "noisy"
    config["properties"] = ["p3"]
    with pytest.raises(ValueError, match="Unknown property"):
        validate_config(config)


def test_validate_config_version(config):
    config["version"] = 2
    with pytest.raises(ValueError, match="version"):
        validate_config(config)


def test_stage_error(tmp_path, config):
    del config["models"]
    config["datasets"]["train"]["count"] = 0
    pipeline = Pipeline(config, str(tmp_path))

    with pytest.raises(StageError, match="stage 'train' failed"):
        pipeline.run()

    assert "data:train" in pipeline.completed


def test_stage_train_from_weights(tmp_path, config, pixel_model):
    pipeline = Pipeline(config, str(tmp_path / "run"))
    directory = str(tmp_path / "stage")
    os.makedirs(directory)

    params, inputs, outputs, _extra = pipeline._stage_train("original")(directory)

    assert params == {"weights": config["models"]["original_weights"]}
    assert outputs == [pipeline.model_path("original")]
    loaded = load_model(outputs[0])
    for name, tensor in pixel_model.weights.items():
        assert loaded.weights[name].data == pytest.approx(tensor.data)


def test_stage_train_missing_weights(tmp_path, config):
    config["models"]["original_weights"] = str(tmp_path / "missing.weights")
    config["datasets"]["train"]["count"] = 1
    pipeline = Pipeline(config, str(tmp_path / "run"))

    with pytest.raises(StageError, match="stage 'train' failed"):
        pipeline.run()


@pytest.mark.slow
def test_pipeline_smoke(tmp_path, config):
    out = str(tmp_path / "run")
    pipeline = Pipeline(config, out)
    completed = pipeline.run()

    assert completed[0] == "data:noisy"
    assert completed[-1] == "report"
    assert pipeline.skipped == []

    summary = _read_summary(out)
    assert summary["baseline_model"] == "original"
    assert "train" in summary["detection"]["original"]
    assert set(summary["detection"]["original"]) <= {"train", "noisy"}
    assert "patch_transfer" in summary
    assert summary["robustness"]["original"]["p1"]["count"] == TRAIN_COUNT
    assert os.path.exists(os.path.join(out, "report", "robustness.csv"))

    original = load_model(os.path.join(out, "models", "original.weights"))
    counts = {}
    for kind in ("p1", "p2"):
        search_dir = os.path.join(out, "search", f"original-{kind}")
        records = read_records(os.path.join(search_dir, "records.jsonl"))
        ces = [relpath for record in records for relpath in record.counterexamples]
        counts[kind] = (len(records), len(ces))
        for record in records:
            assert record.model_id == "original"
        for relpath in ces:
            ce, _ = load_counterexample(os.path.join(search_dir, relpath))
            assert replay_counterexample(original, ce) == (True, True)

    assert counts["p1"][0] == TRAIN_COUNT
    assert counts["p1"][1] >= TRAIN_COUNT
    assert counts["p2"][0] == TRAIN_COUNT
    assert os.path.exists(os.path.join(out, "models", "p1-e1.weights"))

    rerun = Pipeline(config, out)
    assert rerun.run() == []
    assert rerun.skipped == completed


@pytest.mark.slow
def test_pipeline_reproducible(tmp_path, config):
    config["properties"] = ["p1"]
    config["patch"] = False
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")

    Pipeline(config, a).run()
    Pipeline(config, b).run()

    rows = _read(os.path.join(a, "report", "robustness.csv")).decode("utf-8").splitlines()
    assert len(rows) > TRAIN_COUNT
    for name in ("robustness.csv", "summary.json"):
        assert _read(os.path.join(a, "report", name)) == _read(os.path.join(b, "report", name))
    assert _read(os.path.join(a, "models", "p1-e1.weights")) == _read(
        os.path.join(b, "models", "p1-e1.weights")
    )


@pytest.mark.slow
def test_pipeline_benchmark_direction(tmp_path):
    config = read_config(BENCHMARK_CONFIG)
    out = str(tmp_path / "benchmark")

    Pipeline(config, out).run()

    summary = _read_summary(out)
    original = summary["robustness"]["original"]
    assert original["p1"]["count"] >= 30
    assert original["p2"]["count"] >= 30
    assert summary["deltas"]["p1-e15"]["p1"]["mean"] >= 0.0
    assert summary["deltas"]["p2-e15"]["p2"]["mean"] <= 0.0
