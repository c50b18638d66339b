""" """

# Standard library modules.
import json

# Third party modules.
import pytest

# Local modules.
from rosar.rcsetup import (
    rcParams,
    rc_context,
    rc_file,
    read_config,
    RcParams,
    defaultParams,
    _default_rc_params,
)
from rosar.pgd import AttackConfig
from rosar.training import TrainConfig

# Globals and constants variables.


def test_defaults():
    params = _default_rc_params()
    for key, (default, _converter) in defaultParams.items():
        if key == "seed":
            continue
        assert params[key] == default


def test_rc_context_restores():
    before = rcParams["pgd.steps"]
    with rc_context({"pgd.steps": 3}):
        assert rcParams["pgd.steps"] == 3
        assert AttackConfig().steps == 3
    assert rcParams["pgd.steps"] == before


def test_rc_context_restores_on_error():
    before = rcParams["train.lr"]
    with pytest.raises(RuntimeError):
        with rc_context({"train.lr": 0.5}):
            raise RuntimeError("boom")
    assert rcParams["train.lr"] == before


def test_explicit_argument_overrides_default():
    with rc_context({"train.epochs": 4}):
        assert TrainConfig().epochs == 4
        assert TrainConfig(epochs=2).epochs == 2


def test_unknown_key():
    with pytest.raises(KeyError):
        rcParams["pgd.bogus"] = 1


@pytest.mark.parametrize(
    "key,value",
    [
        ("pgd.steps", 0),
        ("property.xi_obj", 1.0),
        ("property.xi_obj", 0.0),
        ("search.p1.direction", "sideways"),
        ("search.selection", "best"),
        ("pgd.time_limit", -1.0),
        ("patch.scale", 0.0),
        ("finetune.epochs", []),
    ],
)
def test_invalid_value(key, value):
    params = RcParams()
    with pytest.raises(ValueError, match=key):
        params[key] = value


@pytest.mark.parametrize(
    "key,value,expected",
    [
        ("pgd.time_limit", None, None),
        ("pgd.time_limit", "2.5", 2.5),
        ("search.p2.direction", "LOW_EPS_UNSAFE", "low_eps_unsafe"),
        ("finetune.epochs", "20,5,10,5", [5, 10, 20]),
        ("finetune.epochs", [15, 5], [5, 15]),
        ("workers", "3", 3),
    ],
)
def test_converted_value(key, value, expected):
    params = RcParams()
    params[key] = value
    assert params[key] == expected


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("ROSAR_SEED", "42")
    assert _default_rc_params()["seed"] == 42


def test_rc_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"version": 1, "params": {"search.max_iter": 7}}))

    with rc_context():
        config = rc_file(str(path))
        assert rcParams["search.max_iter"] == 7
        assert config["version"] == 1
    assert rcParams["search.max_iter"] == defaultParams["search.max_iter"][0]


def test_read_config_missing_version(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"params": {}}))

    with pytest.raises(KeyError, match="version"):
        read_config(str(path))


def test_read_config_bad_version(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"version": 99}))

    with pytest.raises(ValueError, match="version"):
        read_config(str(path))


def test_read_config_invalid_json(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json")

    with pytest.raises(ValueError, match="invalid JSON"):
        read_config(str(path))
