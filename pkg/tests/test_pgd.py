""" """

# Standard library modules.
import itertools
import os
import types

# Third party modules.
import numpy as np

import pytest

# Local modules.
from rosar.autodiff import Tensor, backward
from rosar.properties import P1, P2, PropertySpec
from rosar.sonar import Annotation
from rosar.pgd import (
    AttackConfig,
    attack_margin,
    margin_from_scores,
    run_pgd,
    pgd,
    save_counterexample,
    load_counterexample,
    replay_counterexample,
)

# Globals and constants variables.


@pytest.fixture
def config():
    return AttackConfig(steps=10, restarts=2, time_limit=None, seed=0)


def test_margin_boundary():
    spec = PropertySpec(P1, 0.05, (0, 0), 0, xi_obj=0.25)
    assert margin_from_scores(0.25, (0.6, 0.4), spec) == pytest.approx(0.0)


def test_margin_class_gap():
    spec = PropertySpec(P1, 0.05, (0, 0), 0, xi_obj=0.25)
    assert margin_from_scores(0.99, (0.4, 0.6), spec) == pytest.approx(-0.2)


def test_attack_margin_matches_scores(constant_model, gray_image):
    spec = PropertySpec(P1, 0.05, (2, 5), 0, xi_obj=0.25)
    margin = attack_margin(constant_model, gray_image, spec).item()
    scores = np.exp([3.0, 0.0]) / np.exp([3.0, 0.0]).sum()
    objectness = 1.0 / (1.0 + np.exp(-20.0))
    expected = min(objectness - 0.25, scores[0] - scores[1])
    assert margin == pytest.approx(expected)


def test_attack_margin_gradient(pixel_model, gray_image):
    spec = PropertySpec(P1, 0.05, (1, 2), 0)
    x = Tensor(gray_image, requires_grad=True)
    backward(attack_margin(pixel_model, x, spec))

    assert x.grad[8, 16, 0] > 0.0
    mask = np.ones(x.grad.shape, dtype=bool)
    mask[8, 16, 0] = False
    np.testing.assert_array_equal(x.grad[mask], 0.0)

    h = 1e-6
    plus = gray_image.copy()
    plus[8, 16, 0] += h
    minus = gray_image.copy()
    minus[8, 16, 0] -= h
    numeric = (
        attack_margin(pixel_model, plus, spec).item()
        - attack_margin(pixel_model, minus, spec).item()
    ) / (2 * h)
    assert x.grad[8, 16, 0] == pytest.approx(numeric, rel=1e-3)


def test_pgd_singleton_region(pixel_model, gray_image, config):
    spec = PropertySpec(P1, 0.0, (0, 0), 0)
    result = run_pgd(pixel_model, gray_image, spec, config)
    assert not result.found
    assert not result.deadline_fired
    assert result.steps == 0


def test_pgd_invulnerable_model(constant_model, gray_image, config):
    for epsilon in (0.05, 0.5, 0.99):
        spec = PropertySpec(P1, epsilon, (4, 4), 0)
        assert pgd(constant_model, gray_image, spec, config) is None


def test_pgd_finds_counterexample(pixel_model, gray_image, config):
    spec = PropertySpec(P1, 0.5, (0, 0), 0)
    ce = pgd(pixel_model, gray_image, spec, config, source_id="gray")

    assert ce is not None
    assert ce.margin < 0.0
    assert ce.epsilon == 0.5
    assert ce.source_id == "gray"
    assert ce.x_adv[0, 0, 0] < 0.39635
    assert replay_counterexample(pixel_model, ce) == (True, True)


def test_pgd_safe_below_threshold(pixel_model, gray_image, config):
    spec = PropertySpec(P1, 0.15, (0, 0), 0)
    assert pgd(pixel_model, gray_image, spec, config) is None


def test_pgd_p2_lines(pixel_model, gray_image, config):
    unsafe = PropertySpec(P2, 0.6, (0, 0), 0, lines=(0, 1))
    ce = pgd(pixel_model, gray_image, unsafe, config)
    assert ce is not None
    np.testing.assert_array_equal(ce.x_adv[2:], gray_image[2:])

    missed = PropertySpec(P2, 0.6, (0, 0), 0, lines=(5, 6))
    assert pgd(pixel_model, gray_image, missed, config) is None


def test_pgd_deterministic(pixel_model, gray_image, config):
    spec = PropertySpec(P1, 0.5, (1, 1), 0)
    a = pgd(pixel_model, gray_image, spec, config)
    b = pgd(pixel_model, gray_image, spec, config)
    np.testing.assert_array_equal(a.x_adv, b.x_adv)
    assert a.steps_used == b.steps_used


def test_pgd_deadline(monkeypatch, constant_model, gray_image):
    clock = itertools.count(0.0, 1.0)
    monkeypatch.setattr("rosar.pgd.time", types.SimpleNamespace(monotonic=lambda: next(clock)))
    config = AttackConfig(steps=50, restarts=1, time_limit=2.5, seed=0)
    spec = PropertySpec(P1, 0.5, (0, 0), 0)

    result = run_pgd(constant_model, gray_image, spec, config)

    assert result.deadline_fired
    assert not result.found
    assert result.steps < 50


def test_pgd_default_step_size(pixel_model, gray_image):
    config = AttackConfig(steps=10, restarts=1, step_factor=2.5, time_limit=None, seed=0)
    spec = PropertySpec(P1, 0.2, (0, 0), 0)
    result = run_pgd(pixel_model, gray_image, spec, config)
    # width of every pixel is 2 * 0.2 * 0.5
    assert result.step_size == pytest.approx(2.5 * 0.2 / 10)


@pytest.mark.parametrize(
    "kwargs",
    [{"steps": 0}, {"restarts": 0}, {"time_limit": 0.0}, {"step_size": -1.0}],
)
def test_attack_config_invalid(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


def test_save_load_counterexample(tmp_path, pixel_model, gray_image, config):
    spec = PropertySpec(P2, 0.6, (0, 0), 0, lines=(0,))
    ce = pgd(pixel_model, gray_image, spec, config, source_id="gray-0")
    annotations = [Annotation(0, 0.5, 0.5, 0.25, 0.25)]

    path = save_counterexample(ce, str(tmp_path), "ce", annotations, {"iteration": 3})

    for suffix in (".pgm", ".jsonl", ".npy", ".orig.npy", ".json"):
        assert os.path.exists(str(tmp_path / ("ce" + suffix)))
    loaded, loaded_annotations = load_counterexample(path)
    np.testing.assert_array_equal(loaded.x_adv, ce.x_adv)
    np.testing.assert_array_equal(loaded.x_orig, ce.x_orig)
    assert loaded.spec == ce.spec
    assert loaded.source_id == "gray-0"
    assert loaded_annotations == annotations
    assert replay_counterexample(pixel_model, loaded) == (True, True)


def test_load_counterexample_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_counterexample(str(tmp_path / "missing.json"))
