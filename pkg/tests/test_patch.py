""" """

# Standard library modules.
import os

# Third party modules.
import numpy as np

import pytest

# Local modules.
from rosar.sonar import Annotation
from rosar.patch import (
    Patch,
    gray_patch,
    apply_patch,
    tv_loss,
    train_patch,
    build_patch_dataset,
    mean_gt_objectness,
    transfer_report,
    save_patch,
    load_patch,
)

# Globals and constants variables.


@pytest.fixture
def trained_patch(pixel_model, gray_dataset):
    return train_patch(
        pixel_model,
        gray_dataset,
        size=16,
        epochs=3,
        w_obj=1.0,
        w_tv=0.5,
        step_size=0.1,
        scale=0.4,
    )


def test_apply_patch_no_annotation():
    image = np.random.default_rng(0).uniform(size=(64, 64, 1))
    out = apply_patch(image, [], gray_patch(8), scale=0.4)
    np.testing.assert_array_equal(out, image)


def test_apply_patch_geometry():
    image = np.ones((64, 64, 1))
    patch = Patch(np.zeros((8, 8, 1)))
    annotation = Annotation(0, cx=0.5, cy=0.5, w=0.5, h=0.5)

    out = apply_patch(image, [annotation], patch, scale=0.5)

    expected = np.ones((64, 64, 1))
    expected[24:40, 24:40] = 0.0
    np.testing.assert_array_equal(out, expected)


def test_apply_patch_uses_smaller_side():
    image = np.ones((64, 64, 1))
    patch = Patch(np.zeros((4, 4, 1)))
    annotation = Annotation(0, cx=0.5, cy=0.5, w=0.25, h=0.75)

    out = apply_patch(image, [annotation], patch, scale=0.5)

    assert (out == 0.0).sum() == 8 * 8


def test_apply_patch_footprint_count_oracle():
    rng = np.random.default_rng(5)
    patch = Patch(np.zeros((8, 8, 1)))
    for _ in range(20):
        image = rng.uniform(0.6, 1.0, size=(64, 64, 1))
        scale = float(rng.uniform(0.2, 0.6))
        annotations = []
        expected = 0
        for cx, cy in ((16, 16), (48, 16), (16, 48), (48, 48)):
            w, h = rng.uniform(4.0, 24.0, size=2)
            annotations.append(
                Annotation(
                    0,
                    (cx + rng.uniform(-2.0, 2.0)) / 64.0,
                    (cy + rng.uniform(-2.0, 2.0)) / 64.0,
                    w / 64.0,
                    h / 64.0,
                )
            )
            side = max(int(round(scale * min(w, h))), 1)
            expected += side * side

        out = apply_patch(image, annotations, patch, scale=scale)

        assert int(np.sum(out != image)) == expected


def test_train_patch_loss_decreases(pixel_model, gray_dataset):
    patch = train_patch(
        pixel_model,
        gray_dataset,
        size=16,
        epochs=5,
        w_obj=1.0,
        w_tv=0.5,
        step_size=0.02,
        scale=0.4,
    )

    history = patch.metadata["loss_history"]
    assert len(history) == 5
    plateaus = sum(1 for a, b in zip(history, history[1:]) if b >= a)
    assert plateaus <= 1
    assert history[-1] < history[0]


def test_apply_patch_degenerate_box():
    image = np.ones((64, 64, 1))
    annotation = Annotation(0, cx=0.5, cy=0.5, w=1.0 / 64.0, h=0.5)

    with pytest.warns(UserWarning, match="patch skipped"):
        out = apply_patch(image, [annotation], gray_patch(8), scale=0.5)

    np.testing.assert_array_equal(out, image)


def test_apply_patch_channel_mismatch():
    annotation = Annotation(0, 0.5, 0.5, 0.5, 0.5)
    with pytest.raises(ValueError, match="channels"):
        apply_patch(np.ones((64, 64, 1)), [annotation], gray_patch(8, channels=3))


@pytest.mark.parametrize("scale", [0.0, 1.5])
def test_apply_patch_invalid_scale(scale):
    with pytest.raises(ValueError, match="scale"):
        apply_patch(np.ones((64, 64, 1)), [], gray_patch(8), scale=scale)


def test_patch_validation():
    with pytest.raises(ValueError, match="p, p, c"):
        Patch(np.zeros((4, 5, 1)))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        Patch(np.full((4, 4, 1), 1.5))


def test_tv_loss_constant():
    assert tv_loss(gray_patch(8)).item() == 0.0


def test_tv_loss_checkerboard():
    patch = Patch(np.array([[[0.0], [1.0]], [[1.0], [0.0]]]))
    assert tv_loss(patch).item() == pytest.approx(1.0)


def test_tv_loss_loop_oracle():
    pixels = np.random.default_rng(1).uniform(size=(6, 6, 2))
    total = 0.0
    count = 0
    for i in range(6):
        for j in range(6):
            for c in range(2):
                if j + 1 < 6:
                    total += (pixels[i, j + 1, c] - pixels[i, j, c]) ** 2
                    count += 1
                if i + 1 < 6:
                    total += (pixels[i + 1, j, c] - pixels[i, j, c]) ** 2
                    count += 1
    assert tv_loss(pixels).item() == pytest.approx(total / count, abs=1e-12)


def test_tv_loss_too_small():
    with pytest.raises(ValueError, match="at least 2"):
        tv_loss(np.zeros((1, 1, 1)))


def test_train_patch_zero_epochs(pixel_model, gray_dataset):
    patch = train_patch(pixel_model, gray_dataset, size=8, epochs=0)
    np.testing.assert_array_equal(patch.pixels, 0.5)
    assert patch.metadata["loss_history"] == []
    assert patch.metadata["surrogate_seed"] == pixel_model.seed


def test_train_patch_lowers_objectness(pixel_model, gray_dataset, trained_patch):
    assert trained_patch.pixels.min() >= 0.0
    assert trained_patch.pixels.max() <= 1.0
    assert len(trained_patch.metadata["loss_history"]) == 3

    gray = mean_gt_objectness(pixel_model, gray_dataset, gray_patch(16), scale=0.4)
    patched = mean_gt_objectness(pixel_model, gray_dataset, trained_patch, scale=0.4)
    assert patched < gray


def test_train_patch_empty_dataset(pixel_model, gray_dataset):
    empty = gray_dataset.__class__("empty", "clean", [])
    with pytest.raises(ValueError, match="empty"):
        train_patch(pixel_model, empty, epochs=1)


def test_transfer_report(pixel_model, constant_model, gray_dataset, trained_patch):
    report = transfer_report(trained_patch, pixel_model, constant_model, gray_dataset, scale=0.4)

    assert set(report) == {"surrogate", "victim"}
    assert report["surrogate"]["delta"] < 0.0
    assert report["victim"]["delta"] == pytest.approx(0.0, abs=1e-12)
    assert report["victim"]["seed"] == constant_model.seed


@pytest.mark.parametrize("workers", [1, 2])
def test_build_patch_dataset(gray_dataset, trained_patch, workers):
    patched = build_patch_dataset(gray_dataset, trained_patch, scale=0.4, workers=workers)

    assert patched.variant == "adversarial"
    assert [e.image_id for e in patched] == ["patch-gray-0", "patch-gray-1"]
    assert [e.source_id for e in patched] == ["gray-0", "gray-1"]
    for source, entry in zip(gray_dataset, patched):
        assert entry.annotations == source.annotations
        np.testing.assert_array_equal(
            entry.image, apply_patch(source.image, source.annotations, trained_patch, 0.4)
        )


def test_save_load_patch(tmp_path, trained_patch):
    prefix = str(tmp_path / "patch")
    save_patch(trained_patch, prefix)

    loaded = load_patch(prefix)

    assert os.path.exists(prefix + ".pgm")
    np.testing.assert_array_equal(loaded.pixels, trained_patch.pixels)
    assert loaded.metadata == trained_patch.metadata
