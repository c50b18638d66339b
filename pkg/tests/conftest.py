""" """

# Standard library modules.

# Third party modules.
import numpy as np

import pytest

# Local modules.
from rosar.autodiff import Tensor
from rosar.detector import DetectorConfig, init_model
from rosar.sonar import Annotation, DatasetEntry, DatasetManifest

# Globals and constants variables.
PIXEL_OFFSET = 10.0
PIXEL_GAIN = 20.0
PIXEL_LEVEL = 0.45

# Pixel value below which the pixel detector loses its objectness (xi_obj = 0.25)
PIXEL_CUTOFF = 0.39635


def _set(model, name, values):
    model.weights[name] = Tensor(values, requires_grad=True)


def _constant_model(obj_bias=20.0, cls_bias=(3.0, 0.0)):
    model = init_model(DetectorConfig(height=64, width=64, channels=1, num_classes=2), seed=0)
    for name, tensor in model.weights.items():
        _set(model, name, np.zeros(tensor.shape))
    _set(model, "head.obj.bias", np.array([obj_bias]))
    _set(model, "head.cls.bias", np.array(cls_bias))
    return model


@pytest.fixture
def constant_model():
    """
    Detector whose outputs do not depend on the input: every cell has
    objectness sigmoid(20) and class 0 wins.
    """
    return _constant_model()


@pytest.fixture
def pixel_model():
    """
    Detector whose objectness logit at cell (i, j) is close to
    ``20 * (x[8i, 8j] - 0.45)``. Class 0 always wins.
    """
    model = _constant_model(cls_bias=(2.0, 0.0))
    for name in ("backbone.0", "backbone.1", "backbone.2", "backbone.3"):
        weight = np.zeros(model.weights[name + ".weight"].shape)
        weight[1, 1, 0, 0] = 1.0
        _set(model, name + ".weight", weight)
    bias = np.zeros(8)
    bias[0] = PIXEL_OFFSET
    _set(model, "backbone.0.bias", bias)

    weight = np.zeros(model.weights["head.obj.weight"].shape)
    weight[0, 0, 0, 0] = PIXEL_GAIN
    _set(model, "head.obj.weight", weight)
    _set(model, "head.obj.bias", np.array([-PIXEL_GAIN * (PIXEL_OFFSET + PIXEL_LEVEL)]))
    return model


@pytest.fixture
def gray_image():
    return np.full((64, 64, 1), 0.5)


@pytest.fixture
def gray_dataset(gray_image):
    entries = [
        DatasetEntry(f"gray-{k}", gray_image.copy(), [Annotation(0, 0.5, 0.5, 0.25, 0.25)])
        for k in range(2)
    ]
    return DatasetManifest("gray", "clean", entries, seed=0)
