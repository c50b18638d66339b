"""
Micro anchor-free single-stage detector.

A four-layer convolutional backbone reduces a ``h x w x c`` image to a
``g x g`` grid (``g = h / 8``). Three 1x1 heads predict, for every grid cell,
box parameters ``(tx, ty, tw, th)``, an objectness logit and ``N`` class
logits. A cell is a stable identity for the box it predicts, which lets the
safety properties follow "the same bounding box" across perturbed inputs.

Example::

   >>> config = DetectorConfig()
   >>> model = init_model(config, seed=1)
   >>> raw = forward(model, image)
   >>> detections = decode(raw, conf_threshold=0.25)
"""

__all__ = [
    "DetectorConfig",
    "ModelParams",
    "RawGrid",
    "Detection",
    "init_model",
    "forward",
    "decode",
    "decode_cell",
    "nms",
    "iou",
    "assign_cell",
    "box_targets",
    "detection_loss",
    "save_model",
    "load_model",
]

# Standard library modules.
import dataclasses
import json
import logging
import struct
import warnings

# Third party modules.
import numpy as np

# Local modules.
from rosar.rcsetup import rcParams
from rosar.autodiff import (
    Tensor,
    conv2d,
    silu,
    take,
    bce_with_logits,
    softmax_cross_entropy,
)
from rosar.autodiff import _sigmoid, _softmax
from rosar.fileio import atomic_write_bytes

# Globals and constants variables.
logger = logging.getLogger(__name__)

WEIGHTS_FORMAT_VERSION = 1

STRIDE = 8

# name, kernel size, stride, output channels
_BACKBONE = [
    ("backbone.0", 3, 1, 8),
    ("backbone.1", 3, 2, 16),
    ("backbone.2", 3, 2, 32),
    ("backbone.3", 3, 2, 32),
]

# Prior probability of an object used to initialize the objectness bias
_OBJ_PRIOR = 0.01

# Box offsets are kept away from 0 and 1 so that their logits stay finite
_OFFSET_EPS = 0.01


@dataclasses.dataclass(frozen=True)
class DetectorConfig:
    height: int = dataclasses.field(
        default_factory=lambda: rcParams["detector.input_size"]
    )
    width: int = dataclasses.field(
        default_factory=lambda: rcParams["detector.input_size"]
    )
    channels: int = dataclasses.field(
        default_factory=lambda: rcParams["detector.channels"]
    )
    num_classes: int = dataclasses.field(
        default_factory=lambda: rcParams["detector.num_classes"]
    )

    def __post_init__(self):
        if self.height != self.width:
            raise ValueError(
                f"Input must be square, got {self.height} x {self.width}"
            )
        if self.height % STRIDE or self.height <= 0:
            raise ValueError(
                f"Input size must be a positive multiple of {STRIDE}, got {self.height}"
            )
        if self.channels < 1:
            raise ValueError(f"At least one channel is required, got {self.channels}")
        if self.num_classes < 2:
            raise ValueError(f"At least two classes are required, got {self.num_classes}")

    @property
    def grid_size(self):
        return self.height // STRIDE

    @property
    def input_shape(self):
        return (self.height, self.width, self.channels)

    def layer_shapes(self):
        """
        Returns the ordered ``(name, shape)`` pairs of all parameters.
        """
        shapes = []
        cin = self.channels
        for name, k, _stride, cout in _BACKBONE:
            shapes.append((name + ".weight", (k, k, cin, cout)))
            shapes.append((name + ".bias", (cout,)))
            cin = cout
        for name, cout in (("head.box", 4), ("head.obj", 1), ("head.cls", self.num_classes)):
            shapes.append((name + ".weight", (1, 1, cin, cout)))
            shapes.append((name + ".bias", (cout,)))
        return shapes


@dataclasses.dataclass
class ModelParams:
    config: DetectorConfig
    seed: int
    weights: dict

    def parameters(self):
        return list(self.weights.values())

    def copy(self):
        weights = {
            name: Tensor(tensor.data, requires_grad=True)
            for name, tensor in self.weights.items()
        }
        return ModelParams(self.config, self.seed, weights)

    def state(self):
        """
        Returns a copy of the raw parameter arrays.
        """
        return {name: tensor.data.copy() for name, tensor in self.weights.items()}


@dataclasses.dataclass
class RawGrid:
    box: Tensor
    obj: Tensor
    cls: Tensor

    @property
    def grid_size(self):
        return self.box.shape[0]

    @property
    def num_classes(self):
        return self.cls.shape[2]


@dataclasses.dataclass(frozen=True)
class Detection:
    bbox: tuple
    objectness: float
    class_scores: tuple
    cell: tuple

    @property
    def class_argmax(self):
        return int(np.argmax(self.class_scores))


def init_model(config, seed):
    """
    Draws a new set of parameters. Weights are uniform in
    ``[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`` (He initialization), the
    objectness bias encodes a prior of 1% and the other biases are zero.

    :arg config: detector configuration
    :type config: :class:`DetectorConfig`

    :arg seed: random seed (same seed, same parameters)
    :type seed: :class:`int`
    """
    if config.height % STRIDE:
        raise ValueError(f"Input size must be a multiple of {STRIDE}, got {config.height}")

    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in config.layer_shapes():
        if name.endswith(".weight"):
            fan_in = shape[0] * shape[1] * shape[2]
            bound = np.sqrt(6.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        elif name == "head.obj.bias":
            values = np.full(shape, -np.log((1.0 - _OBJ_PRIOR) / _OBJ_PRIOR))
        else:
            values = np.zeros(shape)
        weights[name] = Tensor(values, requires_grad=True)

    logger.debug("Initialized detector with seed %d", seed)
    return ModelParams(config, seed, weights)


def forward(model, image, trainable=False):
    """
    Runs the detector on *image*.

    :arg model: parameters
    :arg image: ``[h, w, c]`` array or :class:`Tensor` (pass a tensor with
        ``requires_grad=True`` to obtain input gradients)
    :arg trainable: record parameter gradients. Leave ``False`` when the
        parameters are shared, for instance during attacks.
    :return: raw head outputs
    :rtype: :class:`RawGrid`
    """
    config = model.config
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.shape != config.input_shape:
        raise ValueError(
            f"Image shape {x.shape} does not match detector input {config.input_shape}"
        )

    if trainable:
        params = model.weights
    else:
        params = {name: Tensor(t.data) for name, t in model.weights.items()}

    for name, k, stride, _cout in _BACKBONE:
        x = conv2d(x, params[name + ".weight"], stride=stride, pad=k // 2)
        x = silu(x + params[name + ".bias"])

    box = conv2d(x, params["head.box.weight"]) + params["head.box.bias"]
    obj = conv2d(x, params["head.obj.weight"]) + params["head.obj.bias"]
    cls = conv2d(x, params["head.cls.weight"]) + params["head.cls.bias"]
    return RawGrid(box, obj, cls)


def decode_cell(raw, cell):
    """
    Decodes the prediction of a single grid cell, without thresholding.
    """
    i, j = cell
    g = raw.grid_size
    if not (0 <= i < g and 0 <= j < g):
        raise ValueError(f"Cell {cell} outside grid of size {g}")
    tx, ty, tw, th = raw.box.data[i, j]
    bbox = (
        (j + float(_sigmoid(tx))) / g,
        (i + float(_sigmoid(ty))) / g,
        float(np.exp(tw)) / g,
        float(np.exp(th)) / g,
    )
    objectness = float(_sigmoid(raw.obj.data[i, j, 0]))
    class_scores = tuple(float(v) for v in _softmax(raw.cls.data[i, j]))
    return Detection(bbox, objectness, class_scores, (int(i), int(j)))


def decode(raw, conf_threshold=None, nms_iou=None):
    """
    Decodes every cell, keeps those with objectness above *conf_threshold*
    and applies greedy non-maximum suppression.

    :arg conf_threshold: objectness threshold
        (default: rcParams['detector.conf_threshold'] or ``0.25``)
    :arg nms_iou: suppression IoU (default: rcParams['detector.nms_iou'] or ``0.45``)
    """
    if conf_threshold is None:
        conf_threshold = rcParams["detector.conf_threshold"]
    if nms_iou is None:
        nms_iou = rcParams["detector.nms_iou"]
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"Confidence threshold must be in [0, 1], got {conf_threshold}")

    g = raw.grid_size
    detections = []
    for i in range(g):
        for j in range(g):
            detection = decode_cell(raw, (i, j))
            if detection.objectness >= conf_threshold:
                detections.append(detection)
    return nms(detections, nms_iou)


def iou(box_a, box_b):
    """
    Intersection over union of two ``(cx, cy, w, h)`` boxes.
    """
    ax0, ay0 = box_a[0] - box_a[2] / 2, box_a[1] - box_a[3] / 2
    ax1, ay1 = box_a[0] + box_a[2] / 2, box_a[1] + box_a[3] / 2
    bx0, by0 = box_b[0] - box_b[2] / 2, box_b[1] - box_b[3] / 2
    bx1, by1 = box_b[0] + box_b[2] / 2, box_b[1] + box_b[3] / 2
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(
        0.0, min(ay1, by1) - max(ay0, by0)
    )
    union = box_a[2] * box_a[3] + box_b[2] * box_b[3] - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(detections, iou_threshold):
    """
    Greedy suppression: visits detections by decreasing objectness and
    drops any whose IoU with an already kept detection exceeds the threshold.
    """
    order = sorted(detections, key=lambda d: -d.objectness)
    kept = []
    for detection in order:
        if all(iou(detection.bbox, other.bbox) <= iou_threshold for other in kept):
            kept.append(detection)
    return kept


def assign_cell(cx, cy, grid_size):
    """
    Returns the ``(i, j)`` cell containing the box center.
    """
    i = min(int(cy * grid_size), grid_size - 1)
    j = min(int(cx * grid_size), grid_size - 1)
    return i, j


def box_targets(annotation, cell, grid_size):
    """
    Returns the raw box parameters that decode exactly to *annotation*.
    """
    i, j = cell
    ox = np.clip(annotation.cx * grid_size - j, _OFFSET_EPS, 1.0 - _OFFSET_EPS)
    oy = np.clip(annotation.cy * grid_size - i, _OFFSET_EPS, 1.0 - _OFFSET_EPS)
    return np.array(
        [
            np.log(ox / (1.0 - ox)),
            np.log(oy / (1.0 - oy)),
            np.log(annotation.w * grid_size),
            np.log(annotation.h * grid_size),
        ]
    )


def _positives(annotations, grid_size):
    cells = {}
    for annotation in annotations:
        if annotation.w <= 0 or annotation.h <= 0:
            raise ValueError(
                f"Annotation has non-positive size: w={annotation.w}, h={annotation.h}"
            )
        cell = assign_cell(annotation.cx, annotation.cy, grid_size)
        if cell in cells:
            warnings.warn(f"Cell {cell} claimed by several annotations, keeping the first one")
            continue
        cells[cell] = annotation
    return cells


def detection_loss(raw, annotations):
    """
    Training objective of the detector.

    Sum of three terms with unit weights: binary cross-entropy of all
    objectness logits against the assignment mask, softmax cross-entropy of
    the class logits at positive cells and squared error of the box
    parameters at positive cells. Each term is a sum over cells divided by
    the number of positive cells (at least one), so the class term is a mean
    over positives and an image without boxes is scored by its objectness
    term alone.

    :arg raw: head outputs
    :arg annotations: ground truth boxes (:class:`rosar.sonar.Annotation`)
    :return: scalar tensor
    """
    g = raw.grid_size
    positives = _positives(annotations, g)

    mask = np.zeros((g, g, 1))
    for i, j in positives:
        mask[i, j, 0] = 1.0
    norm = 1.0 / max(len(positives), 1)

    loss = bce_with_logits(raw.obj, mask, reduction="sum") * norm
    if not positives:
        return loss

    cells = sorted(positives)
    rows = np.array([c[0] for c in cells])
    cols = np.array([c[1] for c in cells])
    labels = np.array([positives[c].class_id for c in cells])
    targets = np.stack([box_targets(positives[c], c, g) for c in cells])

    loss = loss + softmax_cross_entropy(take(raw.cls, (rows, cols)), labels)
    residual = take(raw.box, (rows, cols)) - targets
    loss = loss + (residual * residual).sum() * norm
    return loss


def save_model(model, path):
    """
    Writes the parameters: a little-endian ``uint32`` header length, a JSON
    header (format version, configuration, seed, layer shapes) and the
    parameters as little-endian 32-bit floats in header order.
    """
    config = model.config
    header = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "config": dataclasses.asdict(config),
        "seed": model.seed,
        "layers": [
            {"name": name, "shape": list(tensor.shape)}
            for name, tensor in model.weights.items()
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(
        tensor.data.astype("<f4").tobytes() for tensor in model.weights.values()
    )
    atomic_write_bytes(path, struct.pack("<I", len(header_bytes)) + header_bytes + blob)


def load_model(path):
    """
    Reads parameters written by :func:`save_model`.
    """
    with open(path, "rb") as fp:
        data = fp.read()

    if len(data) < 4:
        raise ValueError(f"{path}: truncated weight file")
    (length,) = struct.unpack("<I", data[:4])
    try:
        header = json.loads(data[4 : 4 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as ex:
        raise ValueError(f"{path}: corrupt weight header ({ex})") from ex
    if header.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported weight format {header.get('format_version')!r}"
        )

    config = DetectorConfig(**header["config"])
    expected = [(name, tuple(shape)) for name, shape in config.layer_shapes()]
    declared = [(layer["name"], tuple(layer["shape"])) for layer in header["layers"]]
    if expected != declared:
        raise ValueError(f"{path}: layer shapes do not match the configuration")

    offset = 4 + length
    weights = {}
    for name, shape in declared:
        count = int(np.prod(shape))
        if offset + 4 * count > len(data):
            raise ValueError(f"{path}: truncated weight blob at {name}")
        values = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        weights[name] = Tensor(values.reshape(shape), requires_grad=True)
        offset += 4 * count

    return ModelParams(config, header["seed"], weights)
