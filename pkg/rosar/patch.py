"""
Universal adversarial patch against the detector.

A square patch is pasted at the center of every ground truth box, resized to
a fraction of the smaller box side. Training lowers the objectness of the
grid cells the boxes are assigned to while a total variation penalty keeps
the patch smooth.

Example::

   >>> patch = train_patch(surrogate, dataset, size=16, epochs=20)
   >>> patched = build_patch_dataset(dataset, patch)
"""

__all__ = [
    "Patch",
    "gray_patch",
    "apply_patch",
    "tv_loss",
    "train_patch",
    "build_patch_dataset",
    "mean_gt_objectness",
    "transfer_report",
    "save_patch",
    "load_patch",
]

# Standard library modules.
import concurrent.futures
import dataclasses
import logging
import warnings

# Third party modules.
import numpy as np
from tqdm import tqdm

# Local modules.
from rosar.rcsetup import rcParams
from rosar.autodiff import Tensor, backward, resample, sigmoid, take, reduce_mean
from rosar.detector import forward, assign_cell
from rosar.sonar import ADVERSARIAL, DatasetEntry, DatasetManifest
from rosar.fileio import write_json, read_json, write_npy, read_npy, write_pgm

# Globals and constants variables.
logger = logging.getLogger(__name__)

PATCH_FORMAT_VERSION = 1

_GRAY = 0.5


@dataclasses.dataclass
class Patch:
    """
    Square patch of ``[p, p, c]`` pixels in [0, 1].
    """

    pixels: np.ndarray
    metadata: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"Patch must be [p, p, c], got shape {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("Patch pixels must be in [0, 1]")

    @property
    def size(self):
        return self.pixels.shape[0]

    @property
    def channels(self):
        return self.pixels.shape[2]


def gray_patch(size, channels=1):
    return Patch(np.full((size, size, channels), _GRAY))


def _validate_scale(scale):
    if scale is None:
        scale = rcParams["patch.scale"]
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"Patch scale must be in (0, 1], got {scale}")
    return scale


def _interpolation_matrix(out_size, in_size):
    # Bilinear weights, half-pixel centers, edges clamped
    src = (np.arange(out_size) + 0.5) * in_size / out_size - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo

    matrix = np.zeros((out_size, in_size))
    index = np.arange(out_size)
    np.add.at(matrix, (index, lo), 1.0 - frac)
    np.add.at(matrix, (index, hi), frac)
    return matrix


def _footprint(annotation, patch_size, image_shape, scale):
    """
    Returns the row and column interpolation matrices and the pixel mask of
    the patch pasted on *annotation*, or ``None`` for a degenerate box.
    """
    h, w = image_shape[:2]
    box_w = annotation.w * w
    box_h = annotation.h * h
    if min(box_w, box_h) <= 1.0:
        return None

    side = max(int(round(scale * min(box_w, box_h))), 1)
    top = int(round(annotation.cy * h - side / 2.0))
    left = int(round(annotation.cx * w - side / 2.0))
    interp = _interpolation_matrix(side, patch_size)

    def place(start, length):
        matrix = np.zeros((length, patch_size))
        positions = start + np.arange(side)
        inside = (positions >= 0) & (positions < length)
        matrix[positions[inside]] = interp[inside]
        return matrix, inside.any(), positions[inside]

    rows, rows_hit, row_positions = place(top, h)
    cols, cols_hit, col_positions = place(left, w)
    mask = np.zeros((h, w, 1))
    if rows_hit and cols_hit:
        mask[np.ix_(row_positions, col_positions)] = 1.0
    return rows, cols, mask


def _footprints(annotations, patch_size, image_shape, scale):
    footprints = []
    for annotation in annotations:
        footprint = _footprint(annotation, patch_size, image_shape, scale)
        if footprint is None:
            warnings.warn(
                f"Bounding box {annotation.bbox} is at most one pixel wide, patch skipped"
            )
            continue
        footprints.append(footprint)
    return footprints


def apply_patch(image, annotations, patch, scale=None):
    """
    Pastes *patch* at the center of every annotation. The patch is bilinearly
    resized to ``scale`` times the smaller box side (in pixels) and overwrites
    the image; later boxes overwrite earlier ones.

    :arg image: ``[h, w, c]`` image
    :arg annotations: ground truth boxes
    :arg patch: patch with ``c`` channels
    :type patch: :class:`Patch`
    :arg scale: relative patch size (default: rcParams['patch.scale'] or ``0.4``)
    :return: new image, clamped to [0, 1]
    """
    scale = _validate_scale(scale)
    image = np.asarray(image, dtype=np.float64)
    if image.shape[2] != patch.channels:
        raise ValueError(
            f"Patch has {patch.channels} channels, image has {image.shape[2]}"
        )

    out = image.copy()
    for rows, cols, mask in _footprints(annotations, patch.size, image.shape, scale):
        pasted = np.einsum("hp,pqc,wq->hwc", rows, patch.pixels, cols)
        out = out * (1.0 - mask) + pasted
    return np.clip(out, 0.0, 1.0)


def _paste(image, footprints, pixels):
    x = Tensor(image)
    for rows, cols, mask in footprints:
        x = x * (1.0 - mask) + resample(pixels, rows, cols)
    return x


def tv_loss(patch):
    """
    Mean of the squared horizontal and vertical neighbour differences.

    :arg patch: :class:`Patch`, array or :class:`Tensor` of shape ``[p, p, c]``
    :return: scalar tensor
    """
    if isinstance(patch, Patch):
        patch = patch.pixels
    t = patch if isinstance(patch, Tensor) else Tensor(patch)
    if t.shape[0] < 2 or t.shape[1] < 2:
        raise ValueError(f"Patch must be at least 2 x 2, got {t.shape}")
    dh = t[:, 1:, :] - t[:, :-1, :]
    dv = t[1:, :, :] - t[:-1, :, :]
    count = dh.size + dv.size
    return ((dh * dh).sum() + (dv * dv).sum()) * (1.0 / count)


def _gt_cells(annotations, grid_size):
    cells = sorted({assign_cell(a.cx, a.cy, grid_size) for a in annotations})
    rows = np.array([c[0] for c in cells], dtype=np.int64)
    cols = np.array([c[1] for c in cells], dtype=np.int64)
    return rows, cols


def _objectness_at(raw, annotations):
    rows, cols = _gt_cells(annotations, raw.grid_size)
    zeros = np.zeros_like(rows)
    return reduce_mean(sigmoid(take(raw.obj, (rows, cols, zeros))))


def train_patch(
    surrogate,
    dataset,
    size=None,
    epochs=None,
    w_obj=None,
    w_tv=None,
    step_size=None,
    scale=None,
    progress=False,
):
    """
    Optimizes a universal patch against *surrogate*.

    The patch starts gray. For every epoch and every image with annotations,
    the patch is pasted at the ground truth boxes and the loss
    ``w_obj * mean objectness at the assigned cells + w_tv * tv_loss`` takes
    one signed gradient step on the patch pixels, which are then clamped to
    [0, 1].

    Defaults come from the ``patch.*`` entries of rcParams.

    :return: trained patch; ``metadata["loss_history"]`` holds the mean loss
        of every epoch
    :rtype: :class:`Patch`
    """
    size = rcParams["patch.size"] if size is None else size
    epochs = rcParams["patch.epochs"] if epochs is None else epochs
    w_obj = rcParams["patch.w_obj"] if w_obj is None else w_obj
    w_tv = rcParams["patch.w_tv"] if w_tv is None else w_tv
    step_size = rcParams["patch.step_size"] if step_size is None else step_size
    scale = _validate_scale(scale)
    if size < 2:
        raise ValueError(f"Patch size must be >= 2, got {size}")
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if len(dataset) == 0:
        raise ValueError("Cannot train a patch on an empty dataset")

    channels = surrogate.config.channels
    pixels = np.full((size, size, channels), _GRAY)

    samples = []
    for entry in dataset:
        if not entry.annotations:
            continue
        footprints = _footprints(entry.annotations, size, entry.image.shape, scale)
        if footprints:
            samples.append((entry, footprints))

    history = []
    for epoch in tqdm(range(epochs), desc="patch", disable=not progress):
        losses = []
        for entry, footprints in samples:
            patch_t = Tensor(pixels, requires_grad=True)
            raw = forward(surrogate, _paste(entry.image, footprints, patch_t))
            loss = _objectness_at(raw, entry.annotations) * w_obj + tv_loss(patch_t) * w_tv
            backward(loss)
            pixels = np.clip(pixels - step_size * np.sign(patch_t.grad), 0.0, 1.0)
            losses.append(loss.item())

        mean_loss = float(np.mean(losses)) if losses else 0.0
        history.append(mean_loss)
        logger.debug("Patch epoch %d: loss %.6f", epoch + 1, mean_loss)

    metadata = {
        "size": size,
        "epochs": epochs,
        "w_obj": w_obj,
        "w_tv": w_tv,
        "step_size": step_size,
        "scale": scale,
        "surrogate_seed": surrogate.seed,
        "loss_history": history,
    }
    return Patch(pixels, metadata)


def _patch_entry(entry, patch, scale):
    return DatasetEntry(
        image_id=f"patch-{entry.image_id}",
        image=apply_patch(entry.image, entry.annotations, patch, scale),
        annotations=list(entry.annotations),
        source_id=entry.image_id,
    )


def build_patch_dataset(dataset, patch, scale=None, name=None, workers=1):
    """
    Pastes *patch* on every image of *dataset*. Annotations are copied
    unchanged.

    :arg workers: number of threads
    :return: adversarial dataset with one entry per source image
    """
    scale = _validate_scale(scale)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            entries = list(executor.map(lambda e: _patch_entry(e, patch, scale), dataset))
    else:
        entries = [_patch_entry(entry, patch, scale) for entry in dataset]

    return DatasetManifest(
        name=name or f"patch-{dataset.name}",
        variant=ADVERSARIAL,
        entries=entries,
        seed=dataset.seed,
        generator=dict(dataset.generator),
        metadata={"source": dataset.name, "scale": scale, "patch": patch.metadata},
    )


def mean_gt_objectness(model, dataset, patch, scale=None):
    """
    Mean objectness at the ground truth cells of the patched images.
    """
    scale = _validate_scale(scale)
    values = []
    for entry in dataset:
        if not entry.annotations:
            continue
        image = apply_patch(entry.image, entry.annotations, patch, scale)
        values.append(_objectness_at(forward(model, image), entry.annotations).item())
    if not values:
        raise ValueError("Dataset has no annotated image")
    return float(np.mean(values))


def transfer_report(patch, surrogate, victim, dataset, scale=None):
    """
    Compares the trained patch with a gray patch of the same size on the
    surrogate model and on a victim model.

    :return: ``{"surrogate": {...}, "victim": {...}}``, each with the model
        seed, the mean ground truth objectness with the gray and the trained
        patch, and their difference
    """
    gray = gray_patch(patch.size, patch.channels)
    report = {}
    for role, model in (("surrogate", surrogate), ("victim", victim)):
        gray_value = mean_gt_objectness(model, dataset, gray, scale)
        patched_value = mean_gt_objectness(model, dataset, patch, scale)
        report[role] = {
            "seed": model.seed,
            "gray": gray_value,
            "patched": patched_value,
            "delta": patched_value - gray_value,
        }
        logger.info(
            "Patch on %s model: objectness %.4f -> %.4f", role, gray_value, patched_value
        )
    return report


def save_patch(patch, prefix):
    """
    Writes ``<prefix>.pgm``, ``<prefix>.npy`` (exact pixels) and
    ``<prefix>.json`` (metadata).
    """
    write_pgm(prefix + ".pgm", patch.pixels)
    write_npy(prefix + ".npy", patch.pixels)
    write_json(
        prefix + ".json",
        {"format_version": PATCH_FORMAT_VERSION, "metadata": patch.metadata},
    )


def load_patch(prefix):
    data = read_json(prefix + ".json")
    if data.get("format_version") != PATCH_FORMAT_VERSION:
        raise ValueError(f"{prefix}.json: unsupported format {data.get('format_version')!r}")
    return Patch(read_npy(prefix + ".npy"), data.get("metadata", {}))
