"""
Synthetic side-scan sonar waterfall images and the dataset format.

Three regimes are generated:

    * ``clean``: straight harbour wall next to the nadir band
    * ``surface``: the wall is wavy, as seen from a vehicle at the surface
      in rough weather
    * ``noisy``: full rows are lost (black lines) where the transducer left
      the water

Images are ``[h, w, c]`` float arrays in [0, 1]. Walls are annotated as
vertical segments of class ``0`` (wall); faint and broken segments of the
same wall are annotated as class ``1`` (noWall).

A dataset directory contains ``manifest.json``, ``images/<id>.pgm`` and
``labels/<id>.jsonl`` (one ``{"class", "cx", "cy", "w", "h"}`` object per
line, normalized coordinates).
"""

__all__ = [
    "VARIANTS",
    "Annotation",
    "GeneratorParams",
    "DatasetEntry",
    "DatasetManifest",
    "gen_waterfall",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "read_annotations",
    "write_annotations",
]

# Standard library modules.
import dataclasses
import json
import logging
import os

# Third party modules.
import numpy as np

# Local modules.
from rosar.fileio import (
    atomic_write_text,
    read_json,
    read_pgm,
    write_json,
    write_pgm,
)
from rosar.properties import sample_bands

# Globals and constants variables.
logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

WALL = 0
NO_WALL = 1
CLASS_NAMES = {WALL: "wall", NO_WALL: "noWall"}

CLEAN = "clean"
SURFACE = "surface"
NOISY = "noisy"
ADVERSARIAL = "adversarial"
VARIANTS = [CLEAN, SURFACE, NOISY]
_MANIFEST_VARIANTS = VARIANTS + [ADVERSARIAL]

_MIN_SIZE = 32


@dataclasses.dataclass(frozen=True)
class Annotation:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"Box size must be positive, got w={self.w}, h={self.h}")

    @property
    def bbox(self):
        return (self.cx, self.cy, self.w, self.h)

    def to_dict(self):
        return {"class": self.class_id, "cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["class"]), float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]))


@dataclasses.dataclass(frozen=True)
class GeneratorParams:
    """
    Parameters of the waterfall generator. They are chosen for visual
    plausibility and are not calibrated against real sonar data.
    """

    background_mean: float = 0.3
    nadir_intensity: float = 0.85
    nadir_halfwidth: int = 1
    wall_probability: float = 0.9
    wall_intensity: float = 0.9
    wall_width: int = 3
    gap_intensity: float = 0.55
    gap_probability: float = 0.3
    gap_dropout: float = 0.35
    segment_min: int = 16
    segment_max: int = 24
    box_margin: int = 3
    wave_amplitude: tuple = (1.5, 4.0)
    wave_period: tuple = (12.0, 28.0)
    max_bands: int = 5
    max_band_thickness: int = 3

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("wave_amplitude", "wave_period"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclasses.dataclass
class DatasetEntry:
    image_id: str
    image: np.ndarray
    annotations: list
    source_id: str = None


@dataclasses.dataclass
class DatasetManifest:
    name: str
    variant: str
    entries: list = dataclasses.field(default_factory=list)
    seed: int = None
    generator: dict = dataclasses.field(default_factory=dict)
    metadata: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in _MANIFEST_VARIANTS:
            raise ValueError(
                f"Unknown variant: {self.variant}. "
                f"Valid variants: {', '.join(_MANIFEST_VARIANTS)}"
            )

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def box_count(self):
        return sum(len(entry.annotations) for entry in self.entries)


def _speckle(rng, shape, mean):
    # Rayleigh amplitude with unit mean, scaled to the requested mean
    sigma = 1.0 / np.sqrt(np.pi / 2.0)
    return mean * rng.rayleigh(sigma, size=shape)


def _wall_columns(variant, rng, h, w, params):
    center = w / 2.0
    side = rng.choice([-1.0, 1.0])
    offset = rng.uniform(0.15, 0.35) * w
    x0 = center + side * offset
    rows = np.arange(h)
    if variant == SURFACE:
        amplitude = rng.uniform(*params.wave_amplitude)
        period = rng.uniform(*params.wave_period)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        columns = x0 + amplitude * np.sin(2.0 * np.pi * rows / period + phase)
    else:
        slope = rng.uniform(-0.05, 0.05)
        columns = x0 + slope * (rows - h / 2.0)
    margin = params.wall_width + params.box_margin
    return np.clip(columns, margin, w - 1 - margin)


def _segments(rng, h, params):
    segments = []
    start = 0
    while start < h:
        height = int(rng.integers(params.segment_min, params.segment_max + 1))
        stop = min(start + height, h)
        if h - stop < params.segment_min:
            stop = h
        segments.append((start, stop))
        start = stop
    return segments


def gen_waterfall(variant, seed, h=64, w=64, c=1, params=None):
    """
    Generates one waterfall image with its annotations.

    :arg variant: ``clean``, ``surface`` or ``noisy``
    :arg seed: random seed; generation is a pure function of the arguments
    :arg h: image height in pixels (>= 32)
    :arg w: image width in pixels (>= 32)
    :arg c: number of channels
    :arg params: generator parameters (default: :class:`GeneratorParams`)
    :return: image ``[h, w, c]`` and list of :class:`Annotation`
    """
    if variant not in VARIANTS:
        raise ValueError(
            f"Unknown variant: {variant}. Valid variants: {', '.join(VARIANTS)}"
        )
    if h < _MIN_SIZE or w < _MIN_SIZE:
        raise ValueError(f"Image must be at least {_MIN_SIZE} x {_MIN_SIZE}, got {h} x {w}")
    if params is None:
        params = GeneratorParams()

    rng = np.random.default_rng(seed)
    image = _speckle(rng, (h, w, c), params.background_mean)

    # Nadir gap
    center = w // 2
    nadir = slice(center - params.nadir_halfwidth, center + params.nadir_halfwidth + 1)
    image[:, nadir, :] = params.nadir_intensity + 0.05 * rng.standard_normal((h, 1, c))

    annotations = []
    if rng.uniform() < params.wall_probability:
        columns = _wall_columns(variant, rng, h, w, params)
        halfwidth = params.wall_width / 2.0
        cols = np.arange(w)
        for start, stop in _segments(rng, h, params):
            gap = rng.uniform() < params.gap_probability
            intensity = params.gap_intensity if gap else params.wall_intensity
            for row in range(start, stop):
                if gap and rng.uniform() < params.gap_dropout:
                    continue
                inside = np.abs(cols - columns[row]) <= halfwidth
                image[row, inside, :] = intensity * rng.uniform(0.9, 1.1, size=(inside.sum(), c))

            seg_cols = columns[start:stop]
            x0 = max(seg_cols.min() - halfwidth - params.box_margin, 0.0)
            x1 = min(seg_cols.max() + halfwidth + params.box_margin + 1.0, float(w))
            annotations.append(
                Annotation(
                    NO_WALL if gap else WALL,
                    cx=(x0 + x1) / 2.0 / w,
                    cy=(start + stop) / 2.0 / h,
                    w=(x1 - x0) / w,
                    h=(stop - start) / h,
                )
            )

    image = np.clip(image, 0.0, 1.0)

    if variant == NOISY:
        bands = sample_bands(h, rng, params.max_bands, params.max_band_thickness)
        for start, stop in bands:
            image[start:stop, :, :] = 0.0

    return image, annotations


def generate_dataset(variant, count, seed, name=None, h=64, w=64, c=1, params=None):
    """
    Generates *count* images. Image ``k`` uses seed ``(seed, k)``.
    """
    if params is None:
        params = GeneratorParams()
    entries = []
    for index in range(count):
        image_seed = np.random.SeedSequence([seed, index])
        image, annotations = gen_waterfall(variant, image_seed, h, w, c, params)
        entries.append(DatasetEntry(f"{variant}-{index:05d}", image, annotations))

    return DatasetManifest(
        name=name or f"synthetic-{variant}",
        variant=variant,
        entries=entries,
        seed=seed,
        generator={"height": h, "width": w, "channels": c, **params.to_dict()},
    )


def write_annotations(path, annotations):
    lines = [json.dumps(a.to_dict(), sort_keys=True) for a in annotations]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_annotations(path):
    """
    Reads a JSONL annotation file.
    """
    annotations = []
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, 1):
            line = line.strip()
            if not line:
                continue
            try:
                annotations.append(Annotation.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as ex:
                raise ValueError(f"{path}:{lineno}: invalid annotation ({ex})") from ex
    return annotations


def write_dataset(manifest, directory):
    """
    Writes *manifest* to *directory* (images quantized to 8 bits).
    """
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "labels"), exist_ok=True)

    records = []
    for entry in manifest.entries:
        image_path = os.path.join("images", entry.image_id + ".pgm")
        label_path = os.path.join("labels", entry.image_id + ".jsonl")
        write_pgm(os.path.join(directory, image_path), entry.image)
        write_annotations(os.path.join(directory, label_path), entry.annotations)
        record = {"id": entry.image_id, "image": image_path, "labels": label_path}
        if entry.source_id is not None:
            record["source"] = entry.source_id
        records.append(record)

    write_json(
        os.path.join(directory, "manifest.json"),
        {
            "format_version": MANIFEST_VERSION,
            "name": manifest.name,
            "variant": manifest.variant,
            "seed": manifest.seed,
            "generator": manifest.generator,
            "metadata": manifest.metadata,
            "entries": records,
        },
    )
    logger.info("Wrote %d images to %s", len(records), directory)


def read_dataset(directory):
    """
    Reads a dataset directory written by :func:`write_dataset`.
    """
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"No manifest.json in {directory}")
    data = read_json(path)
    if data.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported format {data.get('format_version')!r}")

    entries = []
    for record in data["entries"]:
        image = read_pgm(os.path.join(directory, record["image"]))
        annotations = read_annotations(os.path.join(directory, record["labels"]))
        entries.append(
            DatasetEntry(record["id"], image, annotations, record.get("source"))
        )

    return DatasetManifest(
        name=data["name"],
        variant=data["variant"],
        entries=entries,
        seed=data.get("seed"),
        generator=data.get("generator", {}),
        metadata=data.get("metadata", {}),
    )
