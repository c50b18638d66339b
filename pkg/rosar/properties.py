"""
Safety properties of the detector on side-scan sonar images.

Both properties protect one predicted bounding box, identified by its grid
cell: it must keep an objectness of at least ``xi_obj`` and its correct class
must strictly beat every other class.

    * ``p1``: robustness against multiplicative noise on every pixel,
      ``(1 - eps) * x_bar <= x <= (1 + eps) * x_bar``
    * ``p2``: robustness against dark horizontal lines, for the rows in a
      line configuration ``L``: ``eps * x_bar <= x <= x_bar``; other rows
      are fixed. Smaller ``eps`` allows darker lines.

Rows of a line configuration are 0-based indices.
"""

__all__ = [
    "P1",
    "P2",
    "PropertySpec",
    "FeasibleRegion",
    "region_p1",
    "region_p2",
    "sample_bands",
    "sample_lines",
    "check_violation",
    "violates",
    "project",
]

# Standard library modules.
import dataclasses

# Third party modules.
import numpy as np

# Local modules.
from rosar.rcsetup import rcParams
from rosar.detector import forward, decode_cell

# Globals and constants variables.
P1 = "p1"
P2 = "p2"
_KINDS = [P1, P2]

_MAX_BANDS = 5
_MAX_BAND_THICKNESS = 3


@dataclasses.dataclass(frozen=True)
class PropertySpec:
    """
    One property instance.

    :arg kind: ``p1`` or ``p2``
    :arg epsilon: perturbation parameter
    :arg target_cell: ``(i, j)`` grid cell of the protected box
    :arg target_class: correct class ``p``
    :arg lines: rows of the line configuration (``p2`` only)
    :arg xi_obj: objectness threshold
        (default: rcParams['property.xi_obj'] or ``0.25``)
    """

    kind: str
    epsilon: float
    target_cell: tuple
    target_class: int
    lines: tuple = None
    xi_obj: float = dataclasses.field(default_factory=lambda: rcParams["property.xi_obj"])

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(
                f"Unknown property: {self.kind}. Valid properties: {', '.join(_KINDS)}"
            )
        if not 0.0 < self.xi_obj < 1.0:
            raise ValueError(f"xi_obj must be in (0, 1), got {self.xi_obj}")
        if self.kind == P1:
            if not 0.0 <= self.epsilon < 1.0:
                raise ValueError(f"P1 epsilon must be in [0, 1), got {self.epsilon}")
        else:
            if not 0.0 < self.epsilon <= 1.0:
                raise ValueError(f"P2 epsilon must be in (0, 1], got {self.epsilon}")
            if not self.lines:
                raise ValueError("P2 requires a non-empty line configuration")
            object.__setattr__(self, "lines", tuple(sorted(int(r) for r in self.lines)))
        object.__setattr__(self, "target_cell", tuple(int(v) for v in self.target_cell))

    def region(self, x_bar):
        if self.kind == P1:
            return region_p1(x_bar, self.epsilon)
        return region_p2(x_bar, self.epsilon, self.lines)

    def with_epsilon(self, epsilon):
        return dataclasses.replace(self, epsilon=epsilon)

    def to_dict(self):
        return {
            "kind": self.kind,
            "epsilon": self.epsilon,
            "lines": None if self.lines is None else list(self.lines),
            "xi_obj": self.xi_obj,
            "target_cell": list(self.target_cell),
            "p": self.target_class,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            epsilon=d["epsilon"],
            target_cell=tuple(d["target_cell"]),
            target_class=d["p"],
            lines=None if d.get("lines") is None else tuple(d["lines"]),
            xi_obj=d["xi_obj"],
        )


@dataclasses.dataclass(frozen=True)
class FeasibleRegion:
    lower: np.ndarray
    upper: np.ndarray

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def perturbable(self):
        return self.upper > self.lower

    def is_singleton(self):
        return not self.perturbable.any()

    def contains(self, x):
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def is_subset_of(self, other):
        return bool(np.all(self.lower >= other.lower) and np.all(self.upper <= other.upper))


def region_p1(x_bar, epsilon):
    """
    Feasible region of ``p1``: every pixel may be scaled by a factor in
    ``[1 - eps, 1 + eps]``, clamped to the pixel domain [0, 1].
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"P1 epsilon must be in [0, 1), got {epsilon}")
    x_bar = np.asarray(x_bar, dtype=np.float64)
    lower = np.clip((1.0 - epsilon) * x_bar, 0.0, 1.0)
    upper = np.clip((1.0 + epsilon) * x_bar, 0.0, 1.0)
    return FeasibleRegion(lower, upper)


def region_p2(x_bar, epsilon, lines):
    """
    Feasible region of ``p2``: rows in *lines* may be darkened down to
    ``eps * x_bar`` (all channels); other rows are fixed.
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"P2 epsilon must be in (0, 1], got {epsilon}")
    x_bar = np.asarray(x_bar, dtype=np.float64)
    h = x_bar.shape[0]
    rows = np.asarray(sorted(set(int(r) for r in lines)), dtype=np.int64)
    if rows.size == 0:
        raise ValueError("Line configuration must not be empty")
    if rows.min() < 0 or rows.max() >= h:
        raise ValueError(f"Line configuration has rows outside [0, {h - 1}]: {rows.tolist()}")

    lower = x_bar.copy()
    upper = x_bar.copy()
    lower[rows] = epsilon * x_bar[rows]
    return FeasibleRegion(lower, upper)


def sample_bands(h, seed, max_bands=_MAX_BANDS, max_thickness=_MAX_BAND_THICKNESS):
    """
    Draws 1 to *max_bands* horizontal bands, each 1 to *max_thickness* rows
    thick.

    :arg seed: seed, or a :class:`numpy.random.Generator` to draw from
    :return: list of ``(start, stop)`` row ranges
    """
    if h < 8:
        raise ValueError(f"Image height must be at least 8, got {h}")
    rng = np.random.default_rng(seed)
    bands = []
    for _ in range(int(rng.integers(1, max_bands + 1))):
        thickness = int(rng.integers(1, max_thickness + 1))
        start = int(rng.integers(0, h - thickness + 1))
        bands.append((start, start + thickness))
    return bands


def sample_lines(h, seed):
    """
    Draws a random line configuration: the union of the rows of
    :func:`sample_bands`.

    :return: sorted tuple of 0-based row indices
    """
    rows = set()
    for start, stop in sample_bands(h, seed):
        rows.update(range(start, stop))
    return tuple(sorted(rows))


def project(x, region):
    """
    Clamps *x* elementwise into the region.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != region.lower.shape:
        raise ValueError(f"Shape {x.shape} does not match region {region.lower.shape}")
    return np.clip(x, region.lower, region.upper)


def violates(objectness, class_scores, spec):
    """
    Whether decoded scores violate the output constraint of *spec*:
    objectness below ``xi_obj``, or the correct class not strictly above
    every other class.
    """
    if objectness < spec.xi_obj:
        return True
    p = spec.target_class
    score = class_scores[p]
    return any(score <= other for index, other in enumerate(class_scores) if index != p)


def check_violation(model, x, spec):
    """
    Runs the detector on *x* and tests the output constraint at the target
    cell of *spec*.
    """
    detection = decode_cell(forward(model, x), spec.target_cell)
    return violates(detection.objectness, detection.class_scores, spec)
