"""Core value types: B-scans, layer maps, choroid masks, boundary curves."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_SIZE = 16
DEFAULT_NUM_CLASSES = 12
DEFAULT_CHOROID_CLASS = 9


def _frozen_array(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BScan:
    """Grayscale cross-sectional image, rows = depth, columns = A-lines."""

    pixels: np.ndarray

    def __post_init__(self):
        px = _frozen_array(self.pixels, np.float64)
        if px.ndim != 2:
            raise ValueError(f"B-scan must be 2-D, got shape {px.shape}")
        if px.shape[0] < MIN_SIZE or px.shape[1] < MIN_SIZE:
            raise ValueError(f"B-scan needs height >= {MIN_SIZE} and width >= {MIN_SIZE}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("B-scan intensities must be finite and in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class LayerLabelMap:
    labels: np.ndarray
    num_classes: int = DEFAULT_NUM_CLASSES

    def __post_init__(self):
        lab = _frozen_array(self.labels, np.int64)
        if lab.ndim != 2:
            raise ValueError(f"layer map must be 2-D, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValueError(f"layer ids must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", lab)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True, eq=False)
class ChoroidMask:
    """Binary choroid map.

    Construction does not reject non-binary values so that corrupted masks can
    still be represented and reported by :func:`validate_sample`.
    """

    mask: np.ndarray

    def __post_init__(self):
        m = _frozen_array(self.mask, np.uint8)
        if m.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {m.shape}")
        object.__setattr__(self, "mask", m)

    @classmethod
    def from_probability(cls, prob, threshold: float = 0.5) -> "ChoroidMask":
        return cls((np.asarray(prob) >= threshold).astype(np.uint8))

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def is_binary(self) -> bool:
        return bool(np.all((self.mask == 0) | (self.mask == 1)))


@dataclass(frozen=True, eq=False)
class BoundaryCurve:
    """Per-column row coordinate of a surface; NaN marks an absent column."""

    rows: np.ndarray
    height: int

    def __post_init__(self):
        r = _frozen_array(self.rows, np.float64)
        if r.ndim != 1:
            raise ValueError("boundary curve must be 1-D")
        present = r[~np.isnan(r)]
        if present.size and (present.min() < 0 or present.max() > self.height - 1):
            raise ValueError(f"boundary rows must lie in [0, {self.height - 1}]")
        object.__setattr__(self, "rows", r)

    @property
    def width(self) -> int:
        return self.rows.shape[0]

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.rows)


@dataclass(frozen=True)
class Thickness:
    value: float

    def __post_init__(self):
        v = float(self.value)
        if not np.isfinite(v) or v < 0:
            raise ValueError(f"thickness must be finite and non-negative, got {self.value}")
        object.__setattr__(self, "value", v)

    def __float__(self):
        return self.value


@dataclass(frozen=True, eq=False)
class Sample:
    image: BScan
    layers: LayerLabelMap
    choroid: ChoroidMask
    thickness: Thickness
    id: str
    choroid_class: int = DEFAULT_CHOROID_CLASS
    # (num_layers - 1) x W fractional surfaces; surface k is the first row of band k+1.
    surfaces: np.ndarray | None = field(default=None, repr=False)

    def replace(self, **changes) -> "Sample":
        from dataclasses import replace

        return replace(self, **changes)


def validate_sample(sample: Sample, check_monotone: bool = True) -> list[str]:
    """Return one message per violated invariant; an empty list means the sample is consistent."""
    from .metrics import thickness_of

    problems = []
    shape = sample.image.pixels.shape
    shapes_ok = True
    if sample.layers.labels.shape != shape:
        problems.append(f"layer map shape {sample.layers.labels.shape} does not match image shape {shape}")
        shapes_ok = False
    if sample.choroid.mask.shape != shape:
        problems.append(f"choroid mask shape {sample.choroid.mask.shape} does not match image shape {shape}")
        shapes_ok = False
    binary = sample.choroid.is_binary()
    if not binary:
        problems.append("choroid mask is not binary: values must be exactly 0 or 1")
    if shapes_ok and binary:
        expected = (sample.layers.labels == sample.choroid_class).astype(np.uint8)
        if not np.array_equal(expected, sample.choroid.mask):
            problems.append(f"choroid mask differs from layer class {sample.choroid_class} region")
    if binary:
        expected_t = thickness_of(sample.choroid).value
        if abs(expected_t - sample.thickness.value) > 1e-6:
            problems.append(
                f"thickness inconsistent with mask: stored {sample.thickness.value:.6f}, mask gives {expected_t:.6f}"
            )
    if check_monotone and sample.layers.labels.size:
        if np.any(np.diff(sample.layers.labels, axis=0) < 0):
            problems.append("layer labels are not non-decreasing down every column")
    return problems
