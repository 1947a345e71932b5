"""Synthetic layered OCT phantoms and the on-disk dataset format.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence([seed, index])``; both are specified algorithms whose output
does not depend on platform, so a (config, index) pair always yields the same
sample.

Dataset layout::

    <root>/manifest.json
    <root>/images/<id>.png   16-bit grayscale, intensity * 65535
    <root>/layers/<id>.png   8-bit class ids
    <root>/masks/<id>.png    8-bit, choroid = 255
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy.special import erf

from .metrics import thickness_of
from .types import (
    DEFAULT_CHOROID_CLASS,
    MIN_SIZE,
    BScan,
    ChoroidMask,
    LayerLabelMap,
    Sample,
    Thickness,
    validate_sample,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# Mean band intensities, top to bottom: vitreous, retinal bands, choroid, sclera.
_BAND_MEANS_12 = (0.04, 0.62, 0.30, 0.70, 0.22, 0.50, 0.16, 0.78, 0.92, 0.56, 0.38, 0.27)
# Expected share of the non-choroid height taken by each band (band 11 gets the rest).
_BAND_SHARES_12 = (0.14, 0.06, 0.05, 0.06, 0.05, 0.06, 0.05, 0.04, 0.04, None, 0.08, None)


class DatasetError(Exception):
    """A dataset file is missing or inconsistent; the message names the sample."""


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    height: int = 128
    width: int = 128
    num_layers: int = 12
    boundary_smoothness: int = 24
    min_band_thickness: float = 2.0
    choroid_thickness_range: tuple[float, float] = (20.0, 50.0)
    csi_blur_sigma: float = 2.0
    speckle_strength: float = 0.25
    choroid_class: int = DEFAULT_CHOROID_CLASS

    @classmethod
    def full_scale(cls, seed: int = 0, **overrides) -> "PhantomConfig":
        """992 rows x 512 A-lines, geometry scaled up from the desk defaults."""
        base = dict(
            seed=seed,
            height=992,
            width=512,
            boundary_smoothness=96,
            min_band_thickness=6.0,
            choroid_thickness_range=(150.0, 380.0),
            csi_blur_sigma=12.0,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.height < MIN_SIZE or self.width < MIN_SIZE:
            raise ValueError(f"height >= {MIN_SIZE} and width >= {MIN_SIZE} required, got {self.height}x{self.width}")
        if self.num_layers < 3:
            raise ValueError("num_layers must be at least 3")
        if not 0 < self.choroid_class < self.num_layers - 1:
            raise ValueError("choroid class must be an interior band")
        if self.num_layers > 255:
            raise ValueError("at most 255 layers fit the 8-bit label format")
        lo, hi = self.choroid_thickness_range
        if not 0 < lo <= hi:
            raise ValueError("choroid_thickness_range must satisfy 0 < min <= max")
        if self.min_band_thickness < 1:
            raise ValueError("min_band_thickness must be >= 1 pixel so bands never vanish")
        if (self.num_layers - 1) * self.min_band_thickness + lo > self.height:
            raise ValueError(
                f"band minima ({self.num_layers - 1} x {self.min_band_thickness} + choroid {lo}) "
                f"do not fit in height {self.height}"
            )
        if self.csi_blur_sigma < 0:
            raise ValueError("csi_blur_sigma must be >= 0")
        if not 0 <= self.speckle_strength <= 1:
            raise ValueError("speckle_strength must lie in [0, 1]")
        if self.boundary_smoothness < 1:
            raise ValueError("boundary_smoothness must be >= 1")


def _band_means(n: int) -> np.ndarray:
    if n == 12:
        return np.array(_BAND_MEANS_12)
    # Alternate bright/dark with a distinct value per band.
    vals = np.linspace(0.1, 0.9, n)
    order = np.concatenate([np.arange(0, n, 2), np.arange(1, n, 2)])
    out = np.empty(n)
    out[order] = vals
    return out


def _band_shares(n: int, choroid: int) -> list:
    if n == 12 and choroid == DEFAULT_CHOROID_CLASS:
        return list(_BAND_SHARES_12)
    shares = [0.6 / (n - 2)] * n
    shares[choroid] = None
    shares[-1] = None
    return shares


def _smooth_walk(rng: np.random.Generator, n: int, window: int) -> np.ndarray:
    """Zero-mean, unit-scale smoothed cumulative random walk of length n."""
    steps = rng.standard_normal(n + window)
    walk = np.cumsum(steps)
    kernel = np.ones(window) / window
    smooth = np.convolve(walk, kernel, mode="valid")[:n]
    smooth = smooth - smooth.mean()
    scale = np.abs(smooth).max()
    return smooth / scale if scale > 0 else smooth


def _round(x):
    # Half-up rounding keeps round(x - 1) == round(x) - 1.
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def _surfaces(config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    h, w, L = config.height, config.width, config.num_layers
    c = config.choroid_class
    mb = config.min_band_thickness
    win = config.boundary_smoothness
    lo, hi = config.choroid_thickness_range

    choroid_mean = rng.uniform(lo, hi)
    choroid = choroid_mean * (1 + 0.15 * _smooth_walk(rng, w, win))
    choroid = np.clip(choroid, lo, None)

    rest = h - choroid_mean
    shares = _band_shares(L, c)
    thick = np.empty((L - 1, w))
    for k in range(L - 1):
        if k == c:
            thick[k] = choroid
            continue
        mean = max(mb, shares[k] * rest * rng.uniform(0.7, 1.3))
        thick[k] = np.maximum(mb, mean * (1 + 0.3 * _smooth_walk(rng, w, win)))
    # Gentle global curvature on the top surface.
    x = np.linspace(-1, 1, w)
    thick[0] = np.maximum(mb, thick[0] + rng.uniform(-0.05, 0.08) * h * (x**2 - 1 / 3))

    # Shrink any column whose stack leaves less than mb rows for the last band.
    budget = h - mb
    total = thick.sum(axis=0)
    over = total > budget
    if np.any(over):
        flex_idx = [k for k in range(L - 1) if k != c]
        flex = thick[flex_idx] - mb
        need = total - budget
        avail = flex.sum(axis=0)
        frac = np.where(over, np.minimum(1.0, need / np.maximum(avail, 1e-12)), 0.0)
        thick[flex_idx] = mb + flex * (1 - frac)
        total = thick.sum(axis=0)
        still = total > budget
        if np.any(still):
            thick[c] = np.where(still, np.maximum(mb, thick[c] - (total - budget)), thick[c])
    return np.cumsum(thick, axis=0)


def _rasterize(surfaces: np.ndarray, height: int) -> np.ndarray:
    rows = np.arange(height)[:, None, None]
    starts = _round(surfaces)[None]  # 1 x (L-1) x W
    return (rows >= starts).sum(axis=1).astype(np.int64)


def _render(config: PhantomConfig, labels: np.ndarray, surfaces: np.ndarray, rng) -> np.ndarray:
    means = _band_means(config.num_layers)
    img = means[labels].astype(np.float64)
    c = config.choroid_class
    sigma = config.csi_blur_sigma
    if sigma > 0:
        # Gaussian-blurred step across the choroid-sclera interface.
        rows = np.arange(config.height)[:, None].astype(np.float64)
        csi = _round(surfaces[c])[None, :] - 0.5
        step = 0.5 * (1 + erf((rows - csi) / (np.sqrt(2) * sigma)))
        a, b = means[c], means[c + 1]
        blend = a + (b - a) * step
        near = (labels == c) | (labels == c + 1)
        img = np.where(near, blend, img)
    s = config.speckle_strength
    if s > 0:
        noise = rng.standard_normal(img.shape)
        img = img * np.exp(s * noise - 0.5 * s * s)
    return np.clip(img, 0.0, 1.0)


def generate_phantom(config: PhantomConfig, index: int) -> Sample:
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, index])))
    surfaces = _surfaces(config, rng)
    labels = _rasterize(surfaces, config.height)
    image = _render(config, labels, surfaces, rng)
    mask = (labels == config.choroid_class).astype(np.uint8)
    return Sample(
        image=BScan(image),
        layers=LayerLabelMap(labels, config.num_layers),
        choroid=ChoroidMask(mask),
        thickness=thickness_of(mask),
        id=f"s{config.seed:04d}_{index:05d}",
        choroid_class=config.choroid_class,
        surfaces=surfaces,
    )


def choroid_surfaces(sample: Sample) -> tuple[np.ndarray, np.ndarray]:
    """Generator ground truth for the choroid's first and last rows (fractional)."""
    if sample.surfaces is None:
        raise ValueError("sample carries no generator surfaces")
    c = sample.choroid_class
    return sample.surfaces[c - 1].copy(), sample.surfaces[c] - 1.0


# --- on-disk format -------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    image: str
    layers: str
    mask: str
    thickness: float
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    num_classes: int = 12
    choroid_class: int = DEFAULT_CHOROID_CLASS
    generator: dict | None = field(default=None)

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "num_classes": self.num_classes,
            "choroid_class": self.choroid_class,
            "generator": self.generator,
            "samples": [asdict(e) for e in self.entries],
        }

    def write(self) -> Path:
        path = Path(self.root) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise DatasetError(f"manifest not found: {path}") from None
        entries = [ManifestEntry(**e) for e in raw["samples"]]
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"duplicate sample ids in {path}")
        for e in entries:
            if e.split not in ("train", "test"):
                raise DatasetError(f"sample {e.id}: split must be train or test, got {e.split!r}")
        return cls(
            root=path.parent,
            entries=entries,
            num_classes=int(raw.get("num_classes", 12)),
            choroid_class=int(raw.get("choroid_class", DEFAULT_CHOROID_CLASS)),
            generator=raw.get("generator"),
        )


def write_sample(sample: Sample, root, split: str) -> ManifestEntry:
    root = Path(root)
    rel = {k: f"{k}/{sample.id}.png" for k in ("images", "layers", "masks")}
    for k in rel:
        (root / k).mkdir(parents=True, exist_ok=True)
    img16 = np.round(sample.image.pixels * 65535).astype(np.uint16)
    try:
        Image.fromarray(img16).save(root / rel["images"])
        Image.fromarray(sample.layers.labels.astype(np.uint8)).save(root / rel["layers"])
        Image.fromarray((sample.choroid.mask * 255).astype(np.uint8)).save(root / rel["masks"])
    except OSError as exc:
        raise OSError(f"could not write sample {sample.id} under {root}: {exc}") from exc
    return ManifestEntry(
        id=sample.id,
        image=rel["images"],
        layers=rel["layers"],
        mask=rel["masks"],
        thickness=sample.thickness.value,
        split=split,
    )


def split_assignment(n_train: int, n_test: int, seed: int) -> list[str]:
    """Deterministic random train/test tags for n_train + n_test indices."""
    tags = np.array(["train"] * n_train + ["test"] * n_test)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5E11])))
    return list(tags[rng.permutation(len(tags))])


def generate_dataset(config: PhantomConfig, n_train: int, n_test: int, out_dir) -> DatasetManifest:
    config.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    entries = []
    for i, tag in enumerate(split_assignment(n_train, n_test, config.seed)):
        entries.append(write_sample(generate_phantom(config, i), out, tag))
    gen = asdict(config)
    gen["choroid_thickness_range"] = list(config.choroid_thickness_range)
    manifest = DatasetManifest(out, entries, config.num_layers, config.choroid_class, gen)
    manifest.write()
    return manifest


def _read_png(path: Path, sample_id: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"sample {sample_id}: missing file {path}")
    with Image.open(path) as im:
        return np.array(im)


def load_sample(manifest: DatasetManifest, entry: ManifestEntry) -> Sample:
    root = Path(manifest.root)
    sid = entry.id
    raw = _read_png(root / entry.image, sid)
    if raw.ndim != 2:
        raise DatasetError(f"sample {sid}: image must be single-channel")
    scale = 65535.0 if raw.dtype == np.uint16 or raw.max() > 255 else 255.0
    image = raw.astype(np.float64) / scale
    labels = _read_png(root / entry.layers, sid).astype(np.int64)
    mask = (_read_png(root / entry.mask, sid) > 0).astype(np.uint8)
    if labels.shape != image.shape or mask.shape != image.shape:
        raise DatasetError(
            f"sample {sid}: dimension mismatch image {image.shape}, layers {labels.shape}, mask {mask.shape}"
        )
    if labels.max() >= manifest.num_classes:
        raise DatasetError(f"sample {sid}: label id {labels.max()} >= num_classes {manifest.num_classes}")
    try:
        sample = Sample(
            image=BScan(image),
            layers=LayerLabelMap(labels, manifest.num_classes),
            choroid=ChoroidMask(mask),
            thickness=Thickness(entry.thickness),
            id=sid,
            choroid_class=manifest.choroid_class,
        )
    except ValueError as exc:
        raise DatasetError(f"sample {sid}: {exc}") from exc
    problems = validate_sample(sample, check_monotone=False)
    if problems:
        raise DatasetError(f"sample {sid}: " + "; ".join(problems))
    return sample


class LazyDataset(Sequence):
    """Samples of a manifest, loaded from disk on access."""

    def __init__(self, manifest: DatasetManifest, split: str | None = None):
        self.manifest = manifest
        self.entries = manifest.entries if split is None else manifest.split(split)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return load_sample(self.manifest, self.entries[i])

    def __iter__(self) -> Iterator[Sample]:
        for e in self.entries:
            yield load_sample(self.manifest, e)


def read_dataset(manifest_path, split: str | None = None) -> LazyDataset:
    return LazyDataset(DatasetManifest.load(manifest_path), split)


def import_annotated(records, out_dir, num_classes: int = 12, choroid_class: int = DEFAULT_CHOROID_CLASS):
    """Write real annotated scans into the dataset layout.

    ``records`` yields ``(id, image, labels, split)`` with ``image`` either
    float in [0, 1] or an integer array (scaled by its dtype's maximum).
    """
    out = Path(out_dir)
    entries = []
    for sid, image, labels, split in records:
        image = np.asarray(image)
        if np.issubdtype(image.dtype, np.integer):
            image = image.astype(np.float64) / np.iinfo(image.dtype).max
        labels = np.asarray(labels, dtype=np.int64)
        mask = (labels == choroid_class).astype(np.uint8)
        sample = Sample(
            BScan(image), LayerLabelMap(labels, num_classes), ChoroidMask(mask), thickness_of(mask), str(sid),
            choroid_class,
        )
        entries.append(write_sample(sample, out, split))
    manifest = DatasetManifest(out, entries, num_classes, choroid_class)
    manifest.write()
    return manifest

