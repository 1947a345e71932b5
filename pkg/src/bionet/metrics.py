"""Overlap, boundary and thickness metrics for choroid segmentation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .types import BoundaryCurve, ChoroidMask, Thickness

TABLE_COLUMNS = ("IOU", "AUSDE", "DI", "Acc", "Sen")
UNITS_LINE = "units: IOU (%), AUSDE (pixels), DI (%), Acc (%), Sen (%)"


def _as_bool(mask) -> np.ndarray:
    if isinstance(mask, ChoroidMask):
        mask = mask.mask
    return np.asarray(mask) != 0


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def iou(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def accuracy(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.count_nonzero(p == g)) / p.size


def sensitivity(pred, gt) -> float:
    p, g = _pair(pred, gt)
    positives = int(g.sum())
    if positives == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / positives


def extract_boundaries(mask) -> tuple[BoundaryCurve, BoundaryCurve]:
    """First and last foreground row per column (NaN where the column is empty)."""
    m = _as_bool(mask)
    h, w = m.shape
    has = m.any(axis=0)
    first = np.argmax(m, axis=0).astype(np.float64)
    last = (h - 1 - np.argmax(m[::-1], axis=0)).astype(np.float64)
    first[~has] = np.nan
    last[~has] = np.nan
    return BoundaryCurve(first, h), BoundaryCurve(last, h)


def ausde(pred: BoundaryCurve, gt: BoundaryCurve, height: int | None = None) -> float:
    """Average unsigned surface detection error in pixels.

    Columns present in only one curve cost ``height`` pixels; columns absent
    in both are skipped. Returns NaN when every column is skipped.
    """
    if pred.width != gt.width:
        raise ValueError(f"curve widths differ: {pred.width} vs {gt.width}")
    if height is None:
        height = max(pred.height, gt.height)
    pp, gp = pred.present, gt.present
    both = pp & gp
    one = pp ^ gp
    n = int(both.sum() + one.sum())
    if n == 0:
        return math.nan
    err = np.abs(pred.rows[both] - gt.rows[both]).sum() + height * int(one.sum())
    return float(err / n)


def choroid_ausde(pred, gt) -> tuple[float, float, float]:
    p, g = _pair(pred, gt)
    pu, pl = extract_boundaries(p)
    gu, gl = extract_boundaries(g)
    upper = ausde(pu, gu, p.shape[0])
    lower = ausde(pl, gl, p.shape[0])
    return upper, lower, (upper + lower) / 2.0


def thickness_of(mask) -> Thickness:
    """Mean foreground pixel count over the columns that contain any foreground."""
    m = _as_bool(mask)
    counts = m.sum(axis=0)
    counts = counts[counts > 0]
    if counts.size == 0:
        return Thickness(0.0)
    return Thickness(float(counts.mean()))


@dataclass(frozen=True)
class MetricsReport:
    dice: float
    iou: float
    ausde_upper: float
    ausde_lower: float
    ausde_mean: float
    accuracy: float
    sensitivity: float
    n_samples: int
    n_ausde_undefined: int = 0

    def table_row(self) -> dict[str, float]:
        """Values in Table-1 order and units: percentages for ratios, pixels for AUSDE."""
        return {
            "IOU": 100.0 * self.iou,
            "AUSDE": self.ausde_mean,
            "DI": 100.0 * self.dice,
            "Acc": 100.0 * self.accuracy,
            "Sen": 100.0 * self.sensitivity,
        }

    def to_row(self, sep: str = ",") -> str:
        return sep.join(f"{v:.2f}" for v in self.table_row().values())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def to_text(self) -> str:
        lines = [f"samples: {self.n_samples}"]
        lines += [
            f"dice: {self.dice:.6f}",
            f"iou: {self.iou:.6f}",
            f"ausde_upper: {self.ausde_upper:.6f}",
            f"ausde_lower: {self.ausde_lower:.6f}",
            f"ausde_mean: {self.ausde_mean:.6f}",
            f"accuracy: {self.accuracy:.6f}",
            f"sensitivity: {self.sensitivity:.6f}",
        ]
        if self.n_ausde_undefined:
            lines.append(f"ausde_undefined_samples: {self.n_ausde_undefined}")
        return "\n".join(lines)


def format_table(rows: dict[str, MetricsReport], sep: str = "\t") -> str:
    """Render named reports as a Table-1 style text table."""
    name_w = max([len("Method")] + [len(k) for k in rows])
    header = sep.join(["Method".ljust(name_w), *TABLE_COLUMNS])
    out = [header]
    for name, rep in rows.items():
        vals = rep.table_row()
        out.append(sep.join([name.ljust(name_w)] + [f"{vals[c]:.2f}" for c in TABLE_COLUMNS]))
    out.append(UNITS_LINE)
    return "\n".join(out)


def evaluate_dataset(predictions: Sequence, gts: Sequence) -> MetricsReport:
    """Macro-average every metric over sample pairs."""
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} predictions for {len(gts)} ground truths")
    if not gts:
        raise ValueError("cannot evaluate an empty dataset")
    rows = []
    for p, g in zip(predictions, gts):
        up, lo, mean = choroid_ausde(p, g)
        rows.append((dice(p, g), iou(p, g), up, lo, mean, accuracy(p, g), sensitivity(p, g)))
    arr = np.array(rows, dtype=np.float64)
    undefined = np.isnan(arr[:, 4])

    def ausde_avg(col):
        vals = arr[~np.isnan(arr[:, col]), col]
        return float(vals.mean()) if vals.size else math.nan

    return MetricsReport(
        dice=float(arr[:, 0].mean()),
        iou=float(arr[:, 1].mean()),
        ausde_upper=ausde_avg(2),
        ausde_lower=ausde_avg(3),
        ausde_mean=ausde_avg(4),
        accuracy=float(arr[:, 5].mean()),
        sensitivity=float(arr[:, 6].mean()),
        n_samples=len(gts),
        n_ausde_undefined=int(undefined.sum()),
    )
