"""Evaluation metrics for class maps: segmentation agreement, road-network
coherence, boundary noise, distribution distance and entrance detection.

All functions are pure and read class ids only; legend colors never affect
results. Connectivity is 4-connected by default (diagonal contact is not a
traversable path), with 8-connectivity behind a flag.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import StructureError
from .legend import ClassMap, class_histogram

FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
EIGHT = np.ones((3, 3), dtype=int)


@dataclass
class ConfusionMatrix:
    """K x K pixel counts; rows are truth classes, columns predictions."""

    counts: np.ndarray
    legend: object

    def total(self) -> int:
        return int(self.counts.sum())

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where a class is absent from both sides."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        with np.errstate(invalid="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def mean_iou(self) -> float:
        return float(np.nanmean(self.iou()))

    def worst_off_diagonal(self):
        """(truth name, predicted name, fraction) of the largest confusion."""
        off = self.counts.astype(np.float64).copy()
        np.fill_diagonal(off, 0.0)
        ti, pi = np.unravel_index(np.argmax(off), off.shape)
        return (
            self.legend.entries[ti].name,
            self.legend.entries[pi].name,
            float(off[ti, pi] / self.counts.sum()),
        )


def confusion(pred: ClassMap, truth: ClassMap) -> ConfusionMatrix:
    if pred.legend != truth.legend:
        raise StructureError("confusion requires maps sharing one legend")
    if pred.data.shape != truth.data.shape:
        raise StructureError(
            f"dimension mismatch: pred {pred.data.shape} vs truth {truth.data.shape}"
        )
    k = len(truth.legend)
    idx = truth.data.ravel() * k + pred.data.ravel()
    counts = np.bincount(idx, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts=counts, legend=truth.legend)


def road_connectivity(cmap: ClassMap, eight_connected: bool = False):
    """Fraction of road pixels in the largest connected road component.

    Returns None (excluded from aggregates) when the map has no roads.
    """
    road_id = cmap.legend.class_id("Roads")
    mask = cmap.data == road_id
    if not mask.any():
        return None
    labels, n = ndimage.label(mask, structure=EIGHT if eight_connected else FOUR)
    sizes = np.bincount(labels.ravel())[1:]
    return float(sizes.max() / mask.sum())


def boundary_noise(cmap: ClassMap) -> float:
    """Fraction of pixels whose 3x3 neighborhood mixes >= 3 classes."""
    data = cmap.data
    if data.size == 0:
        raise StructureError("empty class map")
    padded = np.pad(data, 1, mode="edge")
    h, w = data.shape
    stack = np.stack(
        [padded[dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)]
    )
    stack.sort(axis=0)
    distinct = (np.diff(stack, axis=0) != 0).sum(axis=0) + 1
    return float((distinct >= 3).mean())


def histogram_distance(a: ClassMap, b: ClassMap) -> float:
    """Total-variation distance between the class-fraction vectors."""
    if a.legend != b.legend:
        raise StructureError("histogram_distance requires maps sharing one legend")
    return float(0.5 * np.abs(class_histogram(a) - class_histogram(b)).sum())


def entrance_count(layout: ClassMap, environment: ClassMap) -> int:
    """Maximal runs of layout road pixels on the site boundary that touch
    an urban road of the environment."""
    if layout.data.shape != environment.data.shape:
        raise StructureError(
            f"dimension mismatch: layout {layout.data.shape} vs "
            f"environment {environment.data.shape}"
        )
    site = environment.data == environment.legend.mask_class_id()
    if not site.any():
        raise StructureError("environment map carries no site mask pixels")
    boundary = site & ~ndimage.binary_erosion(site, structure=FOUR, border_value=0)
    urban = environment.data == environment.legend.class_id("Urban road")
    near_urban = ndimage.binary_dilation(urban, structure=FOUR)
    qualifying = boundary & near_urban & (layout.data == layout.legend.class_id("Roads"))
    if not qualifying.any():
        return 0
    _, n = ndimage.label(qualifying, structure=FOUR)
    return int(n)


@dataclass
class LayoutReport:
    """Per-scene quality proxies for one generated layout."""

    road_connectivity: float | None
    boundary_noise: float
    histogram_distance: float | None
    entrance_count: int
    class_fractions: dict

    def to_row(self) -> dict:
        return {
            "road_connectivity": self.road_connectivity,
            "boundary_noise": self.boundary_noise,
            "histogram_distance": self.histogram_distance,
            "entrance_count": self.entrance_count,
            **{f"frac_{name}": v for name, v in self.class_fractions.items()},
        }


def layout_report(
    layout: ClassMap, environment: ClassMap, reference: ClassMap | None = None
) -> LayoutReport:
    hist = class_histogram(layout)
    return LayoutReport(
        road_connectivity=road_connectivity(layout),
        boundary_noise=boundary_noise(layout),
        histogram_distance=None if reference is None else histogram_distance(layout, reference),
        entrance_count=entrance_count(layout, environment),
        class_fractions={e.name: float(hist[e.class_id]) for e in layout.legend.entries},
    )


def aggregate_rows(rows: list[dict]) -> dict:
    """Mean of every numeric column, skipping absent (None) values."""
    out = {}
    for key in {k for row in rows for k in row}:
        values = [row[key] for row in rows if isinstance(row.get(key), (int, float))]
        if values:
            out[f"mean_{key}"] = float(np.mean(values))
    return out


def write_report(out_dir: str | Path, rows: list[dict], summary: dict) -> None:
    """Emit per-scene CSV rows plus a JSON summary document."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = sorted({k for row in rows for k in row})
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
