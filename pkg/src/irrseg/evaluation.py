"""Accuracy and census-comparison analytics.

Confusion counts are 64-bit (statewide tallies run to nine digits); rows are
actual classes, columns predicted. Metric conventions: precision, recall,
and f1 fall back to 0 whenever their denominator vanishes, so reports never
carry NaN. County regressions are plain ordinary least squares with an
intercept; r^2 = 1 - SS_res / SS_tot.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .geodata import CODE_NAMES, IRRIGATED, LabelRaster


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (k, k) int64, rows actual, cols predicted
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ShapeError(f"confusion counts {self.counts.shape} vs {k} class names")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.class_names != other.class_names:
            raise ValueError("cannot merge confusion matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)


@dataclass
class RegressionSummary:
    slope: float
    intercept: float
    r_squared: float
    n: int


def confusion(predicted: LabelRaster, labels: LabelRaster,
              num_classes: int = 3) -> ConfusionMatrix:
    """Count labeled pixels by (actual, predicted); unlabeled pixels skipped."""
    if predicted.grid != labels.grid:
        raise ShapeError("predicted and label rasters live on different grids")
    mask = labels.data > 0
    a = labels.data[mask].astype(np.int64) - 1
    p = predicted.data[mask].astype(np.int64) - 1
    valid = (p >= 0) & (p < num_classes)
    flat = a[valid] * num_classes + p[valid]
    counts = np.bincount(flat, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )
    names = tuple(CODE_NAMES[c + 1] for c in range(num_classes)) if num_classes == 3 else tuple(
        f"class{c + 1}" for c in range(num_classes)
    )
    return ConfusionMatrix(counts, names)


def class_metrics(m: ConfusionMatrix, cls: int) -> tuple[float, float, float]:
    """(precision, recall, f1) for one 0-based class index; 0/0 -> 0."""
    k = len(m.class_names)
    if not 0 <= cls < k:
        raise ValueError(f"class index {cls} out of range 0..{k - 1}")
    tp = int(m.counts[cls, cls])
    fp = int(m.counts[:, cls].sum()) - tp
    fn = int(m.counts[cls, :].sum()) - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def overall_accuracy(m: ConfusionMatrix) -> float:
    if m.total == 0:
        raise ValueError("overall accuracy of an empty confusion matrix")
    return float(np.trace(m.counts)) / m.total


def binary_confusion(predicted01: np.ndarray, actual01: np.ndarray,
                     labeled: np.ndarray) -> ConfusionMatrix:
    """2x2 confusion over labeled pixels, classes (non-irrigated, irrigated)."""
    a = actual01[labeled].astype(np.int64)
    p = predicted01[labeled].astype(np.int64)
    counts = np.bincount(a * 2 + p, minlength=4).reshape(2, 2)
    return ConfusionMatrix(counts, ("non-irrigated", "irrigated"))


@dataclass
class ProductMetrics:
    product: str
    years_used: list[int]
    missing_years: list[int]
    overall_accuracy: float
    precision: float
    recall: float
    f1: float


def compare_products(
    product_rasters: dict[str, dict[int, np.ndarray]],
    labels: dict[int, LabelRaster],
    years: list[int],
) -> list[ProductMetrics]:
    """Pixel-wise product comparison in binary (irrigated vs not) space.

    Product rasters may be binary {0,1} or class-coded (anything equal to
    the irrigated code counts as irrigated). Counts aggregate across the
    requested years; a product missing a year gets the gap recorded instead
    of failing, and every product is scored on the identical labeled pixels.
    """
    results = []
    for name, per_year in product_rasters.items():
        total = ConfusionMatrix(np.zeros((2, 2), np.int64), ("non-irrigated", "irrigated"))
        used, missing = [], []
        for year in years:
            if year not in per_year or year not in labels:
                missing.append(year)
                continue
            lab = labels[year]
            raster = np.asarray(per_year[year])
            labeled = lab.data > 0
            actual01 = (lab.data == IRRIGATED).astype(np.uint8)
            pred01 = (raster == IRRIGATED).astype(np.uint8)
            total = total.merge(binary_confusion(pred01, actual01, labeled))
            used.append(year)
        if total.total:
            oa = overall_accuracy(total)
            precision, recall, f1 = class_metrics(total, 1)
        else:
            oa = precision = recall = f1 = 0.0
        results.append(ProductMetrics(name, used, missing, oa, precision, recall, f1))
    return results


def regress_areas(x: dict[str, float], y: dict[str, float]) -> RegressionSummary:
    """OLS fit y = slope * x + intercept over counties present in both maps."""
    shared = sorted(set(x) & set(y))
    if len(shared) < 2:
        raise ValueError(f"regression needs at least 2 shared counties, got {len(shared)}")
    xv = np.array([x[c] for c in shared], dtype=np.float64)
    yv = np.array([y[c] for c in shared], dtype=np.float64)
    xm, ym = xv.mean(), yv.mean()
    sxx = ((xv - xm) ** 2).sum()
    if sxx == 0:
        raise ValueError("zero variance in x areas; regression undefined")
    slope = ((xv - xm) * (yv - ym)).sum() / sxx
    intercept = ym - slope * xm
    ss_res = ((yv - (slope * xv + intercept)) ** 2).sum()
    ss_tot = ((yv - ym) ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RegressionSummary(float(slope), float(intercept), float(r2), len(shared))


def iqr_histograms(
    final_class: np.ndarray, iqr: np.ndarray, labels: LabelRaster
) -> dict[int, dict[str, np.ndarray]]:
    """Per predicted class, 256-bin histograms of the predicted-class IQR,
    split by whether the (labeled) pixel was classified correctly."""
    if final_class.shape != labels.data.shape:
        raise ShapeError("class raster and labels have different shapes")
    out: dict[int, dict[str, np.ndarray]] = {}
    labeled = labels.data > 0
    num_classes = iqr.shape[0]
    for cls in range(1, num_classes + 1):
        sel = labeled & (final_class == cls)
        vals = iqr[cls - 1][sel]
        correct = labels.data[sel] == cls
        out[cls] = {
            "correct": np.bincount(vals[correct], minlength=256).astype(np.int64),
            "incorrect": np.bincount(vals[~correct], minlength=256).astype(np.int64),
        }
    return out


def change_analysis(
    yearly_areas: dict[int, dict[str, float]],
    period: int = 5,
    exclude: set[int] | None = None,
) -> dict[str, float]:
    """Mean county area per non-overlapping calendar block; delta last-first.

    Blocks are formed from the first year: block_index = (year - first) //
    period. Excluded years drop out of their block's mean; a block left with
    no usable years is an error.
    """
    exclude = exclude or set()
    years = sorted(yearly_areas)
    if not years:
        raise ValueError("no yearly areas given")
    first, last = years[0], years[-1]
    n_blocks = (last - first) // period + 1
    if n_blocks < 2:
        raise ValueError(f"years {first}..{last} span fewer than two {period}-year periods")
    blocks: list[list[int]] = [[] for _ in range(n_blocks)]
    for year in years:
        if year in exclude:
            continue
        blocks[(year - first) // period].append(year)
    for i, blk in enumerate(blocks):
        if not blk:
            raise ValueError(f"period block {i} has no usable years after exclusions")

    def block_mean(block_years: list[int]) -> dict[str, float]:
        sums: dict[str, float] = {}
        hits: dict[str, int] = {}
        for year in block_years:
            for county, acres in yearly_areas[year].items():
                sums[county] = sums.get(county, 0.0) + acres
                hits[county] = hits.get(county, 0) + 1
        return {c: sums[c] / hits[c] for c in sums}

    first_mean = block_mean(blocks[0])
    last_mean = block_mean(blocks[-1])
    return {
        county: last_mean[county] - first_mean[county]
        for county in sorted(set(first_mean) & set(last_mean))
    }


# -- CSV report writers -------------------------------------------------------


def write_metrics_csv(path, m: ConfusionMatrix) -> None:
    """Confusion counts plus per-class P/R/F1 and overall accuracy."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["actual\\predicted"] + list(m.class_names))
        for i, name in enumerate(m.class_names):
            writer.writerow([name] + [int(v) for v in m.counts[i]])
        writer.writerow([])
        writer.writerow(["class", "precision", "recall", "f1"])
        for i, name in enumerate(m.class_names):
            p, r, f1 = class_metrics(m, i)
            writer.writerow([name, f"{p:.6f}", f"{r:.6f}", f"{f1:.6f}"])
        writer.writerow(["overall_accuracy", f"{overall_accuracy(m):.6f}", "", ""])


def write_histograms_csv(path, histograms: dict[int, dict[str, np.ndarray]]) -> None:
    """bin,count rows per (class, correctness), with cumulative columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "outcome", "bin", "count", "cumulative"])
        for cls in sorted(histograms):
            for outcome in ("correct", "incorrect"):
                hist = histograms[cls][outcome]
                cum = np.cumsum(hist)
                for b in range(256):
                    writer.writerow([CODE_NAMES.get(cls, cls), outcome, b,
                                     int(hist[b]), int(cum[b])])


def write_regression_csv(path, rows: list[tuple[int, str, RegressionSummary]]) -> None:
    """rows: (year, comparison name, summary)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["year", "comparison", "slope", "intercept", "r_squared", "n"])
        for year, name, s in rows:
            writer.writerow([year, name, f"{s.slope:.6f}", f"{s.intercept:.6f}",
                             f"{s.r_squared:.6f}", s.n])
