"""Segmentation metrics: IoU accumulation, mean-IoU, binary-IoU, run summaries.

Counts are accumulated over every query of every episode in a run and the
IoU is taken from the totals (dataset-level IoU), not averaged per episode.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

IGNORE = 255


class EmptyAccumulatorError(ValueError):
    pass


def _valid(truth: np.ndarray) -> np.ndarray:
    return (truth >= 0) & (truth != IGNORE)


@dataclass
class IoUAccumulator:
    """Per-class intersection and union counts for class ids 0..num_classes."""

    num_classes: int
    intersection: np.ndarray = field(default=None)
    union: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.num_classes + 1
        if self.intersection is None:
            self.intersection = np.zeros(n, dtype=np.int64)
        if self.union is None:
            self.union = np.zeros(n, dtype=np.int64)

    def accumulate(self, predicted: np.ndarray, truth: np.ndarray, id_map: np.ndarray | None = None) -> "IoUAccumulator":
        """Add one prediction. ``id_map[local] = global`` translates episode
        labels of both masks before counting; pixels whose truth is 255 or
        negative are skipped."""
        predicted, truth = np.asarray(predicted), np.asarray(truth)
        if predicted.shape != truth.shape:
            raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
        keep = _valid(truth)
        p, t = predicted[keep].astype(np.int64), truth[keep].astype(np.int64)
        if id_map is not None:
            id_map = np.asarray(id_map)
            p, t = id_map[p], id_map[t]
        n = self.num_classes + 1
        if (p.size and (p.min() < 0 or p.max() >= n)) or (t.size and t.max() >= n):
            raise ValueError("label outside the accumulator's class range")
        inter = np.bincount(p[p == t], minlength=n)
        area_p = np.bincount(p, minlength=n)
        area_t = np.bincount(t, minlength=n)
        self.intersection += inter
        self.union += area_p + area_t - inter
        return self

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators over different class ranges")
        return IoUAccumulator(
            self.num_classes, self.intersection + other.intersection, self.union + other.union
        )

    __add__ = merge

    def iou(self) -> np.ndarray:
        """Per-class IoU, NaN where the union is empty."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), np.nan)


def mean_iou(acc: IoUAccumulator) -> float:
    """Unweighted mean IoU over foreground classes with a nonempty union."""
    present = acc.union[1:] > 0
    if not present.any():
        raise EmptyAccumulatorError("no foreground class has been observed")
    return float(np.mean(acc.iou()[1:][present]))


def binarize(mask: np.ndarray) -> np.ndarray:
    """Merge all foreground classes into 1; ignore labels are kept."""
    mask = np.asarray(mask)
    out = (mask > 0).astype(np.int64)
    out[~_valid(mask)] = -1
    return out


def binary_accumulator() -> IoUAccumulator:
    return IoUAccumulator(1)


def accumulate_binary(acc: IoUAccumulator, predicted: np.ndarray, truth: np.ndarray) -> IoUAccumulator:
    return acc.accumulate(binarize(predicted).clip(0), binarize(truth))


def binary_iou(acc: IoUAccumulator) -> float:
    """Mean of background IoU and merged-foreground IoU.

    A class whose union is empty is left out of the average (an all
    background run scores its background IoU alone).
    """
    if acc.num_classes != 1:
        raise ValueError("binary_iou needs a two-class accumulator")
    if not (acc.union > 0).any():
        raise EmptyAccumulatorError("binary accumulator is empty")
    return float(np.nanmean(acc.iou()))


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    runs: int


def summarize(values: Sequence[float]) -> Summary:
    """Mean and sample standard deviation (0 for a single run)."""
    if len(values) < 1:
        raise ValueError("need at least one run")
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return Summary(float(arr.mean()), std, int(arr.size))


def multi_run_report(results: Sequence[Mapping[str, float]]) -> dict[str, Summary]:
    """Summarise each metric over runs; ``results`` holds one dict per run."""
    if not results:
        raise ValueError("need at least one run")
    keys = list(results[0])
    return {k: summarize([r[k] for r in results]) for k in keys}


def format_records(records: Iterable[Mapping[str, object]]) -> str:
    """One ``key=value`` line per record, keys in insertion order."""
    lines = []
    for rec in records:
        lines.append(" ".join(f"{k}={_fmt(v)}" for k, v in rec.items()))
    return "\n".join(lines) + ("\n" if lines else "")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def fold_table(rows: Mapping[str, Mapping[int, float]], folds: Sequence[int]) -> str:
    """CSV with one row per setting, one column per fold and a final mean."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["setting", *(f"fold{f}" for f in folds), "mean"])
    for name, per_fold in rows.items():
        vals = [per_fold.get(f, float("nan")) for f in folds]
        present = [v for v in vals if not math.isnan(v)]
        mean = sum(present) / len(present) if present else float("nan")
        writer.writerow([name, *(_fmt(float(v)) for v in vals), _fmt(float(mean))])
    return buf.getvalue()
