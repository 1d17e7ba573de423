"""Trial statistics, normal-approximation intervals and difference confusion matrices."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

UNITS = ("fraction", "percent")


@dataclass(frozen=True)
class TrialSeries:
    values: tuple
    unit: str = "percent"

    def __post_init__(self):
        if len(self.values) == 0:
            raise ValueError("a trial series needs at least one value")
        if self.unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.unit == "fraction" and not all(0.0 <= v <= 1.0 for v in self.values):
            raise ValueError("fraction values must lie in [0, 1]; use unit='percent'")

    @property
    def n(self) -> int:
        return len(self.values)

    def to(self, unit: str) -> "TrialSeries":
        if unit == self.unit:
            return self
        k = 100.0 if unit == "percent" else 0.01
        return TrialSeries(tuple(v * k for v in self.values), unit)


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    n: int
    unit: str
    single_trial: bool = False  # std is 0 by convention, not measured


def mean_std(series) -> Summary:
    """Mean and unbiased (n-1) sample standard deviation."""
    if not isinstance(series, TrialSeries):
        series = TrialSeries(tuple(series))
    x = np.sort(np.asarray(series.values, dtype=np.float64))  # order-independent summation
    if series.n == 1:
        return Summary(float(x[0]), 0.0, 1, series.unit, True)
    return Summary(float(x.mean()), float(x.std(ddof=1)), series.n, series.unit)


def half_width(sd: float, n: int, z: float = 1.96) -> float:
    if n < 1:
        raise ValueError("n must be at least 1")
    if sd < 0:
        raise ValueError("sd must be non-negative")
    return z * sd / math.sqrt(n)


def confidence_interval(mean: float, sd: float, n: int, z: float = 1.96):
    """``mean -/+ z * sd / sqrt(n)`` under a Gaussian assumption."""
    h = half_width(sd, n, z)
    return mean - h, mean + h


@dataclass(frozen=True)
class DiffConfusion:
    matrix: np.ndarray
    labels: tuple

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + list(self.labels))
        for lab, row in zip(self.labels, self.matrix):
            w.writerow([lab] + [int(v) for v in row])
        return buf.getvalue()


def diff_confusion(conf_a, conf_b, labels=None) -> DiffConfusion:
    """Elementwise ``A - B`` of two confusion matrices of equal square shape."""
    a = np.asarray(conf_a)
    b = np.asarray(conf_b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {a.shape}")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    labels = tuple(labels) if labels is not None else tuple(range(a.shape[0]))
    if len(labels) != a.shape[0]:
        raise ValueError("label count does not match matrix size")
    return DiffConfusion(a.astype(np.int64) - b.astype(np.int64), labels)


def format_interval(summary: Summary, z: float = 1.96) -> str:
    lo, hi = confidence_interval(summary.mean, summary.std, summary.n, z)
    note = " (single trial)" if summary.single_trial else ""
    return (f"mean {summary.mean:.4f} sd {summary.std:.4f} (sample, n-1) n {summary.n} "
            f"[{lo:.4f}, {hi:.4f}] {summary.unit}{note}")
