"""Confusion matrices and classification metrics.

Matrix orientation: rows = predicted class, columns = true class, so row
sums are TP+FP and column sums are TP+FN.  Metrics with a zero denominator
are reported as None ("undefined"), never 0 or NaN.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # C x C ints, [predicted][true]
    class_names: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        c = len(self.class_names)
        if self.counts.shape != (c, c):
            raise ValueError("counts must be C x C")
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.class_names != other.class_names:
            raise ValueError("class sets differ")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)


@dataclass(frozen=True)
class BinaryCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class ClassMetrics:
    sensitivity: Optional[float]
    specificity: Optional[float]
    precision: Optional[float]
    accuracy: Optional[float]
    fp_rate: Optional[float]  # FP/TP as a percentage
    fn_rate: Optional[float]  # FN/TP as a percentage
    support: int  # true-class count (TP+FN)


@dataclass(frozen=True)
class MetricsReport:
    per_class: Dict[str, ClassMetrics]
    class_names: Tuple[str, ...]


def accumulate(pairs: Sequence[Tuple[str, str]], class_names: Sequence[str]) -> ConfusionMatrix:
    names = tuple(class_names)
    index = {n: i for i, n in enumerate(names)}
    counts = np.zeros((len(names), len(names)), dtype=np.int64)
    for predicted, true in pairs:
        if predicted not in index:
            raise ValueError(f"unknown predicted label {predicted!r}")
        if true not in index:
            raise ValueError(f"unknown true label {true!r}")
        counts[index[predicted], index[true]] += 1
    return ConfusionMatrix(counts=counts, class_names=names)


def binary_counts(cm: ConfusionMatrix, class_name: str) -> BinaryCounts:
    if class_name not in cm.class_names:
        raise ValueError(f"unknown class {class_name!r}")
    c = cm.class_names.index(class_name)
    tp = int(cm.counts[c, c])
    fp = int(cm.counts[c].sum()) - tp
    fn = int(cm.counts[:, c].sum()) - tp
    tn = cm.total - tp - fp - fn
    return BinaryCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def _ratio(num: int, den: int) -> Optional[float]:
    if den == 0:
        return None
    return num / den


def sensitivity(bc: BinaryCounts) -> Optional[float]:
    return _ratio(bc.tp, bc.tp + bc.fn)


def specificity(bc: BinaryCounts) -> Optional[float]:
    return _ratio(bc.tn, bc.tn + bc.fp)


def precision(bc: BinaryCounts) -> Optional[float]:
    return _ratio(bc.tp, bc.tp + bc.fp)


def accuracy(bc: BinaryCounts) -> Optional[float]:
    return _ratio(bc.tp + bc.tn, bc.total)


def fp_rate(bc: BinaryCounts) -> Optional[float]:
    """FP/TP as a percentage; undefined when TP = 0."""
    if bc.tp == 0:
        return None
    return 100.0 * bc.fp / bc.tp


def fn_rate(bc: BinaryCounts) -> Optional[float]:
    """FN/TP as a percentage; undefined when TP = 0."""
    if bc.tp == 0:
        return None
    return 100.0 * bc.fn / bc.tp


def metrics_report(cm: ConfusionMatrix) -> MetricsReport:
    per_class = {}
    for name in cm.class_names:
        bc = binary_counts(cm, name)
        per_class[name] = ClassMetrics(
            sensitivity=sensitivity(bc),
            specificity=specificity(bc),
            precision=precision(bc),
            accuracy=accuracy(bc),
            fp_rate=fp_rate(bc),
            fn_rate=fn_rate(bc),
            support=bc.tp + bc.fn,
        )
    return MetricsReport(per_class=per_class, class_names=cm.class_names)


def topk_accuracy(rankings: Sequence[Sequence[str]], truths: Sequence[str], k: int) -> float:
    """Fraction of items whose true label appears in the first k of its ranking."""
    if len(rankings) != len(truths):
        raise ValueError("rankings and truths must align")
    if len(rankings) == 0:
        raise ValueError("empty input")
    hits = 0
    for ranking, truth in zip(rankings, truths):
        if len(ranking) < k:
            raise ValueError(f"ranking of length {len(ranking)} shorter than k={k}")
        hits += truth in ranking[:k]
    return hits / len(rankings)


# ---------------------------------------------------------------------------
# CSV output

_UNDEF = "undefined"


def _fmt(v: Optional[float]) -> str:
    return _UNDEF if v is None else repr(v)


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["class", "support", "sensitivity", "specificity", "precision", "accuracy", "fp_rate_pct", "fn_rate_pct"]
        )
        for name in report.class_names:
            m = report.per_class[name]
            writer.writerow(
                [name, m.support, _fmt(m.sensitivity), _fmt(m.specificity), _fmt(m.precision), _fmt(m.accuracy), _fmt(m.fp_rate), _fmt(m.fn_rate)]
            )


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    """Figure-style layout: rows predicted (marginal TP+FP), columns true
    (marginal TP+FN)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["predicted\\true"] + list(cm.class_names) + ["TP+FP"])
        for i, name in enumerate(cm.class_names):
            row = cm.counts[i]
            writer.writerow([name] + [int(v) for v in row] + [int(row.sum())])
        writer.writerow(["TP+FN"] + [int(v) for v in cm.counts.sum(axis=0)] + [cm.total])


def format_summary(report: MetricsReport) -> str:
    lines = ["class support sensitivity specificity precision accuracy"]
    for name in report.class_names:
        m = report.per_class[name]

        def s(v):
            return _UNDEF if v is None else f"{v:.4f}"

        lines.append(
            f"{name} {m.support} {s(m.sensitivity)} {s(m.specificity)} {s(m.precision)} {s(m.accuracy)}"
        )
    return "\n".join(lines) + "\n"
