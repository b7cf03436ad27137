"""Pixel confusion counts and segmentation scores.

Per-class precision, recall, F1 (harmonic mean) and intersection-over-union
are computed one-vs-rest from integer pixel tallies, with macro averaging
over either the lane classes (background excluded, the default) or all
classes.  Every score is a single division of exact integer counts, so the
set identity IoU = F1 / (2 - F1) holds to rational-arithmetic exactness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CLASS_SETS = ("lane-classes", "all-classes")


class ConfusionCounts:
    """One-vs-rest TP/FP/FN/TN pixel tallies per class; merge by summation."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)
        self.tn = np.zeros(num_classes, dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        for name, mask in (("prediction", pred), ("ground truth", gt)):
            if mask.size and (mask.min() < 0 or mask.max() >= self.num_classes):
                raise ValueError(
                    f"{name} contains class index outside [0, {self.num_classes})"
                )
        total = pred.size
        for c in range(self.num_classes):
            p = pred == c
            g = gt == c
            tp = int(np.count_nonzero(p & g))
            fp = int(np.count_nonzero(p & ~g))
            fn = int(np.count_nonzero(~p & g))
            self.tp[c] += tp
            self.fp[c] += fp
            self.fn[c] += fn
            self.tn[c] += total - tp - fp - fn

    def merge(self, other: "ConfusionCounts"):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge counts with different class counts")
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.tn += other.tn


def precision_score(counts: ConfusionCounts, cls: int) -> float:
    denom = int(counts.tp[cls]) + int(counts.fp[cls])
    return int(counts.tp[cls]) / denom if denom else 0.0


def recall_score(counts: ConfusionCounts, cls: int) -> float:
    denom = int(counts.tp[cls]) + int(counts.fn[cls])
    return int(counts.tp[cls]) / denom if denom else 0.0


def f1_score(counts: ConfusionCounts, cls: int) -> float:
    """2PR/(P+R), evaluated as 2TP/(2TP+FP+FN) so the division happens once.

    Defined as 0 when precision and recall are both undefined or zero.
    """
    tp, fp, fn = int(counts.tp[cls]), int(counts.fp[cls]), int(counts.fn[cls])
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def iou_score(counts: ConfusionCounts, cls: int) -> float:
    """TP / (TP + FP + FN); 0 when the union is empty."""
    tp, fp, fn = int(counts.tp[cls]), int(counts.fp[cls]), int(counts.fn[cls])
    denom = tp + fp + fn
    return tp / denom if denom else 0.0


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    iou: float
    tp: int
    fp: int
    fn: int


@dataclass
class MetricsReport:
    class_set: str
    classes: list[int]
    per_class: dict[int, ClassScores]
    mean_f1: float
    mean_iou: float


def mean_report(counts: ConfusionCounts, class_set: str = "lane-classes") -> MetricsReport:
    """Unweighted macro mean over the chosen class set.

    "lane-classes" excludes class 0 (background); "all-classes" includes it.
    Degenerate classes (absent from both prediction and truth) score 0 and
    still enter the mean.
    """
    if class_set not in CLASS_SETS:
        raise ValueError(f"class_set must be one of {CLASS_SETS}, got {class_set!r}")
    classes = list(range(counts.num_classes)) if class_set == "all-classes" else list(
        range(1, counts.num_classes)
    )
    per_class = {
        c: ClassScores(
            precision=precision_score(counts, c),
            recall=recall_score(counts, c),
            f1=f1_score(counts, c),
            iou=iou_score(counts, c),
            tp=int(counts.tp[c]),
            fp=int(counts.fp[c]),
            fn=int(counts.fn[c]),
        )
        for c in classes
    }
    mean_f1 = sum(s.f1 for s in per_class.values()) / len(classes)
    mean_iou = sum(s.iou for s in per_class.values()) / len(classes)
    return MetricsReport(class_set, classes, per_class, mean_f1, mean_iou)


def report_to_dict(report: MetricsReport) -> dict:
    """JSON-ready form; scores as percentages rounded to 2 decimals."""

    def pct(x):
        return round(100.0 * x, 2)

    return {
        "class-set": report.class_set,
        "per-class": {
            str(c): {
                "P": pct(s.precision),
                "R": pct(s.recall),
                "F1": pct(s.f1),
                "IoU": pct(s.iou),
                "TP": s.tp,
                "FP": s.fp,
                "FN": s.fn,
            }
            for c, s in report.per_class.items()
        },
        "mean-F1": pct(report.mean_f1),
        "mean-IoU": pct(report.mean_iou),
    }


def reports_to_json(counts: ConfusionCounts) -> str:
    """Both averaging sets as one JSON document."""
    doc = {cs: report_to_dict(mean_report(counts, cs)) for cs in CLASS_SETS}
    return json.dumps(doc, indent=2, sort_keys=True)
