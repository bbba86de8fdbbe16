"""Confusion matrices, threshold metrics and ROC analysis for binary labels
(positive = 1 = Tumor)."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float
    # names of metrics whose denominator was zero (reported as 0)
    undefined: Tuple[str, ...] = ()


@dataclass(frozen=True)
class RocCurve:
    points: List[Tuple[float, float]]
    thresholds: List[float]
    auc: float


def confusion(labels: Sequence[int], probs: Sequence[float], threshold: float = 0.5) -> ConfusionMatrix:
    y = np.asarray(labels).astype(int)
    p = np.asarray(probs, dtype=np.float64)
    if y.shape != p.shape:
        raise ContractError(f"labels {y.shape} and scores {p.shape} differ in length")
    pred = p >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fn=int(np.sum(~pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
    )


def _ratio(num: float, den: float, name: str, undefined: list) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def metrics_from_confusion(cm: ConfusionMatrix) -> Metrics:
    if cm.total <= 0:
        raise ContractError("metrics of an empty confusion matrix are undefined")
    undefined: list = []
    accuracy = (cm.tp + cm.tn) / cm.total
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", undefined)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", undefined)
    specificity = _ratio(cm.tn, cm.tn + cm.fp, "specificity", undefined)
    if "precision" in undefined or "recall" in undefined:
        f1 = 0.0
        undefined.append("f1")
    else:
        f1 = _ratio(2 * precision * recall, precision + recall, "f1", undefined)
    return Metrics(accuracy, precision, recall, f1, specificity, tuple(undefined))


def roc_auc(labels: Sequence[int], probs: Sequence[float]) -> RocCurve:
    """ROC by sweeping every distinct score as a threshold (score >= t is
    positive), from +inf down; AUC by the trapezoidal rule."""
    y = np.asarray(labels).astype(int)
    s = np.asarray(probs, dtype=np.float64)
    if y.shape != s.shape:
        raise ContractError(f"labels {y.shape} and scores {s.shape} differ in length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC analysis needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each block of tied scores
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tps = np.cumsum(y_sorted == 1)[ends]
    fps = np.cumsum(y_sorted == 0)[ends]
    tp_counts = np.r_[0, tps]
    fp_counts = np.r_[0, fps]
    fpr = fp_counts / n_neg
    tpr = tp_counts / n_pos
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    thresholds = [float("inf")] + [float(t) for t in s_sorted[ends]]
    return RocCurve(list(zip(fpr.tolist(), tpr.tolist())), thresholds, auc)


def metrics_json(cm: ConfusionMatrix, m: Metrics, roc: RocCurve, threshold: float) -> dict:
    return {
        "accuracy": m.accuracy,
        "precision": m.precision,
        "recall": m.recall,
        "f1": m.f1,
        "specificity": m.specificity,
        "auc": roc.auc,
        "confusion": {"tp": cm.tp, "fn": cm.fn, "fp": cm.fp, "tn": cm.tn},
        "threshold": threshold,
    }


def write_metrics_json(path, cm: ConfusionMatrix, m: Metrics, roc: RocCurve, threshold: float) -> None:
    Path(path).write_text(json.dumps(metrics_json(cm, m, roc, threshold), indent=2))


def write_roc_csv(path, roc: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        for (fpr, tpr), t in zip(roc.points, roc.thresholds):
            w.writerow([repr(fpr), repr(tpr), repr(t)])
