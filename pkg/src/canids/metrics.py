"""Confusion matrices and one-vs-rest detection metrics.

Zero denominators never raise: the metric is reported as 0 and its name is
added to ``undefined`` so evaluation loops survive degenerate folds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInput, UnknownLabel

REPORT_VERSION = 1
METRIC_KEYS = ("acc", "pre", "rec", "f1", "far")


class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    def __init__(self, labels: Sequence[str], matrix: np.ndarray | None = None) -> None:
        self.labels = tuple(labels)
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels")
        self._index = {name: i for i, name in enumerate(self.labels)}
        n = len(self.labels)
        self.matrix = np.zeros((n, n), dtype=np.int64) if matrix is None else np.array(matrix, dtype=np.int64)
        if self.matrix.shape != (n, n):
            raise ValueError("matrix shape does not match label count")

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise UnknownLabel(f"label {label!r} not in {list(self.labels)}") from None

    def accumulate(self, true_label: str, predicted_label: str) -> "ConfusionMatrix":
        self.matrix[self.index(true_label), self.index(predicted_label)] += 1
        return self

    def accumulate_many(self, true_labels: Iterable[str], predicted: Iterable[str]) -> "ConfusionMatrix":
        t = np.array([self.index(v) for v in true_labels], dtype=np.int64)
        p = np.array([self.index(v) for v in predicted], dtype=np.int64)
        if len(t) != len(p):
            raise ValueError("true and predicted label counts differ")
        n = len(self.labels)
        self.matrix += np.bincount(t * n + p, minlength=n * n).reshape(n, n)
        return self

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.labels != self.labels:
            raise ValueError("cannot merge matrices over different labels")
        return ConfusionMatrix(self.labels, self.matrix + other.matrix)

    def binary(self, positive: str) -> "BinaryCounts":
        i = self.index(positive)
        m = self.matrix
        tp = int(m[i, i])
        fn = int(m[i].sum()) - tp
        fp = int(m[:, i].sum()) - tp
        tn = self.total - tp - fn - fp
        return BinaryCounts(tp, tn, fp, fn)

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "matrix": self.matrix.tolist()}

    @classmethod
    def from_labels(cls, labels: Sequence[str], true_labels, predicted) -> "ConfusionMatrix":
        return cls(labels).accumulate_many(true_labels, predicted)


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
class Metrics:
    acc: float
    pre: float
    rec: float
    f1: float
    far: float
    undefined: frozenset[str] = field(default_factory=frozenset)

    @property
    def dr(self) -> float:
        return self.rec

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in METRIC_KEYS}
        out["undefined_flags"] = sorted(self.undefined)
        return out


def _ratio(num: float, den: float, name: str, undefined: set) -> float:
    if den == 0:
        undefined.add(name)
        return 0.0
    return num / den


def compute(counts: BinaryCounts | ConfusionMatrix, positive_class: str | None = None) -> Metrics:
    """Accuracy, precision, recall (detection rate), F1 and false-alarm rate."""
    if isinstance(counts, ConfusionMatrix):
        if positive_class is None:
            raise ValueError("positive_class is required for a confusion matrix")
        counts = counts.binary(positive_class)
    if counts.total == 0:
        raise EmptyInput("no samples to score")
    undefined: set[str] = set()
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    acc = (tp + tn) / counts.total
    pre = _ratio(tp, tp + fp, "pre", undefined)
    rec = _ratio(tp, tp + fn, "rec", undefined)
    f1 = _ratio(2 * pre * rec, pre + rec, "f1", undefined)
    far = _ratio(fp, tn + fp, "far", undefined)
    return Metrics(acc, pre, rec, f1, far, frozenset(undefined))


def macro_report(cm: ConfusionMatrix) -> dict:
    """Per-class one-vs-rest metrics plus their unweighted means, as a JSON-ready dict."""
    per_class = {label: compute(cm, label) for label in cm.labels}
    macro = {k: float(np.mean([getattr(m, k) for m in per_class.values()])) for k in METRIC_KEYS}
    return {
        "version": REPORT_VERSION,
        "labels": list(cm.labels),
        "matrix": cm.matrix.tolist(),
        "per_class": {label: m.to_json() for label, m in per_class.items()},
        "macro": macro,
        "aliases": {"dr": "rec"},
    }


def macro_f1(cm: ConfusionMatrix, labels: Iterable[str] | None = None) -> float:
    names = cm.labels if labels is None else tuple(labels)
    return float(np.mean([compute(cm, n).f1 for n in names]))
