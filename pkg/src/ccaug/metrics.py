"""Accuracy, Macro-F1 and multi-seed aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NUM_CLASSES = 3


def _check(pred: Sequence[int], gold: Sequence[int]) -> None:
    if len(pred) != len(gold):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gold)} gold labels")
    if not gold:
        raise ValueError("empty label lists")


def accuracy(pred: Sequence[int], gold: Sequence[int]) -> float:
    _check(pred, gold)
    return sum(int(p == g) for p, g in zip(pred, gold)) / len(gold)


def confusion_matrix(pred: Sequence[int], gold: Sequence[int], num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows are gold classes, columns predicted classes."""
    _check(pred, gold)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(gold), np.asarray(pred)), 1)
    return cm


def per_class_f1(pred: Sequence[int], gold: Sequence[int], num_classes: int = NUM_CLASSES) -> list[float]:
    cm = confusion_matrix(pred, gold, num_classes)
    out = []
    for c in range(num_classes):
        tp = cm[c, c]
        denom = 2 * tp + (cm[:, c].sum() - tp) + (cm[c, :].sum() - tp)
        # a class absent from both lists scores 0, not excluded
        out.append(float(2 * tp / denom) if denom else 0.0)
    return out


def macro_f1(pred: Sequence[int], gold: Sequence[int], num_classes: int = NUM_CLASSES) -> float:
    return float(np.mean(per_class_f1(pred, gold, num_classes)))


@dataclass
class SeedReport:
    seeds: list[int]
    rows: list[dict] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return sum(r["accuracy"] for r in self.rows) / len(self.rows)

    @property
    def mean_macro_f1(self) -> float:
        return sum(r["macro_f1"] for r in self.rows) / len(self.rows)

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "per_seed": self.rows,
            "mean_accuracy": self.mean_accuracy,
            "mean_macro_f1": self.mean_macro_f1,
        }
