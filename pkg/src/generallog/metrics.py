"""Precision, recall and F1 as percentages."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    flags: list[str] = field(default_factory=list)


def f1_from(precision: float, recall: float) -> float:
    """Harmonic mean of two percentages; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_metrics(pred: Sequence[int], truth: Sequence[int]) -> Metrics:
    if len(pred) != len(truth):
        raise ValueError(f"{len(pred)} predictions vs {len(truth)} labels")
    tp = fp = fn = tn = 0
    for p, t in zip(pred, truth):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    flags = []
    if tp + fp:
        precision = 100.0 * tp / (tp + fp)
    else:
        precision = 0.0
        flags.append("no_positive_predictions")
    if tp + fn:
        recall = 100.0 * tp / (tp + fn)
    else:
        recall = 0.0
        flags.append("no_positive_labels")
    return Metrics(precision, recall, f1_from(precision, recall), tp, fp, fn, tn, flags)
