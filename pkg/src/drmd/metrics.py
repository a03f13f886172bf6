"""F1 on the malware class and the Area Under Time summary."""

from __future__ import annotations

import math
import statistics
from typing import Sequence

import numpy as np

from .errors import ContractViolation


def confusion(predictions, labels) -> tuple[int, int, int, int]:
    """Return ``(tp, fp, fn, tn)`` with malware as the positive class."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ContractViolation("predictions and labels differ in length")
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p != 1) & (y == 1)))
    tn = int(np.sum((p != 1) & (y == 0)))
    return tp, fp, fn, tn


def precision_recall_f1(predictions, labels) -> tuple[float | None, float | None, float | None]:
    """Malware-class precision, recall and F1.

    Empty input gives ``(None, None, None)``; a zero denominator gives 0.
    """
    if len(labels) == 0:
        return None, None, None
    tp, fp, fn, _ = confusion(predictions, labels)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f1(predictions, labels) -> float | None:
    return precision_recall_f1(predictions, labels)[2]


def aut(series: Sequence[float]) -> float:
    """Trapezoidal mean of a per-period metric: (1/(N-1)) * sum_k (P_k + P_{k+1}) / 2."""
    values = [float(v) for v in series]
    n = len(values)
    if n < 2:
        raise ContractViolation(f"AUT needs at least two periods, got {n}")
    # statistics.mean rounds the exact rational mean once, so a constant series stays exact
    return float(statistics.mean([(a + b) / 2.0 for a, b in zip(values, values[1:])]))


def aut_skipping_missing(series: Sequence[float | None]) -> float | None:
    """AUT over the defined points only; None when fewer than two remain."""
    defined = [v for v in series if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if len(defined) < 2:
        return None
    return aut(defined)
