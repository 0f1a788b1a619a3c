"""Binary macro F1, the constant-prediction baseline, mean and standard error."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: tuple[int, int]
    fp: tuple[int, int]
    fn: tuple[int, int]


@dataclass(frozen=True)
class F1Report:
    macro_f1: float
    per_class_f1: tuple[float, float]
    support: tuple[int, int]


def _check(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if len(p) != len(y):
        raise ValueError(f"length mismatch: {len(p)} predictions, {len(y)} labels")
    if not len(y):
        raise ValueError("empty input")
    if not np.isin(y, (0, 1)).all() or not np.isin(p, (0, 1)).all():
        raise ValueError("binary macro F1 expects values in {0, 1}")
    return p, y


def confusion(predictions, labels) -> ConfusionCounts:
    p, y = _check(predictions, labels)
    tp, fp, fn = [], [], []
    for c in (0, 1):
        tp.append(int(np.sum((p == c) & (y == c))))
        fp.append(int(np.sum((p == c) & (y != c))))
        fn.append(int(np.sum((p != c) & (y == c))))
    return ConfusionCounts(tuple(tp), tuple(fp), tuple(fn))


def macro_f1(predictions, labels) -> F1Report:
    """Per-class F1 = 2tp / (2tp + fp + fn), 0 when the denominator is 0."""
    cc = confusion(predictions, labels)
    f1 = []
    for c in (0, 1):
        denom = 2 * cc.tp[c] + cc.fp[c] + cc.fn[c]
        f1.append(2 * cc.tp[c] / denom if denom else 0.0)
    support = (cc.tp[0] + cc.fn[0], cc.tp[1] + cc.fn[1])
    return F1Report((f1[0] + f1[1]) / 2, (f1[0], f1[1]), support)


def constant_baseline(test_labels) -> float:
    y = np.asarray(test_labels)
    if not len(y):
        raise ValueError("empty input")
    return max(macro_f1(np.full(len(y), c), y).macro_f1 for c in (0, 1))


def mean_and_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64).ravel()
    if not len(v):
        raise ValueError("empty input")
    mean = math.fsum(v) / len(v)
    if len(v) == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2) / (len(v) - 1)
    return mean, math.sqrt(var / len(v))
