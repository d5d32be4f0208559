"""Classification error, mean IOU and active-site pattern confusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput


@dataclass(frozen=True)
class PatternConfusion:
    tp: int
    fp: int
    fn: int

    @property
    def accuracy(self) -> float:
        """``tp / (tp + fp + fn)``; 1.0 when both patterns are empty."""
        denom = self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else self.tp / denom

    def __add__(self, other: "PatternConfusion") -> "PatternConfusion":
        return PatternConfusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def classification_error(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if len(labels) == 0:
        raise EmptyInput("no samples")
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    return 100.0 * float(np.count_nonzero(preds != labels)) / len(labels)


def per_class_iou(preds, labels, classes: int) -> dict:
    preds, labels = np.asarray(preds), np.asarray(labels)
    out = {}
    for c in range(classes):
        p, t = preds == c, labels == c
        union = np.count_nonzero(p | t)
        if union:
            out[c] = np.count_nonzero(p & t) / union
    return out


def mean_iou(preds, labels, classes: int) -> float:
    """Mean over classes present in prediction or truth (others are 0/0 and skipped)."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if len(labels) == 0:
        raise EmptyInput("no sites")
    ious = per_class_iou(preds, labels, classes)
    return float(np.mean(list(ious.values())))


def _keys(pattern) -> np.ndarray:
    p = np.asarray(pattern, dtype=np.int64)
    if p.ndim == 1:
        p = p.reshape(0, 1) if p.size == 0 else p.reshape(1, -1)
    if len(p) == 0:
        return np.zeros(0, dtype=np.void)
    p = np.ascontiguousarray(p)
    return np.unique(p.view(np.dtype((np.void, p.dtype.itemsize * p.shape[1]))).ravel())


def pattern_confusion(pred_pattern, truth_pattern) -> PatternConfusion:
    """Compare two site sets given as ``(k, ncoord)`` integer arrays."""
    pk, tk = _keys(pred_pattern), _keys(truth_pattern)
    if len(pk) == 0 or len(tk) == 0:
        return PatternConfusion(0, len(pk), len(tk))
    tp = len(np.intersect1d(pk, tk, assume_unique=True))
    return PatternConfusion(tp, len(pk) - tp, len(tk) - tp)


def confusion_labels(pred_pattern, truth_pattern):
    """Union of both patterns with a code per site: 0 = TP, 1 = FP, 2 = FN."""
    pred_pattern = np.asarray(pred_pattern, dtype=np.int64)
    truth_pattern = np.asarray(truth_pattern, dtype=np.int64)
    ncols = pred_pattern.shape[1] if pred_pattern.ndim == 2 else truth_pattern.shape[1]
    pred = {tuple(r) for r in pred_pattern.tolist()}
    truth = {tuple(r) for r in truth_pattern.tolist()}
    sites = sorted(pred | truth)
    codes = [0 if (s in pred and s in truth) else 1 if s in pred else 2 for s in sites]
    return np.array(sites, dtype=np.int64).reshape(len(sites), ncols), np.array(codes, dtype=np.int64)
