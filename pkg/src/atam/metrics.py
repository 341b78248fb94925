"""Micro-averaged overall precision / recall / F1 / F2 for multi-label output."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class MetricsReport:
    op: float
    or_: float
    of1: float
    of2: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "or": self.or_,
            "of1": self.of1,
            "of2": self.of2,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


def evaluate(probs: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> MetricsReport:
    """Score probability grids against dense +/-1 truth over all cells.

    A cell is predicted positive when its probability is >= threshold.
    """
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth)
    if probs.size == 0:
        raise DataError("empty test set")
    if probs.shape != truth.shape:
        raise DataError(f"prediction/truth shape mismatch: {probs.shape} vs {truth.shape}")
    if not np.isin(truth, (1, -1)).all():
        raise DataError("truth must be dense +/-1")
    pred_pos = probs >= threshold
    true_pos = truth == 1
    tp = int((pred_pos & true_pos).sum())
    fp = int((pred_pos & ~true_pos).sum())
    fn = int((~pred_pos & true_pos).sum())
    op = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    or_ = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    of1 = 2.0 * op * or_ / (op + or_) if (op + or_) > 0 else 0.0
    of2 = 5.0 * op * or_ / (4.0 * op + or_) if (op + or_) > 0 else 0.0
    return MetricsReport(op=op, or_=or_, of1=of1, of2=of2, tp=tp, fp=fp, fn=fn)
