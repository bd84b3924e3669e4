"""Accuracy and expected calibration error.

Confidence is the max class probability. Bins are equal-width over (0, 1]:
a confidence c lands in bin ceil(c * n_bins), clamped to [1, n_bins], so a
value exactly on an edge goes to the lower bin and 0 goes to bin 1. The rule
is pinned here because bin assignment must agree bit-for-bit across
implementations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput


@dataclass(frozen=True)
class BinStat:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    empirical_accuracy: float


@dataclass(frozen=True)
class CalibrationReport:
    accuracy: float
    ece: float
    n_bins: int
    bins: tuple

    def as_table(self) -> str:
        lines = [
            f"accuracy {self.accuracy:.4f}   ece {self.ece:.4f}   bins {self.n_bins}",
            f"{'bin':>12}  {'count':>6}  {'confidence':>10}  {'accuracy':>8}",
        ]
        for b in self.bins:
            if b.count == 0:
                continue
            lines.append(
                f"({b.lower:.2f},{b.upper:.2f}]  {b.count:>6}  "
                f"{b.mean_confidence:>10.4f}  {b.empirical_accuracy:>8.4f}"
            )
        return "\n".join(lines)

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "ece": self.ece,
            "n_bins": self.n_bins,
            "bins": [
                {
                    "lower": b.lower,
                    "upper": b.upper,
                    "count": b.count,
                    "mean_confidence": b.mean_confidence,
                    "empirical_accuracy": b.empirical_accuracy,
                }
                for b in self.bins
            ],
        }


def _check(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise EmptyInput("need at least one prediction row")
    if labels.shape != (probs.shape[0],):
        raise EmptyInput(f"labels shape {labels.shape} does not match {probs.shape[0]} rows")
    return probs, labels


def accuracy(probs, labels) -> float:
    """Fraction of rows whose argmax equals the label (ties -> lowest index)."""
    probs, labels = _check(probs, labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def ece(probs, labels, n_bins: int = 10) -> CalibrationReport:
    """Expected calibration error with equal-width confidence bins.

    ece = sum_k (count_k / N) * |empirical_accuracy_k - mean_confidence_k|
    over nonempty bins.
    """
    probs, labels = _check(probs, labels)
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    idx = np.clip(np.ceil(conf * n_bins).astype(int), 1, n_bins)

    n = probs.shape[0]
    bins = []
    total = 0.0
    for k in range(1, n_bins + 1):
        sel = idx == k
        count = int(sel.sum())
        if count:
            mc = float(conf[sel].mean())
            ea = float(correct[sel].mean())
            total += (count / n) * abs(ea - mc)
        else:
            mc, ea = 0.0, 0.0
        bins.append(
            BinStat(
                lower=(k - 1) / n_bins,
                upper=k / n_bins,
                count=count,
                mean_confidence=mc,
                empirical_accuracy=ea,
            )
        )
    return CalibrationReport(
        accuracy=float(correct.mean()), ece=total, n_bins=n_bins, bins=tuple(bins)
    )
