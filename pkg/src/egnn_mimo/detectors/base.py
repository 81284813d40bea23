"""Detector output container and the decision/error-rate helpers shared by all detectors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WILSON_Z95 = 1.959963984540054


@dataclass
class DetectorOutput:
    """Per-node posteriors ``(..., 2Nt, K)`` and argmax decisions ``(..., 2Nt)``."""

    posteriors: np.ndarray
    hard_labels: np.ndarray
    metadata: dict = field(default_factory=dict)


def hard_decision(posteriors):
    """Row-wise argmax; ``np.argmax`` already resolves ties to the lowest index."""
    return np.argmax(np.asarray(posteriors), axis=-1)


def one_hot(labels, K):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (K,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def symbol_errors(pred_labels, true_labels):
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    return int(np.count_nonzero(pred != true)), int(true.size)


def ser(pred_labels, true_labels):
    errors, total = symbol_errors(pred_labels, true_labels)
    if total == 0:
        raise ValueError("symbol error rate is undefined for zero symbols")
    return errors / total


def wilson_interval(errors, total, z=WILSON_Z95):
    """Wilson score interval ``(low, high)`` for a binomial proportion."""
    if total <= 0:
        raise ValueError("Wilson interval needs at least one trial")
    p = errors / total
    denom = 1.0 + z * z / total
    centre = (p + z * z / (2 * total)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / total + z * z / (4 * total * total))
    return max(0.0, centre - half), min(1.0, centre + half)


def wilson_halfwidth(errors, total, z=WILSON_Z95):
    low, high = wilson_interval(errors, total, z)
    return (high - low) / 2.0
