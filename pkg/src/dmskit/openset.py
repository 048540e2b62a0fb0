"""Test-time rules mapping score vectors to c1..c8, and the binary anomaly score.

Ties in argmax resolve to the lowest class index.
"""

from __future__ import annotations

import numpy as np

from .core import ClassLabel
from .models import HeadType


def _as_scores(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != 7:
        raise ValueError(f"score vectors must have length 7, got shape {y.shape}")
    return y


def predict_class_gamma(y, gamma: float) -> ClassLabel:
    """argmax class if its score reaches ``gamma``, otherwise unseen (c8)."""
    y = _as_scores(y)
    k = int(np.argmax(y))
    return ClassLabel.from_index(k) if y[k] >= gamma else ClassLabel.C8


def predict_class_two_threshold(y, t1: float, t2: float) -> ClassLabel:
    """Posterior-head rule: normal if y[0] >= t1; else best NDRA if its conditional >= t2; else c8."""
    y = _as_scores(y)
    if y[0] >= t1:
        return ClassLabel.C1
    k = int(np.argmax(y[1:]))
    return ClassLabel.from_index(k + 1) if y[1 + k] >= t2 else ClassLabel.C8


def batch_predict_gamma(scores, gamma: float) -> np.ndarray:
    """Vectorised ``predict_class_gamma``; returns label values 1..8."""
    y = _as_scores(scores).reshape(-1, 7)
    k = np.argmax(y, axis=1)
    top = y[np.arange(len(y)), k]
    return np.where(top >= gamma, k + 1, 8)


def batch_predict_two_threshold(scores, t1: float, t2: float) -> np.ndarray:
    y = _as_scores(scores).reshape(-1, 7)
    k = np.argmax(y[:, 1:], axis=1)
    top = y[np.arange(len(y)), k + 1]
    ndra = np.where(top >= t2, k + 2, 8)
    return np.where(y[:, 0] >= t1, 1, ndra)


def binary_score(y, head: HeadType | str = HeadType.FLAT_SOFTMAX) -> float | np.ndarray:
    """Anomaly score 1 - P[normal driving]; both heads store P[c1] at index 0."""
    HeadType(head)
    y = _as_scores(y)
    out = 1.0 - y[..., 0]
    return float(out) if np.ndim(out) == 0 else out
