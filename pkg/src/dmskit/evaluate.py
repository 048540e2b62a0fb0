"""Binary and multiclass evaluation metrics, and whole-run evaluation reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .core import ClassLabel
from .data import EVAL_STRIDE, DatasetManifest, window_clips
from .models import DMSModel, HeadType, frames_to_tensor
from .openset import batch_predict_gamma, batch_predict_two_threshold, binary_score

NUM_CLASSES = 8


def _labels(xs) -> np.ndarray:
    return np.asarray([int(x) for x in xs], dtype=np.int64)


def accuracy(preds: Sequence, truths: Sequence) -> float:
    p, t = _labels(preds), _labels(truths)
    if p.shape != t.shape:
        raise ValueError("length mismatch between predictions and truths")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(p == t))


def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("length mismatch between scores and labels")
    return s, y


def _average_ranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # tie groups receive the mean of the 1-based ranks they span
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [s.size]])
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + 1 + b)
    return ranks


def auc_roc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties counted 1/2."""
    s, y = _binary_inputs(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC-ROC needs both positive and negative samples")
    ranks = _average_ranks(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (recall step) x precision."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUC-PR needs at least one positive sample")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp, fp = tp[last_of_group], fp[last_of_group]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * precision))


@dataclass
class Confusion:
    counts: np.ndarray  # (8, 8) raw counts, rows = truth
    matrix: np.ndarray  # row-normalised; unsupported rows are zero
    supported: np.ndarray  # (8,) bool


def confusion_matrix(preds: Sequence, truths: Sequence) -> Confusion:
    p, t = _labels(preds), _labels(truths)
    if p.shape != t.shape:
        raise ValueError("length mismatch between predictions and truths")
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(counts, (t - 1, p - 1), 1)
    support = counts.sum(1)
    matrix = np.zeros(counts.shape, dtype=np.float64)
    ok = support > 0
    matrix[ok] = counts[ok] / support[ok, None]
    return Confusion(counts, matrix, ok)


@dataclass
class MetricsReport:
    accuracy: float
    auc_roc: float | None
    auc_pr: float | None
    confusion_matrix: list[list[float]]
    per_class_recall: dict[str, float | None]
    config_hash: str
    seed: int
    binary_accuracy: float | None = None
    seen_accuracy: float | None = None
    unseen_recall: float | None = None
    supported_rows: list[bool] = field(default_factory=list)
    rule: str = "gamma"
    thresholds: dict[str, float] = field(default_factory=dict)
    n_samples: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True), encoding="utf-8")


def score_windows(
    model: DMSModel,
    manifest: DatasetManifest,
    stride: int = EVAL_STRIDE,
    stats: Mapping[str, Mapping[str, float]] | None = None,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the model on the last frame of every window. Returns (scores (N, 7), truths 1..8)."""
    windows = window_clips(manifest, stride)
    missing = set(model.order) - set(manifest.modalities)
    if missing:
        raise ValueError(f"manifest lacks modalities {sorted(m.value for m in missing)}")
    stats = stats if stats is not None else manifest.stats
    model.eval()
    scores = []
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            chunk = windows[i:i + batch_size]
            inputs = {
                m: frames_to_tensor(np.stack([w.load_last(m) for w, _ in chunk]), stats.get(m.value))[:, None]
                for m in model.order
            }
            scores.append(model(inputs).double().numpy())
    truths = _labels(label for _, label in windows)
    return (np.concatenate(scores) if scores else np.zeros((0, 7))), truths


def classify(scores: np.ndarray, rule: str, gamma: float = 0.5, t1: float = 0.5, t2: float = 0.5) -> np.ndarray:
    if rule == "gamma":
        return batch_predict_gamma(scores, gamma)
    if rule == "two-threshold":
        return batch_predict_two_threshold(scores, t1, t2)
    raise ValueError(f"unknown inference rule {rule!r}")


def check_rule(head: HeadType, rule: str) -> None:
    expected = {"gamma": HeadType.FLAT_SOFTMAX, "two-threshold": HeadType.POSTERIOR}
    if rule not in expected:
        raise ValueError(f"unknown inference rule {rule!r}")
    if HeadType(head) is not expected[rule]:
        raise ValueError(f"rule {rule!r} requires a {expected[rule].value} head, model has {HeadType(head).value}")


def report_from_scores(
    scores: np.ndarray,
    truths: np.ndarray,
    rule: str = "gamma",
    gamma: float = 0.5,
    t1: float = 0.5,
    t2: float = 0.5,
    head: HeadType = HeadType.FLAT_SOFTMAX,
    binary_threshold: float = 0.5,
    config_hash: str = "",
    seed: int = 0,
) -> MetricsReport:
    if len(truths) == 0:
        raise ValueError("no evaluation windows")
    preds = classify(scores, rule, gamma, t1, t2)
    conf = confusion_matrix(preds, truths)
    bscore = binary_score(scores, head)
    bscore = np.atleast_1d(bscore)
    btruth = truths != int(ClassLabel.C1)
    both = btruth.any() and (~btruth).any()
    seen = truths != int(ClassLabel.C8)
    recall = {
        str(ClassLabel(k + 1)): (float(conf.matrix[k, k]) if conf.supported[k] else None)
        for k in range(NUM_CLASSES)
    }
    thresholds = {"gamma": gamma} if rule == "gamma" else {"t1": t1, "t2": t2}
    return MetricsReport(
        accuracy=accuracy(preds, truths),
        auc_roc=auc_roc(bscore, btruth) if both else None,
        auc_pr=auc_pr(bscore, btruth) if btruth.any() else None,
        confusion_matrix=conf.matrix.tolist(),
        per_class_recall=recall,
        config_hash=config_hash,
        seed=seed,
        binary_accuracy=float(np.mean((bscore >= binary_threshold) == btruth)),
        seen_accuracy=accuracy(preds[seen], truths[seen]) if seen.any() else None,
        unseen_recall=recall[str(ClassLabel.C8)],
        supported_rows=conf.supported.tolist(),
        rule=rule,
        thresholds=thresholds,
        n_samples=int(len(truths)),
    )


def gamma_sweep(scores: np.ndarray, truths: np.ndarray, gammas=None) -> list[dict]:
    """Accuracy, seen-class accuracy and unseen recall for each gamma."""
    gammas = np.round(np.arange(0, 101) / 100, 2) if gammas is None else gammas
    seen = truths != int(ClassLabel.C8)
    rows = []
    for g in gammas:
        preds = batch_predict_gamma(scores, g)
        rows.append({
            "gamma": float(g),
            "accuracy": float(np.mean(preds == truths)),
            "seen_accuracy": float(np.mean(preds[seen] == truths[seen])) if seen.any() else None,
            "unseen_recall": float(np.mean(preds[~seen] == 8)) if (~seen).any() else None,
        })
    return rows


def evaluate_run(
    model: DMSModel,
    manifest: DatasetManifest,
    rule: str = "gamma",
    gamma: float = 0.5,
    t1: float = 0.5,
    t2: float = 0.5,
    stride: int = EVAL_STRIDE,
    stats=None,
    binary_threshold: float = 0.5,
    seed: int = 0,
) -> MetricsReport:
    check_rule(model.spec.head, rule)
    scores, truths = score_windows(model, manifest, stride, stats)
    return report_from_scores(
        scores, truths, rule, gamma, t1, t2, model.spec.head, binary_threshold,
        model.spec.config_hash(), seed,
    )
