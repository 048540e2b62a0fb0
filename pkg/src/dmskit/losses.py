"""Training objectives over batched score vectors.

All losses take probabilities (the model's normalised outputs), not logits,
and clamp them to [EPS, 1 - EPS] before taking logarithms. Targets are class
indices 0..6 (c1..c7); the unseen class can never be a target.
"""

from __future__ import annotations

import torch
from torch import Tensor

EPS = 1e-7
DEFAULT_TEMPERATURE = 0.1


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "none":
        return per_sample
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "sum":
        return per_sample.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def _check(y_pred: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
    target = torch.as_tensor(target, dtype=torch.long)
    if y_pred.dim() == 1:
        y_pred = y_pred.unsqueeze(0)
        target = target.reshape(1)
    if y_pred.shape[-1] != 7:
        raise ValueError(f"score vectors must have length 7, got {y_pred.shape[-1]}")
    if target.shape[0] != y_pred.shape[0]:
        raise ValueError("batch size mismatch between predictions and targets")
    if torch.any(target == 7):
        raise ValueError("c8 (unseen) cannot be a training target")
    if torch.any((target < 0) | (target > 6)):
        raise ValueError("targets must be class indices 0..6")
    if not torch.all(torch.isfinite(y_pred)):
        raise ValueError("non-finite prediction")
    return y_pred, target


def _clamped_log(p: Tensor) -> Tensor:
    return torch.log(p.clamp(EPS, 1.0 - EPS))


def joint_probabilities(y_pred: Tensor) -> Tensor:
    """Posterior-head output -> joint class probabilities P[c1..c7]."""
    p_normal = y_pred[..., :1]
    return torch.cat([p_normal, y_pred[..., 1:] * (1.0 - p_normal)], dim=-1)


def posterior_cross_entropy(y_pred: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    """Cross-entropy on a factorised output: y[0] = P[normal], y[1:] = P[class | NDRA]."""
    y_pred, target = _check(y_pred, target)
    p = joint_probabilities(y_pred).gather(-1, target[:, None])[:, 0]
    return _reduce(-_clamped_log(p), reduction)


def flat_cross_entropy(y_pred: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    y_pred, target = _check(y_pred, target)
    p = y_pred.gather(-1, target[:, None])[:, 0]
    return _reduce(-_clamped_log(p), reduction)


def supervised_contrastive(
    embeddings: Tensor,
    labels: Tensor,
    temperature: float = DEFAULT_TEMPERATURE,
    reduction: str = "mean",
) -> Tensor:
    """Supervised contrastive loss.

    For anchor i with positives P(i) (same label, excluding i):
    ``-1/|P(i)| sum_p log(exp(z_i.z_p/t) / sum_{a != i} exp(z_i.z_a/t))``.
    Anchors without positives are skipped; with ``reduction='none'`` they are
    reported as NaN.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    n = embeddings.shape[0]
    if n < 2 or labels.shape[0] != n:
        raise ValueError("need at least two embeddings with matching labels")
    z = torch.nn.functional.normalize(embeddings, dim=-1)
    sim = z @ z.T / temperature
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    sim_others = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim_others, dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(1)
    valid = n_pos > 0
    if not torch.any(valid):
        raise ValueError("no anchor in the batch has a positive")
    per_anchor = -(log_prob.masked_fill(~pos, 0.0).sum(1)) / n_pos.clamp(min=1)
    if reduction == "none":
        return per_anchor.masked_fill(~valid, float("nan"))
    return _reduce(per_anchor[valid], reduction)
