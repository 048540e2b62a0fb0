"""Channel attention and attentional fusion blocks.

``MSCAM`` is the single-head multi-scale channel attention: a global branch
(average pool + bottleneck) and a local branch (bottleneck at full
resolution), summed and squashed by a sigmoid. ``MultiHeadMSCAM`` generalises
it to N inputs: the inputs are integrated by summation, passed through the
shared branches, projected once per head through a small bottleneck and normalised across heads with a
softmax so the N weight maps sum to one at every position. ``AFF`` and
``IAFF`` combine N feature maps with those weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

DEFAULT_REDUCTION = 16


@dataclass(frozen=True)
class MsCamConfig:
    channels: int
    reduction_ratio: int = DEFAULT_REDUCTION
    heads: int = 1

    def __post_init__(self):
        if self.channels < 1 or self.reduction_ratio < 1 or self.heads < 1:
            raise ValueError("channels, reduction_ratio and heads must be positive")
        if self.channels % self.reduction_ratio:
            raise ValueError(
                f"channels ({self.channels}) not divisible by reduction ratio ({self.reduction_ratio})"
            )

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction_ratio


class BatchNorm2d(nn.BatchNorm2d):
    """BatchNorm that falls back to running statistics when a batch has one value per channel."""

    def forward(self, x: Tensor) -> Tensor:
        if self.training and x.shape[0] * x.shape[2] * x.shape[3] == 1:
            return F.batch_norm(
                x, self.running_mean, self.running_var, self.weight, self.bias, False, 0.0, self.eps
            )
        return super().forward(x)


def _bottleneck(cfg: MsCamConfig, pooled: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.AdaptiveAvgPool2d(1)] if pooled else []
    layers += [
        nn.Conv2d(cfg.channels, cfg.hidden, kernel_size=1),
        BatchNorm2d(cfg.hidden),
        nn.ReLU(inplace=True),
        nn.Conv2d(cfg.hidden, cfg.channels, kernel_size=1),
        BatchNorm2d(cfg.channels),
    ]
    return nn.Sequential(*layers)


def _head_projection(cfg: MsCamConfig) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cfg.channels, cfg.hidden, kernel_size=1),
        BatchNorm2d(cfg.hidden),
        nn.ReLU(inplace=True),
        nn.Conv2d(cfg.hidden, cfg.channels, kernel_size=1),
    )


def _check_channels(x: Tensor, channels: int) -> None:
    if x.dim() != 4:
        raise ValueError(f"expected a (B, C, H, W) feature map, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ValueError(f"channel mismatch: block expects {channels}, got {x.shape[1]}")


class _TwoBranch(nn.Module):
    def __init__(self, cfg: MsCamConfig):
        super().__init__()
        self.cfg = cfg
        self.local_att = _bottleneck(cfg, pooled=False)
        self.global_att = _bottleneck(cfg, pooled=True)

    def preactivation(self, x: Tensor) -> Tensor:
        # global branch is (B, C, 1, 1) and broadcasts over space
        return self.local_att(x) + self.global_att(x)


class MSCAM(_TwoBranch):
    """Single-head attention; ``forward`` returns the attended features."""

    def __init__(self, channels: int, reduction: int = DEFAULT_REDUCTION):
        super().__init__(MsCamConfig(channels, reduction, heads=1))

    def weights(self, x: Tensor) -> Tensor:
        _check_channels(x, self.cfg.channels)
        return torch.sigmoid(self.preactivation(x))

    def forward(self, x: Tensor) -> Tensor:
        return apply_channel_attention(x, self.weights(x))

    def extra_flops(self, x: Tensor) -> int:
        # branch sum, sigmoid, attention product
        return 3 * x.numel()


def apply_channel_attention(f: Tensor, w: Tensor) -> Tensor:
    if f.shape != w.shape:
        raise ValueError(f"shape mismatch: features {tuple(f.shape)} vs weights {tuple(w.shape)}")
    return f * w


class MultiHeadMSCAM(_TwoBranch):
    """N-head attention producing one weight map per input, softmax-normalised across heads."""

    def __init__(self, channels: int, heads: int = 4, reduction: int = DEFAULT_REDUCTION):
        super().__init__(MsCamConfig(channels, reduction, heads=heads))
        # bottleneck projections keep the fusion cost near N single-head blocks;
        # a dense C x C projection per head dominates for wide encoders
        self.projections = nn.ModuleList(_head_projection(self.cfg) for _ in range(heads))

    def _check_inputs(self, features: Sequence[Tensor]) -> None:
        if len(features) != self.cfg.heads:
            raise ValueError(f"expected {self.cfg.heads} feature maps, got {len(features)}")
        shape = features[0].shape
        for f in features:
            _check_channels(f, self.cfg.channels)
            if f.shape != shape:
                raise ValueError(f"shape mismatch among fused features: {tuple(shape)} vs {tuple(f.shape)}")

    def forward(self, features: Sequence[Tensor], integration: Tensor | None = None) -> Tensor:
        """Return weights stacked on a leading head axis: (N, B, C, H, W).

        ``integration`` replaces the default summed input to the shared branches.
        """
        self._check_inputs(features)
        if integration is None:
            integration = torch.stack(list(features)).sum(0)
        z = self.preactivation(integration)
        logits = torch.stack([proj(z) for proj in self.projections])
        return torch.softmax(logits, dim=0)

    @torch.no_grad()
    def symmetric_init_(self) -> None:
        """Copy the first head projection into all others."""
        state = self.projections[0].state_dict()
        for proj in self.projections[1:]:
            proj.load_state_dict(state)

    def extra_flops(self, features, integration=None) -> int:
        n = features[0].numel()
        heads = self.cfg.heads
        ops = n + heads * n  # branch sum, softmax
        if integration is None:
            ops += (heads - 1) * n
        return ops


def multihead_mscam_weights(features: Sequence[Tensor], block: MultiHeadMSCAM) -> list[Tensor]:
    return list(block(features).unbind(0))


def _weighted_sum(features: Sequence[Tensor], weights: Tensor) -> Tensor:
    return (torch.stack(list(features)) * weights).sum(0)


class AFF(nn.Module):
    """One-shot fusion of N feature maps: sum_i f_i * W_i."""

    def __init__(self, channels: int, inputs: int = 4, reduction: int = DEFAULT_REDUCTION):
        super().__init__()
        self.attention = MultiHeadMSCAM(channels, inputs, reduction)

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        return _weighted_sum(features, self.attention(features))

    def symmetric_init_(self) -> None:
        self.attention.symmetric_init_()

    def extra_flops(self, features) -> int:
        n = features[0].numel()
        return (2 * len(features) - 1) * n


class IAFF(nn.Module):
    """Two-stage fusion: the first AFF output becomes the integration input for a second
    attention block, whose weights re-fuse the original features."""

    def __init__(self, channels: int, inputs: int = 4, reduction: int = DEFAULT_REDUCTION):
        super().__init__()
        self.attention = MultiHeadMSCAM(channels, inputs, reduction)
        self.refine = MultiHeadMSCAM(channels, inputs, reduction)

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        stage1 = _weighted_sum(features, self.attention(features))
        return _weighted_sum(features, self.refine(features, integration=stage1))

    def symmetric_init_(self) -> None:
        self.attention.symmetric_init_()
        self.refine.symmetric_init_()

    def extra_flops(self, features) -> int:
        n = features[0].numel()
        return 2 * (2 * len(features) - 1) * n


def aff_fuse(features: Sequence[Tensor], block: AFF) -> Tensor:
    return block(features)


def iaff_fuse(features: Sequence[Tensor], block: IAFF) -> Tensor:
    return block(features)


def decision_fuse(scores: Sequence[Tensor]) -> Tensor:
    """Average per-branch score vectors (last axis is the class axis)."""
    if not 2 <= len(scores) <= 4:
        raise ValueError(f"decision fusion takes 2 to 4 score vectors, got {len(scores)}")
    shape = scores[0].shape
    if shape[-1] != 7 or any(s.shape != shape for s in scores):
        raise ValueError("score vectors must all have length 7 and identical shapes")
    return torch.stack(list(scores)).mean(0)
