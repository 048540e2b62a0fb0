"""Encoders and the three model topologies (unimodal, feature fusion, decision fusion)."""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
import torchvision
from torch import Tensor, nn

from .core import NUM_TRAIN_CLASSES, Clip, ClipError, Modality, canonical_order
from .fusion import AFF, DEFAULT_REDUCTION, IAFF, MSCAM, BatchNorm2d, decision_fuse

HEAD_HIDDEN = 256
PROJECTION_DIM = 128


class Architecture(str, enum.Enum):
    RESIDUAL18 = "residual18"
    MOBILE_V2 = "inverted-residual-mobile-v2"
    TINY_CNN = "tiny-cnn"


OUTPUT_CHANNELS = {
    Architecture.RESIDUAL18: 512,
    Architecture.MOBILE_V2: 1280,
    Architecture.TINY_CNN: 64,
}

_ARCH_ALIASES = {
    "resnet18": Architecture.RESIDUAL18,
    "resnet-18": Architecture.RESIDUAL18,
    "mobilenet_v2": Architecture.MOBILE_V2,
    "mobilenet-v2": Architecture.MOBILE_V2,
    "mobile-v2": Architecture.MOBILE_V2,
    "tiny": Architecture.TINY_CNN,
}


class Topology(str, enum.Enum):
    UNIMODAL = "unimodal"
    FEATURE_FUSION = "feature_fusion"
    DECISION_FUSION = "decision_fusion"


class FusionVariant(str, enum.Enum):
    AFF = "aff"
    IAFF = "iaff"


class HeadType(str, enum.Enum):
    FLAT_SOFTMAX = "flat"
    POSTERIOR = "posterior"


class EncoderWeightsError(RuntimeError):
    pass


def _parse_arch(text) -> Architecture:
    if isinstance(text, Architecture):
        return text
    key = str(text).strip().lower()
    return _ARCH_ALIASES.get(key) or Architecture(key)


@dataclass(frozen=True)
class EncoderSpec:
    architecture: Architecture = Architecture.TINY_CNN
    pretrained_weights: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "architecture", _parse_arch(self.architecture))

    @property
    def output_channels(self) -> int:
        return OUTPUT_CHANNELS[self.architecture]

    @property
    def stride(self) -> int:
        return 16 if self.architecture is Architecture.TINY_CNN else 32


@dataclass(frozen=True)
class ModelSpec:
    topology: Topology
    modalities: tuple[Modality, ...]
    encoders: Mapping[Modality, EncoderSpec] = field(default_factory=dict)
    fusion_variant: FusionVariant = FusionVariant.AFF
    head: HeadType = HeadType.FLAT_SOFTMAX
    reduction_ratio: int = DEFAULT_REDUCTION

    def __post_init__(self):
        object.__setattr__(self, "topology", Topology(self.topology))
        object.__setattr__(self, "fusion_variant", FusionVariant(self.fusion_variant))
        object.__setattr__(self, "head", HeadType(self.head))
        mods = tuple(Modality.parse(m) if isinstance(m, str) else m for m in self.modalities)
        if len(set(mods)) != len(mods):
            raise ValueError("duplicate modality in model spec")
        object.__setattr__(self, "modalities", mods)
        if self.topology is Topology.UNIMODAL and len(mods) != 1:
            raise ValueError("a unimodal model takes exactly one modality")
        if self.topology is not Topology.UNIMODAL and not 2 <= len(mods) <= 4:
            raise ValueError("fusion topologies take 2 to 4 modalities")
        encoders = dict(self.encoders)
        for m in mods:
            encoders.setdefault(m, EncoderSpec())
        extra = set(encoders) - set(mods)
        if extra:
            raise ValueError(f"encoder given for absent modality: {sorted(map(str, extra))}")
        channels = {encoders[m].output_channels for m in mods}
        if self.topology is Topology.FEATURE_FUSION and len(channels) != 1:
            raise ValueError("feature fusion requires encoders with equal output channels")
        object.__setattr__(self, "encoders", encoders)

    @classmethod
    def single(cls, topology, modalities, architecture="tiny-cnn", **kwargs) -> "ModelSpec":
        mods = [Modality.parse(m) if isinstance(m, str) else m for m in modalities]
        enc = EncoderSpec(_parse_arch(architecture))
        return cls(topology, tuple(mods), {m: enc for m in mods}, **kwargs)

    def to_dict(self) -> dict:
        return {
            "topology": self.topology.value,
            "fusion_variant": self.fusion_variant.value,
            "head": self.head.value,
            "reduction_ratio": self.reduction_ratio,
            "modalities": [m.value for m in self.modalities],
            "encoders": {
                m.value: {
                    "architecture": self.encoders[m].architecture.value,
                    "pretrained_weights": self.encoders[m].pretrained_weights,
                }
                for m in self.modalities
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        encs = {
            Modality.parse(k): EncoderSpec(v["architecture"], v.get("pretrained_weights"))
            for k, v in d.get("encoders", {}).items()
        }
        return cls(
            topology=d["topology"],
            modalities=tuple(d["modalities"]),
            encoders=encs,
            fusion_variant=d.get("fusion_variant", "aff"),
            head=d.get("head", "flat"),
            reduction_ratio=int(d.get("reduction_ratio", DEFAULT_REDUCTION)),
        )

    def config_hash(self) -> str:
        """Hash of the architecture-defining fields; weight file locations are excluded."""
        d = self.to_dict()
        for enc in d["encoders"].values():
            enc.pop("pretrained_weights")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --- encoders -----------------------------------------------------------------


def _tiny_cnn() -> nn.Sequential:
    layers: list[nn.Module] = []
    cin = 1
    for cout in (8, 16, 32, 64):
        layers += [
            nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1, bias=False),
            BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        ]
        cin = cout
    return nn.Sequential(*layers)


def _resolve_weights(ref: str) -> Path:
    path = Path(ref).expanduser()
    if not path.is_absolute() and not path.exists():
        cache = os.environ.get("DMSKIT_CACHE")
        if cache:
            path = Path(cache) / ref
    if not path.exists():
        raise EncoderWeightsError(f"encoder weights not found: {ref}")
    return path


def _load_state(module: nn.Module, ref: str) -> None:
    state = torch.load(_resolve_weights(ref), map_location="cpu", weights_only=True)
    if isinstance(state, Mapping) and "state_dict" in state:
        state = state["state_dict"]
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise EncoderWeightsError(f"weight-file mismatch for {ref}: {exc}") from None


class Encoder(nn.Module):
    """2D base encoder on a single-channel frame batch (B, 1, H, W)."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        arch = spec.architecture
        if arch is Architecture.TINY_CNN:
            self.body = _tiny_cnn()
            if spec.pretrained_weights:
                _load_state(self.body, spec.pretrained_weights)
            self.in_channels = 1
            return
        if arch is Architecture.RESIDUAL18:
            net = torchvision.models.resnet18(weights=None)
            if spec.pretrained_weights:
                _load_state(net, spec.pretrained_weights)
            self.body = nn.Sequential(
                net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
            )
        else:
            net = torchvision.models.mobilenet_v2(weights=None)
            if spec.pretrained_weights:
                _load_state(net, spec.pretrained_weights)
            self.body = net.features
        # pretrained stems expect RGB; the single channel is replicated
        self.in_channels = 3

    @property
    def out_channels(self) -> int:
        return self.spec.output_channels

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"encoder expects (B, 1, H, W), got {tuple(x.shape)}")
        if self.in_channels == 3:
            x = x.expand(-1, 3, -1, -1)
        return self.body(x)


class Head(nn.Module):
    """Spatial average pool, one hidden layer, then the head-specific normalisation."""

    def __init__(self, channels: int, kind: HeadType = HeadType.FLAT_SOFTMAX):
        super().__init__()
        self.kind = HeadType(kind)
        self.fc = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(channels, HEAD_HIDDEN),
            nn.ReLU(inplace=True),
            nn.Linear(HEAD_HIDDEN, NUM_TRAIN_CLASSES),
        )

    def logits(self, f: Tensor) -> Tensor:
        return self.fc(f)

    def forward(self, f: Tensor) -> Tensor:
        return normalize_scores(self.logits(f), self.kind)

    def extra_flops(self, f: Tensor) -> int:
        return f.shape[0] * NUM_TRAIN_CLASSES


def normalize_scores(logits: Tensor, kind: HeadType) -> Tensor:
    if HeadType(kind) is HeadType.FLAT_SOFTMAX:
        return torch.softmax(logits, dim=-1)
    return torch.cat([torch.sigmoid(logits[..., :1]), torch.softmax(logits[..., 1:], dim=-1)], dim=-1)


class Branch(nn.Module):
    """Per-modality attention + head, used by the unimodal and decision-fusion topologies."""

    def __init__(self, channels: int, kind: HeadType, reduction: int):
        super().__init__()
        self.attention = MSCAM(channels, reduction)
        self.head = Head(channels, kind)

    def forward(self, f: Tensor) -> Tensor:
        return self.head(self.attention(f))


class DecisionAverage(nn.Module):
    def forward(self, scores: list[Tensor]) -> Tensor:
        return decision_fuse(scores)

    def extra_flops(self, scores) -> int:
        # N-1 additions and one scaling per entry
        return len(scores) * scores[0].numel()


class DMSModel(nn.Module):
    """A driver-monitoring model built from a ModelSpec.

    ``forward`` takes a mapping modality -> (B, T, H, W) tensor of normalised
    frames and consumes only the last frame of each clip. Parameters are bound
    by modality key, so the order in which modalities are listed is irrelevant.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.order = canonical_order(spec.modalities)
        self.encoders = nn.ModuleDict({m.value: Encoder(spec.encoders[m]) for m in self.order})
        self.projections = nn.ModuleDict(
            {
                m.value: nn.Sequential(
                    nn.Linear(spec.encoders[m].output_channels, spec.encoders[m].output_channels),
                    nn.ReLU(inplace=True),
                    nn.Linear(spec.encoders[m].output_channels, PROJECTION_DIM),
                )
                for m in self.order
            }
        )
        r = spec.reduction_ratio
        if spec.topology is Topology.FEATURE_FUSION:
            c = spec.encoders[self.order[0]].output_channels
            block = AFF if spec.fusion_variant is FusionVariant.AFF else IAFF
            self.fusion = block(c, len(self.order), r)
            self.head = Head(c, spec.head)
        else:
            self.branches = nn.ModuleDict(
                {
                    m.value: Branch(spec.encoders[m].output_channels, spec.head, r)
                    for m in self.order
                }
            )
            if spec.topology is Topology.DECISION_FUSION:
                self.average = DecisionAverage()

    # parameter groups for the two optimisers
    def encoder_parameters(self):
        yield from self.encoders.parameters()
        yield from self.projections.parameters()

    def head_parameters(self):
        enc = {id(p) for p in self.encoder_parameters()}
        return (p for p in self.parameters() if id(p) not in enc)

    def symmetric_init_(self) -> None:
        if hasattr(self, "fusion"):
            self.fusion.symmetric_init_()

    def _get(self, inputs: Mapping, m: Modality) -> Tensor:
        x = inputs.get(m)
        if x is None:
            x = inputs.get(m.value)
        if x is None:
            raise KeyError(f"missing modality {m} in model input")
        return x

    def encode(self, inputs: Mapping) -> dict[Modality, Tensor]:
        feats = {}
        for m in self.order:
            x = self._get(inputs, m)
            if x.dim() == 3:
                x = x.unsqueeze(0)
            feats[m] = self.encoders[m.value](x[:, -1:])
        return feats

    def embed(self, feats: Mapping[Modality, Tensor]) -> dict[Modality, Tensor]:
        """L2-normalised projections of pooled encoder features (contrastive objective only)."""
        return {
            m: F.normalize(self.projections[m.value](f.mean(dim=(2, 3))), dim=-1)
            for m, f in feats.items()
        }

    def predict_from_features(self, feats: Mapping[Modality, Tensor]) -> Tensor:
        topo = self.spec.topology
        if topo is Topology.FEATURE_FUSION:
            return self.head(self.fusion([feats[m] for m in self.order]))
        scores = [self.branches[m.value](feats[m]) for m in self.order]
        if topo is Topology.UNIMODAL:
            return scores[0]
        return self.average(scores)

    def forward(self, inputs: Mapping) -> Tensor:
        return self.predict_from_features(self.encode(inputs))


def build_model(spec: ModelSpec, seed: int | None = None) -> DMSModel:
    if seed is not None:
        torch.manual_seed(seed)
    return DMSModel(spec)


# --- clip-level helpers -------------------------------------------------------


def last_frame(clip: Clip, m: Modality) -> np.ndarray:
    if m not in clip.frames:
        raise ClipError(f"modality: {m} not present in clip")
    return clip.frames[m][-1]


def frames_to_tensor(frames: np.ndarray, stats: Mapping[str, float] | None = None) -> Tensor:
    """uint8-range frames -> float tensor scaled to [0, 1] then standardised."""
    x = torch.as_tensor(np.asarray(frames, dtype=np.float32) / 255.0)
    if stats is not None:
        x = (x - float(stats["mean"])) / float(stats["std"])
    return x


def encode(frame: np.ndarray, encoder: Encoder, stats=None) -> Tensor:
    x = frames_to_tensor(frame, stats)[None, None]
    with torch.no_grad():
        return encoder(x)[0]


def clip_inputs(clip: Clip, modalities, stats=None) -> dict[Modality, Tensor]:
    out = {}
    for m in modalities:
        frame = last_frame(clip, m)
        out[m] = frames_to_tensor(frame, (stats or {}).get(m.value))[None, None]
    return out


def predict(clip: Clip, model: DMSModel, stats=None) -> np.ndarray:
    """Score one clip; returns the length-7 score vector."""
    inputs = clip_inputs(clip, model.order, stats)
    with torch.no_grad():
        return model(inputs)[0].double().numpy()


def _predict_as(topology: Topology, clip: Clip, model: DMSModel, stats=None) -> np.ndarray:
    if model.spec.topology is not topology:
        raise ValueError(f"model topology is {model.spec.topology.value}, not {topology.value}")
    return predict(clip, model, stats)


def predict_unimodal(clip: Clip, model: DMSModel, stats=None) -> np.ndarray:
    return _predict_as(Topology.UNIMODAL, clip, model, stats)


def predict_feature_fusion(clip: Clip, model: DMSModel, stats=None) -> np.ndarray:
    return _predict_as(Topology.FEATURE_FUSION, clip, model, stats)


def predict_decision_fusion(clip: Clip, model: DMSModel, stats=None) -> np.ndarray:
    return _predict_as(Topology.DECISION_FUSION, clip, model, stats)
