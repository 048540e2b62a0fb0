"""Domain types shared across the toolkit."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

FRAME_HEIGHT = 171
FRAME_WIDTH = 224
CLIP_LENGTH = 16
NUM_TRAIN_CLASSES = 7


class View(enum.Enum):
    TOP = "top"
    FRONT = "front"


class Stream(enum.Enum):
    IR = "ir"
    DEPTH = "depth"


class Modality(enum.Enum):
    """One (view, stream) camera source. Declaration order is the canonical order."""

    TOP_IR = "top_ir"
    TOP_DEPTH = "top_depth"
    FRONT_IR = "front_ir"
    FRONT_DEPTH = "front_depth"

    @property
    def view(self) -> View:
        return View(self.value.split("_")[0])

    @property
    def stream(self) -> Stream:
        return Stream(self.value.split("_")[1])

    @classmethod
    def of(cls, view: View, stream: Stream) -> "Modality":
        return cls(f"{view.value}_{stream.value}")

    @classmethod
    def parse(cls, text: str) -> "Modality":
        try:
            return cls(text.strip().lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown modality {text!r} (expected one of {names})") from None

    def __str__(self) -> str:
        return self.value


def canonical_order(modalities) -> list[Modality]:
    order = list(Modality)
    return sorted(set(modalities), key=order.index)


class ClassLabel(enum.IntEnum):
    """Merged activity classes. C1 is normal driving, C8 pools every unseen activity."""

    C1 = 1
    C2 = 2
    C3 = 3
    C4 = 4
    C5 = 5
    C6 = 6
    C7 = 7
    C8 = 8

    @property
    def index(self) -> int:
        return int(self) - 1

    @property
    def is_seen(self) -> bool:
        return self is not ClassLabel.C8

    @classmethod
    def from_index(cls, index: int) -> "ClassLabel":
        return cls(int(index) + 1)

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        return cls[text.strip().upper()]

    def __str__(self) -> str:
        return self.name.lower()


CLASS_DESCRIPTIONS = {
    ClassLabel.C1: "Normal driving",
    ClassLabel.C2: "Talking on the phone",
    ClassLabel.C3: "Messaging",
    ClassLabel.C4: "Talking with passengers",
    ClassLabel.C5: "Reaching behind",
    ClassLabel.C6: "Adjusting radio",
    ClassLabel.C7: "Drinking",
    ClassLabel.C8: "Unseen",
}


def one_hot(label: ClassLabel) -> np.ndarray:
    if not label.is_seen:
        raise ValueError("c8 (unseen) has no training encoding")
    out = np.zeros(NUM_TRAIN_CLASSES, dtype=np.float64)
    out[label.index] = 1.0
    return out


class ClipError(ValueError):
    """A clip or frame violates its shape/count invariants."""


def validate_frame(pixels: np.ndarray) -> None:
    if pixels.ndim != 2 or pixels.shape != (FRAME_HEIGHT, FRAME_WIDTH):
        raise ClipError(
            f"shape: expected frame of {FRAME_HEIGHT}x{FRAME_WIDTH}, got {'x'.join(map(str, pixels.shape))}"
        )
    if not np.all(np.isfinite(pixels)):
        raise ClipError("finite: frame contains non-finite values")


@dataclass(frozen=True)
class Clip:
    """A synchronized window of frames, one (T, H, W) array per modality present."""

    frames: Mapping[Modality, np.ndarray]
    start: int = 0
    video_id: str = ""

    def __post_init__(self):
        frozen = {}
        for m, arr in self.frames.items():
            arr = np.asarray(arr).view()
            arr.flags.writeable = False
            frozen[m] = arr
        object.__setattr__(self, "frames", MappingProxyType(frozen))

    @property
    def modalities_present(self) -> frozenset[Modality]:
        return frozenset(self.frames)


def validate_clip(clip: Clip) -> None:
    """Raise ClipError naming the first violated invariant; return None if the clip is valid."""
    if not clip.frames:
        raise ClipError("modality: clip has no modalities")
    for m in clip.frames:
        if not isinstance(m, Modality):
            raise ClipError(f"modality: {m!r} is not a Modality")
    for m in canonical_order(clip.frames):
        arr = clip.frames[m]
        if arr.ndim != 3:
            raise ClipError(f"shape: {m} frames must be a (T, H, W) stack, got ndim={arr.ndim}")
        if arr.shape[0] != CLIP_LENGTH:
            raise ClipError(f"frame count: {m} has {arr.shape[0]} frames, expected {CLIP_LENGTH}")
        for frame in arr:
            try:
                validate_frame(frame)
            except ClipError as exc:
                raise ClipError(f"{exc} (modality {m})") from None
