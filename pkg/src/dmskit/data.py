"""Manifests, label conversion, clip windowing, sampling and the synthetic dataset.

On-disk layout::

    <root>/<name>.csv              video_id,frame_start,frame_end,activity
    <root>/<name>.stats.json       {"top_ir": {"mean": m, "std": s}, ...}
    <root>/<video_id>/<modality>/<frame_index:06d>.png   8-bit grayscale
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import (
    CLIP_LENGTH,
    FRAME_HEIGHT,
    FRAME_WIDTH,
    ClassLabel,
    Clip,
    Modality,
    Stream,
    View,
    canonical_order,
)

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("video_id", "frame_start", "frame_end", "activity")
TRAIN_STRIDE = 4
EVAL_STRIDE = 16


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


class ManifestError(ValueError):
    pass


class LabelError(ValueError):
    pass


# --- label vocabulary ---------------------------------------------------------

_SEEN = {
    "normal driving": ClassLabel.C1,
    "talking on the phone - left": ClassLabel.C2,
    "talking on the phone - right": ClassLabel.C2,
    "talking on the phone": ClassLabel.C2,
    "messaging left": ClassLabel.C3,
    "messaging right": ClassLabel.C3,
    "messaging": ClassLabel.C3,
    "talking with passengers": ClassLabel.C4,
    "talking with passenger": ClassLabel.C4,
    "reaching behind": ClassLabel.C5,
    "adjusting radio": ClassLabel.C6,
    "drinking": ClassLabel.C7,
}

UNSEEN_ACTIVITIES = (
    "Adjusting side mirror",
    "Adjusting clothes",
    "Adjusting glasses",
    "Adjusting rear-view mirror",
    "Adjusting sunroof",
    "Wiping nose",
    "Head dropping (dozing off)",
    "Eating",
    "Wearing glasses",
    "Taking off glasses",
    "Picking up something",
    "Wiping sweat",
    "Touching face/hair",
    "Sneezing",
    "Coughing",
    "Reading",
    "Looking for something",
    "Yawning",
)


def _normalize_activity(text: str) -> str:
    s = text.strip().lower().replace("\u2013", "-").replace("\u2014", "-")
    s = re.sub(r"\s*-\s*(left|right)$", r" - \1", s)
    return re.sub(r"\s+", " ", s)


VOCABULARY: dict[str, ClassLabel] = dict(_SEEN)
VOCABULARY.update({_normalize_activity(a): ClassLabel.C8 for a in UNSEEN_ACTIVITIES})


def convert_label(activity: str, split: Split | str) -> ClassLabel:
    """Map a raw activity string to its merged class; unseen activities are test-only."""
    split = Split(split)
    label = VOCABULARY.get(_normalize_activity(activity))
    if label is None:
        raise LabelError(f"unknown activity {activity!r}")
    if label is ClassLabel.C8 and split is Split.TRAIN:
        raise LabelError(f"{activity!r} is an unseen activity and cannot appear in the training split")
    return label


# --- manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationRecord:
    video_id: str
    frame_start: int
    frame_end: int
    activity: str

    @property
    def length(self) -> int:
        return self.frame_end - self.frame_start + 1


@dataclass
class DatasetManifest:
    root: Path
    records: list[AnnotationRecord]
    split: Split
    modalities: tuple[Modality, ...] = ()
    stats: dict[str, dict[str, float]] = field(default_factory=dict)
    path: Path | None = None

    @property
    def modality_dirs(self) -> dict[Modality, str]:
        return {m: m.value for m in self.modalities}

    def label_of(self, record: AnnotationRecord) -> ClassLabel:
        return convert_label(record.activity, self.split)

    def frame_path(self, video_id: str, m: Modality, index: int) -> Path:
        return frame_path(self.root, video_id, m, index)


def frame_path(root: Path, video_id: str, m: Modality, index: int) -> Path:
    return Path(root) / video_id / m.value / f"{index:06d}.png"


def stats_path(manifest_path: Path) -> Path:
    manifest_path = Path(manifest_path)
    return manifest_path.with_name(manifest_path.stem + ".stats.json")


def _check_overlaps(records: Sequence[AnnotationRecord], lines: Sequence[int]) -> None:
    by_video: dict[str, list[tuple[int, int, int]]] = defaultdict(list)
    for rec, line in zip(records, lines):
        by_video[rec.video_id].append((rec.frame_start, rec.frame_end, line))
    for vid, spans in by_video.items():
        spans.sort()
        for (s0, e0, l0), (s1, e1, l1) in zip(spans, spans[1:]):
            if s1 <= e0:
                raise ManifestError(f"line {l1}: frames {s1}-{e1} of {vid!r} overlap line {l0} ({s0}-{e0})")


def load_manifest(path, split: Split | str | None = None, check_frames: bool = True) -> DatasetManifest:
    """Parse and validate a manifest CSV (and its stats sidecar, if present).

    ``split`` defaults to the file stem when that is ``train`` or ``test``.
    Declared modalities are those listed in the sidecar; their frames are
    checked on disk unless ``check_frames`` is False.
    """
    path = Path(path)
    if split is None:
        try:
            split = Split(path.stem.lower())
        except ValueError:
            raise ManifestError(f"{path}: cannot infer split from file name; pass split explicitly") from None
    split = Split(split)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    rows = csv.reader(text.splitlines())
    header = next(rows, None)
    if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
        raise ManifestError(f"line 1: expected header {','.join(MANIFEST_HEADER)}, got {header}")
    records, lines = [], []
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ManifestError(f"line {lineno}: expected 4 fields, got {len(row)}")
        vid, start, end, activity = (c.strip() for c in row)
        try:
            s, e = int(start), int(end)
        except ValueError:
            raise ManifestError(f"line {lineno}: frame bounds must be integers") from None
        if s < 0 or e < 0:
            raise ManifestError(f"line {lineno}: negative frame index")
        if s > e:
            raise ManifestError(f"line {lineno}: frame_start {s} > frame_end {e}")
        if not vid:
            raise ManifestError(f"line {lineno}: empty video_id")
        try:
            convert_label(activity, split)
        except LabelError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
        records.append(AnnotationRecord(vid, s, e, activity))
        lines.append(lineno)
    _check_overlaps(records, lines)

    stats: dict[str, dict[str, float]] = {}
    sidecar = stats_path(path)
    if sidecar.exists():
        try:
            stats = json.loads(sidecar.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{sidecar}: {exc}") from None
    modalities = tuple(canonical_order(Modality.parse(k) for k in stats))
    manifest = DatasetManifest(path.parent, records, split, modalities, stats, path)
    if check_frames:
        for rec in records:
            for m in modalities:
                for idx in (rec.frame_start, rec.frame_end):
                    p = manifest.frame_path(rec.video_id, m, idx)
                    if not p.exists():
                        raise ManifestError(f"missing frame {p}")
    return manifest


def write_manifest(path, records: Iterable[AnnotationRecord], stats: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.video_id, r.frame_start, r.frame_end, r.activity])
    if stats is not None:
        stats_path(path).write_text(json.dumps(stats, indent=2, sort_keys=True), encoding="utf-8")
    return path


# --- frames and windows -------------------------------------------------------


def read_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_frame(path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path, compress_level=1)


@dataclass(frozen=True)
class ClipWindow:
    """A 16-frame window inside one record; ``load`` reads the frames from disk."""

    root: Path
    video_id: str
    start: int
    modalities: tuple[Modality, ...]
    label: ClassLabel
    activity: str = ""

    @property
    def last_index(self) -> int:
        return self.start + CLIP_LENGTH - 1

    def load(self) -> Clip:
        frames = {
            m: np.stack([read_frame(frame_path(self.root, self.video_id, m, i))
                         for i in range(self.start, self.start + CLIP_LENGTH)])
            for m in self.modalities
        }
        return Clip(frames, start=self.start, video_id=self.video_id)

    def load_last(self, m: Modality) -> np.ndarray:
        return read_frame(frame_path(self.root, self.video_id, m, self.last_index))


def window_clips(manifest: DatasetManifest, stride: int = EVAL_STRIDE) -> list[tuple[ClipWindow, ClassLabel]]:
    """16-frame windows that never cross a record boundary, stepping by ``stride``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = []
    for rec in manifest.records:
        label = manifest.label_of(rec)
        for start in range(rec.frame_start, rec.frame_end - CLIP_LENGTH + 2, stride):
            w = ClipWindow(manifest.root, rec.video_id, start, manifest.modalities, label, rec.activity)
            out.append((w, label))
    return out


def balanced_sampler(labels: Sequence, seed: int, oversample: bool = False) -> np.ndarray:
    """Indices for one class-balanced epoch.

    Every class contributes the minority-class count (or the majority count
    when ``oversample``), drawn uniformly without replacement. Classes are
    interleaved in a seed-shuffled but fixed order, so any contiguous batch
    holds per-class counts that differ by at most one.
    """
    labels = np.asarray([int(l) for l in labels])
    if labels.size == 0:
        raise ValueError("no samples to balance")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    counts = [len(ix) for ix in members]
    per_class = max(counts) if oversample else min(counts)
    picks = []
    for ix in members:
        if per_class <= len(ix):
            picks.append(rng.permutation(ix)[:per_class])
        else:
            extra = rng.choice(ix, per_class - len(ix), replace=True)
            picks.append(rng.permutation(np.concatenate([ix, extra])))
    order = rng.permutation(len(classes))
    grid = np.stack([picks[k] for k in order], axis=1)  # rows = rounds
    return grid.reshape(-1)


# --- normalisation and augmentation -------------------------------------------


def frame_stats(frames: Iterable[np.ndarray]) -> dict[str, float]:
    total = total_sq = 0.0
    n = 0
    for f in frames:
        x = np.asarray(f, dtype=np.float64) / 255.0
        total += x.sum()
        total_sq += np.square(x).sum()
        n += x.size
    if n == 0:
        raise ValueError("no frames to summarise")
    mean = total / n
    std = max(np.sqrt(max(total_sq / n - mean * mean, 0.0)), 1e-6)
    return {"mean": float(mean), "std": float(std)}


def augment(batch: Mapping[Modality, torch.Tensor], generator: torch.Generator,
            max_shift: int = 8, min_scale: float = 0.9) -> dict[Modality, torch.Tensor]:
    """Random horizontal shift and crop-resize, identical across a sample's modalities.

    Tensors are (B, T, H, W); the same draw is applied to every modality of a sample.
    """
    first = next(iter(batch.values()))
    b, _, h, w = first.shape
    shifts = torch.randint(-max_shift, max_shift + 1, (b,), generator=generator)
    scales = min_scale + (1 - min_scale) * torch.rand(b, generator=generator)
    offs = torch.rand(b, 2, generator=generator)
    out = {}
    for m, x in batch.items():
        samples = []
        for i in range(b):
            xi = x[i]
            ch, cw = max(int(round(h * scales[i].item())), 1), max(int(round(w * scales[i].item())), 1)
            y0 = int(offs[i, 0].item() * (h - ch))
            x0 = int(offs[i, 1].item() * (w - cw))
            xi = xi[:, y0:y0 + ch, x0:x0 + cw]
            if (ch, cw) != (h, w):
                xi = F.interpolate(xi[None], size=(h, w), mode="bilinear", align_corners=False)[0]
            s = int(shifts[i].item())
            if s:
                shifted = torch.full_like(xi, float(xi.min()))
                if s > 0:
                    shifted[..., s:] = xi[..., :-s]
                else:
                    shifted[..., :s] = xi[..., -s:]
                xi = shifted
            samples.append(xi)
        out[m] = torch.stack(samples)
    return out


# --- synthetic open-set dataset -----------------------------------------------

SYNTH_ACTIVITIES = {
    ClassLabel.C1: ("Normal driving",),
    ClassLabel.C2: ("Talking on the phone - left", "Talking on the phone - right"),
    ClassLabel.C3: ("Messaging left", "Messaging right"),
    ClassLabel.C4: ("Talking with passengers",),
    ClassLabel.C5: ("Reaching behind",),
    ClassLabel.C6: ("Adjusting radio",),
    ClassLabel.C7: ("Drinking",),
    ClassLabel.C8: ("Eating", "Reading"),
}

# glyph kind, centre (row, col) as fractions of the frame, and fill texture
_GLYPHS = {
    "Normal driving": ("bars", 0.78, 0.50, "hstripes6"),
    "Talking on the phone": ("disc", 0.25, 0.20, "vstripes6"),
    "Messaging": ("square", 0.60, 0.30, "checker4"),
    "Talking with passengers": ("cross", 0.30, 0.78, "solid"),
    "Reaching behind": ("hbar", 0.15, 0.55, "hstripes12"),
    "Adjusting radio": ("triangle", 0.58, 0.72, "vstripes12"),
    "Drinking": ("ring", 0.40, 0.45, "dots8"),
    "Eating": ("diamond", 0.45, 0.12, "diagonal"),
    "Reading": ("square", 0.80, 0.85, "noise"),
}

CLASS_NAME_FOR_GLYPH = {
    ClassLabel.C1: "Normal driving",
    ClassLabel.C2: "Talking on the phone",
    ClassLabel.C3: "Messaging",
    ClassLabel.C4: "Talking with passengers",
    ClassLabel.C5: "Reaching behind",
    ClassLabel.C6: "Adjusting radio",
    ClassLabel.C7: "Drinking",
}


def _glyph_key(activity: str, label: ClassLabel) -> str:
    return activity if label is ClassLabel.C8 else CLASS_NAME_FOR_GLYPH[label]


_YY, _XX = np.mgrid[0:FRAME_HEIGHT, 0:FRAME_WIDTH].astype(np.float64)
_FRONT_TEXTURE = 12.0 * np.sin(_XX / 5.0) * np.cos(_YY / 7.0)
# fill patterns in [0, 1]; all seen-class patterns are mirror-symmetric so the
# mirrored left/right variants keep their class texture
_TEXTURES = {
    "solid": np.ones_like(_YY),
    "hstripes6": ((_YY // 3) % 2).astype(np.float64),
    "vstripes6": ((_XX // 3) % 2).astype(np.float64),
    "hstripes12": ((_YY // 6) % 2).astype(np.float64),
    "vstripes12": ((_XX // 6) % 2).astype(np.float64),
    "checker4": (((_YY // 4) + (_XX // 4)) % 2).astype(np.float64),
    "dots8": (((_YY % 8) < 4) & ((_XX % 8) < 4)).astype(np.float64),
    "diagonal": (((_YY + _XX) // 4) % 2).astype(np.float64),
}


def _glyph_mask(kind: str, cy: float, cx: float, size: float) -> np.ndarray:
    yy, xx = _YY, _XX
    dy, dx = yy - cy, xx - cx
    r = size
    if kind == "disc":
        return dy**2 + dx**2 <= r**2
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= 0.55 * r)
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "cross":
        return ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r))
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.45) & (np.abs(dx) <= r * 1.8)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "bars":
        return (np.abs(dy) <= r * 0.9) & (np.abs(np.abs(dx) - r * 1.2) <= r * 0.3)
    raise ValueError(kind)


def _render_base(rng: np.random.Generator) -> tuple[np.ndarray, float]:
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * _YY / FRAME_HEIGHT + np.sin(angle) * _XX / FRAME_WIDTH
    base = rng.uniform(50, 90) + 20 * ramp
    return base, rng.uniform(150, 230)


def _modality_transform(frame: np.ndarray, m: Modality) -> np.ndarray:
    out = frame
    if m.view is View.FRONT:
        out = out + _FRONT_TEXTURE
    if m.stream is Stream.DEPTH:
        out = 255.0 - out
    return out


def _render_clip(rng: np.random.Generator, activity: str, label: ClassLabel,
                 modalities: Sequence[Modality], frozen: bool) -> dict[Modality, np.ndarray]:
    kind, fy, fx, texture = _GLYPHS[_glyph_key(activity, label)]
    base, intensity = _render_base(rng)
    cy = fy * FRAME_HEIGHT + rng.uniform(-6, 6)
    cx = fx * FRAME_WIDTH + rng.uniform(-6, 6)
    # mirrored hand variants are drawn mirrored
    if activity.lower().endswith("right"):
        cx = FRAME_WIDTH - cx
    size = rng.uniform(15, 19)
    vy, vx = rng.uniform(-0.15, 0.15, size=2)
    fill = _TEXTURES.get(texture)
    if fill is None:
        fill = rng.uniform(0, 1, size=_YY.shape)
    fill = base + (intensity - base) * (0.35 + 0.65 * fill)
    clip = {m: np.empty((CLIP_LENGTH, FRAME_HEIGHT, FRAME_WIDTH), dtype=np.uint8) for m in modalities}
    for t in range(CLIP_LENGTH):
        tt = 0 if frozen else t
        img = base.copy()
        mask = _glyph_mask(kind, cy + vy * tt, cx + vx * tt, size)
        img[mask] = fill[mask]
        for m in modalities:
            clip[m][t] = np.clip(np.rint(_modality_transform(img, m)), 0, 255).astype(np.uint8)
    return clip


@dataclass
class SynthConfig:
    out: Path
    per_class: int = 50
    test_per_class: int | None = None
    unseen_per_activity: int | None = None
    seed: int = 0
    modalities: tuple[Modality, ...] = tuple(Modality)
    frozen: bool = False


def synth_generate(cfg: SynthConfig) -> tuple[DatasetManifest, DatasetManifest]:
    """Render a small open-set dataset: seven seen glyph classes plus unseen glyphs (test only).

    Each sample is a 16-frame video with a single record. Returns the train and
    test manifests (``train.csv`` / ``test.csv`` under ``cfg.out``).
    """
    out = Path(cfg.out)
    rng = np.random.default_rng(cfg.seed)
    test_per_class = cfg.test_per_class if cfg.test_per_class is not None else max(cfg.per_class // 2, 1)
    unseen = cfg.unseen_per_activity if cfg.unseen_per_activity is not None else test_per_class
    mods = tuple(canonical_order(cfg.modalities))
    manifests = []
    for split, n_seen in ((Split.TRAIN, cfg.per_class), (Split.TEST, test_per_class)):
        records = []
        sums = {m: [0.0, 0.0, 0] for m in mods}
        plan = [(label, i) for label in ClassLabel if label.is_seen for i in range(n_seen)]
        if split is Split.TEST:
            plan += [(ClassLabel.C8, i) for i in range(unseen * len(SYNTH_ACTIVITIES[ClassLabel.C8]))]
        for label, i in plan:
            names = SYNTH_ACTIVITIES[label]
            activity = names[i % len(names)]
            vid = f"{split.value}_{label}_{i:04d}"
            clip = _render_clip(rng, activity, label, mods, cfg.frozen)
            for m, frames in clip.items():
                x = frames.astype(np.float64) / 255.0
                sums[m][0] += x.sum()
                sums[m][1] += np.square(x).sum()
                sums[m][2] += x.size
                for t, frame in enumerate(frames):
                    write_frame(frame_path(out, vid, m, t), frame)
            records.append(AnnotationRecord(vid, 0, CLIP_LENGTH - 1, activity))
        stats = {}
        for m, (s, sq, n) in sums.items():
            mean = s / n
            stats[m.value] = {"mean": mean, "std": float(max(np.sqrt(max(sq / n - mean * mean, 0.0)), 1e-6))}
        path = write_manifest(out / f"{split.value}.csv", records, stats)
        manifests.append(load_manifest(path, split))
        log.info("wrote %d %s records to %s", len(records), split.value, path)
    return manifests[0], manifests[1]
