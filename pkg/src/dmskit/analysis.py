"""Consecutive-frame similarity: three metrics and the per-class x per-modality table.

The histogram similarity is the intersection of 256-bin L1-normalised
histograms, which is guaranteed to lie in [0, 1]. SSIM uses an 11x11 Gaussian
window (sigma 1.5), K1=0.01, K2=0.03, L=255, averaged over all valid windows.
All metrics run on raw [0, 255] pixel values.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .core import CLASS_DESCRIPTIONS, ClassLabel, Modality
from .data import AnnotationRecord, DatasetManifest, read_frame

METRICS = ("hist", "rmse", "ssim")
METRIC_TITLES = {"hist": "Histogram Similarity", "rmse": "Pixel-wise RMSE", "ssim": "Structural Similarity"}
SEEN_CLASSES = tuple(c for c in ClassLabel if c.is_seen)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def pixel_rmse(a, b) -> float:
    return _kernels.rmse(*_pair(a, b))


def histogram_similarity(a, b) -> float:
    return _kernels.hist_intersection(*_pair(a, b))


def ssim(a, b) -> float:
    a, b = _pair(a, b)
    if min(a.shape) < _kernels.SSIM_WIN:
        raise ValueError(f"frames must be at least {_kernels.SSIM_WIN}x{_kernels.SSIM_WIN} for SSIM")
    return _kernels.ssim(a, b)


@dataclass
class SimilarityTable:
    """Mean metrics with shape (7 classes, 4 modalities, 3 metrics); NaN where no pairs exist."""

    values: np.ndarray
    pairs: np.ndarray  # (7, 4) number of frame pairs averaged

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def cell(self, label: ClassLabel, m: Modality, metric: str) -> float:
        return float(self.values[label.index, list(Modality).index(m), METRICS.index(metric)])

    def to_json(self) -> dict:
        rows = {}
        for c in SEEN_CLASSES:
            rows[str(c)] = {
                m.value: {
                    metric: (None if np.isnan(v) else float(v))
                    for metric, v in zip(METRICS, self.values[c.index, k])
                } | {"pairs": int(self.pairs[c.index, k])}
                for k, m in enumerate(Modality)
            }
        return {"metrics": list(METRICS), "modalities": [m.value for m in Modality], "rows": rows}

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["activity", "label"] + [f"{METRIC_TITLES[x]} / {m.value}" for x in METRICS for m in Modality])
            for c in SEEN_CLASSES:
                cells = []
                for j in range(len(METRICS)):
                    for k in range(len(Modality)):
                        v = self.values[c.index, k, j]
                        cells.append("" if np.isnan(v) else f"{v:.6f}")
                w.writerow([CLASS_DESCRIPTIONS[c], str(c)] + cells)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")


def _record_sums(manifest: DatasetManifest, rec: AnnotationRecord) -> dict[Modality, np.ndarray]:
    out = {}
    for m in manifest.modalities:
        sums = np.zeros(4)  # hist, rmse, ssim, count
        prev = None
        for idx in range(rec.frame_start, rec.frame_end + 1):
            cur = read_frame(manifest.frame_path(rec.video_id, m, idx))
            if prev is not None:
                sums += (histogram_similarity(prev, cur), pixel_rmse(prev, cur), ssim(prev, cur), 1)
            prev = cur
        out[m] = sums
    return out


def similarity_report(manifest: DatasetManifest, workers: int = 0) -> SimilarityTable:
    """Average all three metrics over every consecutive frame pair, per class and modality.

    Records are processed in sorted (video_id, frame_start) order and reduced in
    that order, so the result does not depend on ``workers``. Unseen-class
    records are not part of the seven-row table.
    """
    records = sorted(
        (r for r in manifest.records if manifest.label_of(r).is_seen),
        key=lambda r: (r.video_id, r.frame_start),
    )
    if not records:
        raise ValueError("manifest has no seen-class records")
    if not manifest.modalities:
        raise ValueError("manifest declares no modalities (missing stats sidecar?)")
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda r: _record_sums(manifest, r), records))
    else:
        results = [_record_sums(manifest, r) for r in records]

    totals = np.zeros((len(SEEN_CLASSES), len(Modality), 4))
    mods = list(Modality)
    for rec, sums in zip(records, results):
        c = manifest.label_of(rec).index
        for m, s in sums.items():
            totals[c, mods.index(m)] += s
    counts = totals[..., 3]
    with np.errstate(invalid="ignore", divide="ignore"):
        values = totals[..., :3] / counts[..., None]
    values[counts == 0] = np.nan
    return SimilarityTable(values, counts.astype(np.int64))
