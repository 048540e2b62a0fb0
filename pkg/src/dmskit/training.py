"""Two-objective training loop and the checkpoint file format.

Each batch takes two optimiser steps: the supervised contrastive loss on
projected encoder embeddings updates the encoders (and projections), then the
cross-entropy loss updates attention/fusion/head parameters on detached
encoder features, so no classification gradient reaches an encoder.

Checkpoint layout (little-endian)::

    b"DMSKCKPT" | u32 version | u64 header length | header JSON | tensor payload

The header stores the model spec, its config hash, free-form metadata, a
SHA-256 of the payload and, per tensor, its name, dtype, shape and byte range.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .core import ClassLabel, Modality
from .data import TRAIN_STRIDE, augment, balanced_sampler, load_manifest, window_clips
from .losses import DEFAULT_TEMPERATURE, flat_cross_entropy, posterior_cross_entropy, supervised_contrastive
from .models import DMSModel, HeadType, ModelSpec, build_model, frames_to_tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DMSKCKPT"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


class ConfigHashWarning(UserWarning):
    pass


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(path, model: DMSModel, meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "config_hash": model.spec.config_hash(),
        "model_spec": model.spec.to_dict(),
        "meta": dict(meta or {}),
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return (header, state_dict). Raises CheckpointError on any corruption."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = data[start:]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {expected} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    state = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        state[e["name"]] = torch.from_numpy(arr)
    return header, state


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> tuple[DMSModel, dict]:
    """Rebuild the model stored in ``path``. A config-hash mismatch with
    ``expected_spec`` only warns; the stored spec is used."""
    header, state = read_checkpoint(path)
    spec = ModelSpec.from_dict(header["model_spec"])
    if spec.config_hash() != header["config_hash"]:
        warnings.warn(f"{path}: stored config hash does not match stored model spec", ConfigHashWarning)
    if expected_spec is not None and expected_spec.config_hash() != header["config_hash"]:
        warnings.warn(
            f"{path}: checkpoint config hash {header['config_hash']} differs from expected "
            f"{expected_spec.config_hash()}",
            ConfigHashWarning,
        )
    # weights come from the checkpoint, not from the original encoder files
    spec = ModelSpec.from_dict(_strip_pretrained(header["model_spec"]))
    model = DMSModel(spec)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the stored spec ({exc})") from None
    model.eval()
    return model, header


def _strip_pretrained(d: Mapping) -> dict:
    d = json.loads(json.dumps(d))
    for enc in d.get("encoders", {}).values():
        enc["pretrained_weights"] = None
    return d


# --- configuration ------------------------------------------------------------


@dataclass
class TrainConfig:
    model: ModelSpec
    train_manifest: Path
    out_dir: Path = Path("runs/default")
    test_manifest: Path | None = None
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 5e-3
    restart_epochs: int = 10
    restart_mult: int = 2
    seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE
    contrastive_weight: float = 1.0
    stride: int = TRAIN_STRIDE
    augment: bool = True
    val_fraction: float = 0.1
    workers: int = 0
    epoch_checkpoints: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "restart_epochs", "restart_mult", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.contrastive_weight < 0:
            raise ValueError("weight_decay and contrastive_weight must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        for k in ("train_manifest", "out_dir", "test_manifest"):
            d[k] = None if d[k] is None else str(d[k])
        return d


# --- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    history: list[dict]
    train_accuracy: float | None
    model: DMSModel


def warm_restart_lr(epoch: float, base_lr: float, first_cycle: float = 10, mult: float = 2,
                    min_lr: float = 0.0) -> float:
    """Cosine annealing with warm restarts at a (fractional) epoch position."""
    start, length = 0.0, float(first_cycle)
    while epoch >= start + length:
        start += length
        length *= mult
    phase = (epoch - start) / length
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * phase))


def _set_deterministic(seed: int, workers: int) -> None:
    torch.manual_seed(seed)
    if workers == 0:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _split_by_video(windows, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    videos = sorted({w.video_id for w, _ in windows})
    n_val = int(math.ceil(fraction * len(videos))) if fraction > 0 and len(videos) > 1 else 0
    rng = np.random.default_rng(seed)
    held = set(rng.permutation(videos)[:n_val].tolist())
    train = [i for i, (w, _) in enumerate(windows) if w.video_id not in held]
    val = [i for i, (w, _) in enumerate(windows) if w.video_id in held]
    return train, val


class _FrameCache:
    """Last frames of every window, held in memory as uint8."""

    def __init__(self, windows, modalities, stats):
        self.modalities = list(modalities)
        self.stats = stats
        self.frames = {m: np.stack([w.load_last(m) for w, _ in windows]) for m in self.modalities}
        self.labels = np.asarray([int(label) for _, label in windows], dtype=np.int64)

    def batch(self, idx) -> dict[Modality, torch.Tensor]:
        return {m: frames_to_tensor(self.frames[m][idx], self.stats.get(m.value))[:, None]
                for m in self.modalities}


def _predict_indices(model: DMSModel, cache: _FrameCache, idx, batch_size=128) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(idx), batch_size):
            out.append(model(cache.batch(idx[i:i + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros((0, 7))


def closed_set_accuracy(scores: np.ndarray, labels: np.ndarray) -> float | None:
    if len(labels) == 0:
        return None
    return float(np.mean(np.argmax(scores, axis=1) + 1 == labels))


def train(config: TrainConfig) -> TrainResult:
    """Train ``config.model`` on the training manifest; write checkpoints and a JSON-lines log."""
    _set_deterministic(config.seed, config.workers)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(config.train_manifest, "train")
    windows = window_clips(manifest, config.stride)
    if not windows:
        raise TrainingError("training manifest yields no 16-frame windows")
    model = build_model(config.model, config.seed)
    missing = set(model.order) - set(manifest.modalities)
    if missing:
        raise TrainingError(f"training data lacks modalities {sorted(m.value for m in missing)}")
    cache = _FrameCache(windows, model.order, manifest.stats)
    train_idx, val_idx = _split_by_video(windows, config.val_fraction, config.seed)
    train_labels = cache.labels[train_idx]
    if np.any(train_labels == int(ClassLabel.C8)):
        raise TrainingError("unseen class in training data")

    enc_params = list(model.encoder_parameters())
    head_params = list(model.head_parameters())
    enc_opt = torch.optim.Adam(enc_params, lr=config.lr, weight_decay=config.weight_decay)
    head_opt = torch.optim.Adam(head_params, lr=config.lr, weight_decay=config.weight_decay)
    ce = posterior_cross_entropy if config.model.head is HeadType.POSTERIOR else flat_cross_entropy
    use_contrastive = config.contrastive_weight > 0
    gen = torch.Generator().manual_seed(config.seed)
    meta = {"stats": manifest.stats, "train_config": config.to_dict(), "seed": config.seed}

    log_path = out / "train_log.jsonl"
    history: list[dict] = []
    best_path = out / "best.ckpt"
    final_path = out / "final.ckpt"
    best_acc = -1.0
    save_checkpoint(best_path, model, {**meta, "epoch": 0})
    with log_path.open("w", encoding="utf-8") as logf:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            order = np.asarray(train_idx)[balanced_sampler(train_labels, config.seed + epoch)]
            n_batches = max(1, math.ceil(len(order) / config.batch_size))
            c_losses, h_losses, correct = [], [], 0
            for b in range(n_batches):
                lr = warm_restart_lr(epoch + b / n_batches, config.lr, config.restart_epochs, config.restart_mult)
                for opt in (enc_opt, head_opt):
                    for group in opt.param_groups:
                        group["lr"] = lr
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                x = cache.batch(idx)
                if config.augment:
                    x = augment(x, gen)
                y = torch.as_tensor(cache.labels[idx] - 1)
                model.train()
                if use_contrastive:
                    feats = model.encode(x)
                    emb = model.embed(feats)
                    try:
                        c_loss = torch.stack([supervised_contrastive(e, y, config.temperature)
                                              for e in emb.values()]).mean()
                    except ValueError:
                        c_loss = None
                    if c_loss is not None:
                        _check_finite(c_loss, "contrastive", epoch, b)
                        enc_opt.zero_grad(set_to_none=True)
                        (config.contrastive_weight * c_loss).backward()
                        enc_opt.step()
                        c_losses.append(c_loss.item())
                    feats = {m: f.detach() for m, f in feats.items()}
                else:
                    model.encoders.eval()
                    with torch.no_grad():
                        feats = model.encode(x)
                scores = model.predict_from_features(feats)
                h_loss = ce(scores, y)
                _check_finite(h_loss, "cross-entropy", epoch, b)
                head_opt.zero_grad(set_to_none=True)
                h_loss.backward()
                head_opt.step()
                h_losses.append(h_loss.item())
                correct += int((scores.argmax(1) == y).sum())
            val_acc = closed_set_accuracy(_predict_indices(model, cache, val_idx), cache.labels[val_idx])
            entry = {
                "epoch": epoch + 1,
                "contrastive_loss": float(np.mean(c_losses)) if c_losses else None,
                "ce_loss": float(np.mean(h_losses)),
                "lr": head_opt.param_groups[0]["lr"],
                "train_accuracy": correct / len(order),
                "val_accuracy": val_acc,
                "seconds": round(time.perf_counter() - t0, 3),
            }
            history.append(entry)
            logf.write(json.dumps(entry) + "\n")
            logf.flush()
            log.info("epoch %d: %s", epoch + 1, entry)
            if config.epoch_checkpoints:
                save_checkpoint(out / f"epoch_{epoch + 1:03d}.ckpt", model, {**meta, "epoch": epoch + 1})
            score = val_acc if val_acc is not None else entry["train_accuracy"]
            if score > best_acc:
                best_acc = score
                save_checkpoint(best_path, model, {**meta, "epoch": epoch + 1, "val_accuracy": val_acc})
    save_checkpoint(final_path, model, {**meta, "epoch": config.epochs})
    train_acc = closed_set_accuracy(_predict_indices(model, cache, train_idx), cache.labels[train_idx])
    return TrainResult(final_path, best_path, log_path, history, train_acc, model)


def _check_finite(loss: torch.Tensor, name: str, epoch: int, batch: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite {name} loss ({loss.item()}) at epoch {epoch + 1}, batch {batch}")
