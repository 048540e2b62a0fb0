"""Flat ``key = value`` run configuration.

One assignment per line; ``#`` starts a comment; dotted keys group settings
(``model.topology``, ``data.train_manifest``). Relative paths in a file are
resolved against the file's directory, relative paths in overrides against the
working directory. A relative encoder-weights path with no file beside the
config is left as written and later looked up under ``DMSKIT_CACHE``. Example::

    seed = 0
    epochs = 20
    out_dir = runs/tiny
    data.train_manifest = synth/train.csv
    data.test_manifest = synth/test.csv
    model.topology = unimodal
    model.modalities = top_ir
    model.encoder = tiny-cnn
    model.head = flat
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Iterable, Mapping

from .core import Modality
from .fusion import DEFAULT_REDUCTION
from .models import EncoderSpec, ModelSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_INT = ("seed", "epochs", "batch_size", "restart_epochs", "restart_mult", "stride", "workers", "bench.runs",
        "bench.warmup", "model.reduction")
_FLOAT = ("lr", "weight_decay", "temperature", "contrastive_weight", "val_fraction")
_BOOL = ("augment", "epoch_checkpoints")
_PATH = ("out_dir", "data.train_manifest", "data.test_manifest")
_TEXT = ("model.topology", "model.modalities", "model.encoder", "model.fusion", "model.head", "bench.input_shape")
_PREFIXES = ("model.pretrained.", "model.encoder.")

DEFAULTS: dict[str, str] = {
    "model.topology": "unimodal",
    "model.modalities": "top_ir",
    "model.encoder": "tiny-cnn",
    "model.fusion": "aff",
    "model.head": "flat",
    "model.reduction": str(DEFAULT_REDUCTION),
}


def _known(key: str) -> bool:
    if key in _INT + _FLOAT + _BOOL + _PATH + _TEXT:
        return True
    for p in _PREFIXES:
        if key.startswith(p):
            try:
                Modality.parse(key[len(p):])
            except ValueError:
                return False
            return True
    return False


def _split_assignment(text: str, where: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"{where}: expected 'key = value', got {text!r}")
    key, value = text.split("=", 1)
    key, value = key.strip(), value.strip()
    if not key:
        raise ConfigError(f"{where}: empty key")
    if not _known(key):
        raise ConfigError(f"{where}: unknown key {key!r}")
    return key, value


def _resolve(value: str, base: Path) -> str:
    p = Path(value).expanduser()
    return str(p if p.is_absolute() else base / p)


def parse_config(text: str, base: Path = Path(".")) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = _split_assignment(line, f"line {n}")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        if key in _PATH:
            value = _resolve(value, base)
        elif key.startswith("model.pretrained.") and Path(_resolve(value, base)).exists():
            # weights missing beside the config stay relative so the cache directory can supply them
            value = _resolve(value, base)
        out[key] = value
    return out


def load_config(path, overrides: Iterable[str] = ()) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = parse_config(text, path.parent)
    for item in overrides:
        key, value = _split_assignment(item, "override")
        values[key] = value
    return values


def _typed(values: Mapping[str, str], key: str, default: Any = None) -> Any:
    if key not in values:
        return default
    v = values[key]
    try:
        if key in _INT:
            return int(v)
        if key in _FLOAT:
            return float(v)
        if key in _BOOL:
            low = v.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(v)
            return low in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"bad value for {key}: {v!r}") from None
    return v


def model_spec(values: Mapping[str, str]) -> ModelSpec:
    v = {**DEFAULTS, **values}
    try:
        mods = [Modality.parse(s) for s in v["model.modalities"].split(",") if s.strip()]
        encoders = {
            m: EncoderSpec(v.get(f"model.encoder.{m.value}", v["model.encoder"]), v.get(f"model.pretrained.{m.value}"))
            for m in mods
        }
        return ModelSpec(
            topology=v["model.topology"],
            modalities=tuple(mods),
            encoders=encoders,
            fusion_variant=v["model.fusion"],
            head=v["model.head"],
            reduction_ratio=_typed(v, "model.reduction"),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid model configuration: {exc}") from exc


def train_config(values: Mapping[str, str]) -> TrainConfig:
    if "data.train_manifest" not in values:
        raise ConfigError("data.train_manifest is required for training")
    kwargs: dict[str, Any] = {}
    for key in _INT + _FLOAT + _BOOL:
        if "." not in key and key in values:
            kwargs[key] = _typed(values, key)
    if "out_dir" in values:
        kwargs["out_dir"] = Path(values["out_dir"])
    test = values.get("data.test_manifest")
    try:
        return TrainConfig(
            model=model_spec(values),
            train_manifest=Path(values["data.train_manifest"]),
            test_manifest=Path(test) if test else None,
            **kwargs,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def bench_settings(values: Mapping[str, str]) -> dict[str, Any]:
    shape = values.get("bench.input_shape")
    out: dict[str, Any] = {"runs": _typed(values, "bench.runs", 1000), "warmup": _typed(values, "bench.warmup", 10),
                           "seed": _typed(values, "seed", 0)}
    if shape:
        try:
            out["input_shape"] = tuple(int(s) for s in shape.replace("x", ",").split(","))
        except ValueError:
            raise ConfigError(f"bad bench.input_shape {shape!r}") from None
        if len(out["input_shape"]) != 3 or min(out["input_shape"]) < 1:
            raise ConfigError("bench.input_shape must be T,H,W")
    return out
