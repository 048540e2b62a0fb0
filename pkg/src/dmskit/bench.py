"""FLOPs counting and latency measurement.

Counting convention: one multiply-accumulate is one FLOP (convolutions and
fully connected layers); element-wise operations (normalisation, activations,
additions, softmax/sigmoid entries, attention products) cost one FLOP per
output element. Counts depend only on shapes, never on parameter values.
"""

from __future__ import annotations

import logging
import platform
import time
import warnings
from fractions import Fraction
from typing import Mapping

import numpy as np
import torch
from torch import nn
from torchvision.models.mobilenetv2 import InvertedResidual
from torchvision.models.resnet import BasicBlock

from .core import CLIP_LENGTH, FRAME_HEIGHT, FRAME_WIDTH
from .fusion import BatchNorm2d
from .models import DMSModel, ModelSpec, build_model

log = logging.getLogger(__name__)

REALTIME_BOUND = Fraction(16, 45)  # seconds to capture one 16-frame clip at 45 Hz
REALTIME_BOUND_TEXT = "16/45 s"
FLOPS_CONVENTION = "1 FLOP = 1 multiply-accumulate; element-wise ops 1 FLOP per element"
DEFAULT_CLIP_SHAPE = (CLIP_LENGTH, FRAME_HEIGHT, FRAME_WIDTH)

_ELEMENTWISE = (nn.BatchNorm2d, BatchNorm2d, nn.BatchNorm1d, nn.ReLU, nn.ReLU6, nn.Sigmoid, nn.Softmax)
_FREE = (nn.Flatten, nn.Identity, nn.Dropout, nn.Sequential, nn.ModuleList, nn.ModuleDict)


class UnsupportedLayerWarning(UserWarning):
    pass


def _leaf_flops(mod: nn.Module, inputs, output) -> int | None:
    if isinstance(mod, nn.Conv2d):
        k = mod.kernel_size[0] * mod.kernel_size[1]
        return output.numel() * (mod.in_channels // mod.groups) * k
    if isinstance(mod, nn.Linear):
        return output.numel() * mod.in_features
    if isinstance(mod, _ELEMENTWISE):
        return output.numel()
    if isinstance(mod, nn.AdaptiveAvgPool2d):
        return inputs[0].numel()
    if isinstance(mod, nn.MaxPool2d):
        ks = mod.kernel_size
        return output.numel() * (ks * ks if isinstance(ks, int) else ks[0] * ks[1])
    if isinstance(mod, _FREE):
        return 0
    return None


def _residual_flops(mod: nn.Module, output) -> int:
    if isinstance(mod, BasicBlock):
        return output.numel()
    if isinstance(mod, InvertedResidual) and mod.use_res_connect:
        return output.numel()
    return 0


def count_module_flops(model: nn.Module, *args, **kwargs) -> tuple[int, dict[str, int]]:
    """Run one forward pass with counting hooks. Returns (total, per-module-type totals)."""
    totals: dict[str, int] = {}
    unsupported: set[str] = set()

    def add(kind: str, n: int) -> None:
        totals[kind] = totals.get(kind, 0) + int(n)

    def hook(mod, hargs, hkwargs, output):
        name = type(mod).__name__
        extra = getattr(mod, "extra_flops", None)
        if extra is None and not any(True for _ in mod.children()):
            n = _leaf_flops(mod, hargs, output)
            if n is None:
                unsupported.add(name)
                n = 0
            add(name, n)
        if extra is not None:
            add(name + ".extra", extra(*hargs, **hkwargs))
        res = _residual_flops(mod, output)
        if res:
            add(name + ".residual", res)

    handles = [m.register_forward_hook(hook, with_kwargs=True) for m in model.modules()]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(*args, **kwargs)
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    for name in sorted(unsupported):
        warnings.warn(f"unsupported layer type {name} counted as zero", UnsupportedLayerWarning)
    return sum(totals.values()), totals


def _model_of(model) -> DMSModel:
    return build_model(model, seed=0) if isinstance(model, ModelSpec) else model


def dummy_inputs(model: DMSModel, input_shape=DEFAULT_CLIP_SHAPE, rng=None) -> dict:
    shape = (1, *input_shape)
    if rng is None:
        return {m: torch.zeros(shape) for m in model.order}
    return {m: torch.from_numpy(rng.standard_normal(shape, dtype=np.float32)) for m in model.order}


def count_flops(model: ModelSpec | DMSModel, input_shape=DEFAULT_CLIP_SHAPE) -> int:
    """FLOPs of one clip through the last-frame path, per the module convention."""
    m = _model_of(model)
    total, _ = count_module_flops(m, dummy_inputs(m, input_shape))
    return total


def measure_latency(
    model: ModelSpec | DMSModel,
    input_shape=DEFAULT_CLIP_SHAPE,
    n_runs: int = 1000,
    warmup: int = 10,
    seed: int = 0,
) -> dict[str, float]:
    """Wall-clock seconds per clip on fresh random inputs; warmup runs are discarded."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if warmup < 0:
        raise ValueError("warmup must be non-negative")
    m = _model_of(model).eval()
    rng = np.random.default_rng(seed)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    times = []
    try:
        with torch.no_grad():
            for i in range(warmup + n_runs):
                x = dummy_inputs(m, input_shape, rng)
                t0 = time.perf_counter()
                m(x)
                dt = time.perf_counter() - t0
                if i >= warmup:
                    times.append(dt)
    finally:
        torch.set_num_threads(threads)
    t = np.asarray(times)
    return {
        "mean": float(t.mean()),
        "p50": float(np.percentile(t, 50)),
        "p95": float(np.percentile(t, 95)),
        "min": float(t.min()),
        "max": float(t.max()),
        "runs": int(t.size),
    }


def realtime_check(stats: Mapping[str, float] | float) -> bool:
    """True iff mean latency <= 16/45 s (inclusive, compared exactly)."""
    mean = stats if isinstance(stats, (int, float, Fraction)) else stats["mean"]
    return Fraction(mean) <= REALTIME_BOUND


def hardware_descriptor() -> dict[str, str]:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "platform": platform.platform(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "threads": "1",
    }


def bench_report(spec: ModelSpec, input_shape=DEFAULT_CLIP_SHAPE, n_runs: int = 1000,
                 warmup: int = 10, seed: int = 0) -> dict:
    model = build_model(spec, seed=seed)
    flops = count_flops(model, input_shape)
    stats = measure_latency(model, input_shape, n_runs, warmup, seed)
    return {
        "model": spec.to_dict(),
        "input_shape": list(input_shape),
        "flops": flops,
        "flops_convention": FLOPS_CONVENTION,
        "latency_stats": stats,
        "realtime": realtime_check(stats),
        "bound": REALTIME_BOUND_TEXT,
        "hardware": hardware_descriptor(),
    }
