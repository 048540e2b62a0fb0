from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from dmskit.bench import (
    REALTIME_BOUND, UnsupportedLayerWarning, bench_report, count_flops, count_module_flops, dummy_inputs,
    measure_latency, realtime_check,
)
from dmskit.core import Modality
from dmskit.models import Encoder, EncoderSpec, ModelSpec, build_model

ALL = list(Modality)
TINY = ModelSpec.single("unimodal", ["top_ir"], "tiny-cnn")


def test_realtime_bound_examples():
    assert REALTIME_BOUND == Fraction(16, 45)
    assert realtime_check({"mean": 0.0148})
    assert not realtime_check({"mean": 0.4246})
    assert realtime_check(Fraction(16, 45))
    assert not realtime_check(Fraction(16, 45) + Fraction(1, 10**12))
    assert realtime_check(0.3555) and not realtime_check(0.3556)


@pytest.mark.parametrize("arch,target,tol", [("residual18", 1.38e9, 0.10), ("inverted-residual-mobile-v2", 243.41e6, 0.15)])
def test_unimodal_flops_near_reference_counts(arch, target, tol):
    n = count_flops(ModelSpec.single("unimodal", ["top_ir"], arch))
    assert abs(n - target) <= tol * target


def test_four_modality_feature_fusion_overhead_small():
    uni = count_flops(TINY)
    fused = count_flops(ModelSpec.single("feature_fusion", ALL, "tiny-cnn"))
    # the tiny encoder is narrow, so fusion overhead is relatively larger; both bounds stay loose
    assert 3.9 * uni <= fused <= 4.2 * uni


def test_decision_fusion_is_n_unimodal_plus_averaging():
    uni = count_flops(TINY)
    for n in (2, 3, 4):
        dec = count_flops(ModelSpec.single("decision_fusion", ALL[:n], "tiny-cnn"))
        assert 0 <= dec - n * uni <= 100


def test_counts_ignore_parameter_values():
    model = build_model(TINY, seed=0)
    before = count_flops(model)
    with torch.no_grad():
        for p in model.parameters():
            p.normal_()
    assert count_flops(model) == before


def test_counts_add_over_sequential_children():
    enc = Encoder(EncoderSpec("tiny-cnn"))
    x = torch.zeros(1, 1, 64, 80)
    whole, _ = count_module_flops(enc.body, x)
    parts = 0
    for child in enc.body.children():
        n, _ = count_module_flops(child, x)
        parts += n
        with torch.no_grad():
            x = child.eval()(x)
    assert whole == parts


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6))
def test_doubling_area_doubles_convolution_count(h16, w16):
    # encoder convolutions only: the globally pooled attention branch has a size-independent cost
    enc = Encoder(EncoderSpec("tiny-cnn"))
    h, w = 16 * h16, 16 * w16
    _, small = count_module_flops(enc, torch.zeros(1, 1, h, w))
    _, big = count_module_flops(enc, torch.zeros(1, 1, 2 * h, w))
    assert big["Conv2d"] == 2 * small["Conv2d"]


def test_doubling_area_with_padding_rounding():
    enc = Encoder(EncoderSpec("tiny-cnn"))
    _, small = count_module_flops(enc, torch.zeros(1, 1, 171, 224))
    _, big = count_module_flops(enc, torch.zeros(1, 1, 342, 224))
    assert big["Conv2d"] / small["Conv2d"] == pytest.approx(2, rel=0.1)


def test_unsupported_layer_warns_and_counts_zero():
    net = nn.Sequential(nn.Conv2d(1, 2, 1), nn.Tanh())
    with pytest.warns(UnsupportedLayerWarning, match="Tanh"):
        total, parts = count_module_flops(net, torch.zeros(1, 1, 4, 4))
    assert total == 2 * 16 and parts["Tanh"] == 0


def test_latency_harness():
    with pytest.raises(ValueError):
        measure_latency(TINY, n_runs=0)
    stats = measure_latency(TINY, (16, 64, 64), n_runs=4, warmup=1)
    assert stats["runs"] == 4 and stats["mean"] >= stats["min"] and stats["p95"] <= stats["max"]


def test_random_inputs_repeat_for_a_seed():
    model = build_model(TINY)
    a = dummy_inputs(model, (16, 8, 8), np.random.default_rng(3))
    b = dummy_inputs(model, (16, 8, 8), np.random.default_rng(3))
    assert torch.equal(a[Modality.TOP_IR], b[Modality.TOP_IR])
    assert a[Modality.TOP_IR].shape == (1, 16, 8, 8)


def test_bench_report_schema():
    rep = bench_report(TINY, (16, 64, 64), n_runs=2, warmup=0)
    assert set(rep) >= {"model", "input_shape", "flops", "latency_stats", "realtime", "bound", "hardware"}
    assert rep["bound"] == "16/45 s" and rep["input_shape"] == [16, 64, 64]
    assert rep["realtime"] is True
