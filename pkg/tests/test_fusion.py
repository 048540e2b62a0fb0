import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from dmskit.fusion import (
    AFF, IAFF, MSCAM, MsCamConfig, MultiHeadMSCAM, aff_fuse, apply_channel_attention, decision_fuse, iaff_fuse,
    multihead_mscam_weights,
)

C, R, B, H, W = 8, 4, 2, 5, 6


def rand(*shape, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


def prepared(block, seed=0):
    rng = np.random.default_rng(seed)
    oracles.randomize_bn_stats(block, rng)
    return block.double().eval()


# --- config ---------------------------------------------------------------------


def test_config_rejects_indivisible_channels():
    with pytest.raises(ValueError, match="divisible"):
        MsCamConfig(10, 4)


@pytest.mark.parametrize("kwargs", [dict(channels=0), dict(channels=4, reduction_ratio=0), dict(channels=4, heads=0)])
def test_config_rejects_non_positive(kwargs):
    with pytest.raises(ValueError):
        MsCamConfig(**kwargs)


# --- single head ----------------------------------------------------------------


def test_zero_input_with_zero_biases_gives_half():
    block = MSCAM(C, R).eval()
    with torch.no_grad():
        for m in block.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.bias.zero_()
            if isinstance(m, torch.nn.BatchNorm2d):
                m.bias.zero_()
    w = block.weights(torch.zeros(B, C, H, W))
    assert torch.allclose(w, torch.full_like(w, 0.5))


def test_single_head_weights_in_open_unit_interval():
    w = MSCAM(C, R).eval().weights(rand(B, C, H, W))
    assert w.shape == (B, C, H, W)
    assert torch.all(w > 0) and torch.all(w < 1)


def test_single_head_matches_naive_oracle():
    block = prepared(MSCAM(C, R))
    x = rand(B, C, H, W, dtype=torch.float64)
    got = block.weights(x).detach().numpy()
    np.testing.assert_allclose(got, oracles.mscam_weights(x.numpy(), block), atol=1e-6)
    np.testing.assert_allclose(block(x).detach().numpy(), x.numpy() * got, atol=1e-12)


def test_single_head_channel_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        MSCAM(C, R).weights(rand(B, C + 4, H, W))


def test_single_head_batch_of_one_in_training_mode():
    w = MSCAM(C, R).train().weights(rand(1, C, H, W))
    assert torch.all(torch.isfinite(w))


# --- apply_channel_attention ----------------------------------------------------


def test_attention_identities():
    f = rand(B, C, H, W)
    assert torch.equal(apply_channel_attention(f, torch.ones_like(f)), f)
    assert torch.equal(apply_channel_attention(f, torch.zeros_like(f)), torch.zeros_like(f))
    out = apply_channel_attention(torch.full((1, 2, 2, 2), 2.0), torch.full((1, 2, 2, 2), 0.25))
    assert torch.all(out == 0.5)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        apply_channel_attention(rand(B, C, H, W), rand(B, C, H, W + 1))


# --- multi head -----------------------------------------------------------------


def test_multihead_matches_naive_oracle():
    block = prepared(MultiHeadMSCAM(C, 4, R))
    feats = [rand(B, C, H, W, seed=i, dtype=torch.float64) for i in range(4)]
    got = np.stack([w.detach().numpy() for w in multihead_mscam_weights(feats, block)])
    np.testing.assert_allclose(got, oracles.multihead_weights([f.numpy() for f in feats], block), atol=1e-6)


def test_multihead_symmetric_identical_inputs_are_uniform():
    block = MultiHeadMSCAM(C, 4, R).eval()
    block.symmetric_init_()
    f = rand(B, C, H, W)
    w = block([f, f, f, f])
    assert torch.allclose(w, torch.full_like(w, 0.25), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 4))
def test_multihead_weights_on_simplex(seed, b, hw):
    torch.manual_seed(seed)
    block = MultiHeadMSCAM(C, 4, R).train()
    feats = [torch.randn(b, C, hw, hw) * 3 for _ in range(4)]
    w = block(feats)
    assert torch.all(w >= 0)
    assert torch.allclose(w.sum(0), torch.ones(b, C, hw, hw), atol=1e-5)


def test_multihead_permutation_equivariance():
    block = prepared(MultiHeadMSCAM(C, 4, R))
    feats = [rand(B, C, H, W, seed=i, dtype=torch.float64) for i in range(4)]
    perm = [2, 0, 3, 1]
    w = block(feats)
    permuted = prepared(MultiHeadMSCAM(C, 4, R))
    permuted.load_state_dict(block.state_dict())
    for dst, src in enumerate(perm):
        permuted.projections[dst].load_state_dict(block.projections[src].state_dict())
    w_perm = permuted([feats[i] for i in perm])
    for dst, src in enumerate(perm):
        assert torch.allclose(w_perm[dst], w[src], atol=1e-12)


def test_multihead_wrong_input_count_and_shape():
    block = MultiHeadMSCAM(C, 4, R)
    with pytest.raises(ValueError, match="expected 4"):
        block([rand(B, C, H, W)] * 3)
    with pytest.raises(ValueError, match="shape mismatch"):
        block([rand(B, C, H, W)] * 3 + [rand(B, C, H, W + 1)])


# --- AFF / IAFF -----------------------------------------------------------------


@pytest.mark.parametrize("cls,oracle,fuse", [(AFF, oracles.aff, aff_fuse), (IAFF, oracles.iaff, iaff_fuse)])
def test_fusion_matches_naive_oracle(cls, oracle, fuse):
    block = prepared(cls(C, 4, R))
    feats = [rand(B, C, H, W, seed=10 + i, dtype=torch.float64) for i in range(4)]
    got = fuse(feats, block).detach().numpy()
    np.testing.assert_allclose(got, oracle([f.numpy() for f in feats], block), atol=1e-6)


@pytest.mark.parametrize("cls,fuse", [(AFF, aff_fuse), (IAFF, iaff_fuse)])
def test_fusion_identical_inputs_symmetric_init_is_identity(cls, fuse):
    block = cls(C, 4, R).eval()
    block.symmetric_init_()
    f = rand(B, C, H, W)
    assert torch.allclose(fuse([f, f, f, f], block), f, atol=1e-6)


def test_aff_with_forced_uniform_weights_is_the_mean():
    block = AFF(C, 4, R).eval()
    with torch.no_grad():
        for proj in block.attention.projections:
            proj[-1].weight.zero_()
            proj[-1].bias.zero_()
    feats = [rand(B, C, H, W, seed=i) for i in range(4)]
    assert torch.allclose(aff_fuse(feats, block), torch.stack(feats).mean(0), atol=1e-6)


@pytest.mark.parametrize("cls", [AFF, IAFF])
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_fusion_is_a_convex_combination(cls, seed):
    torch.manual_seed(seed)
    block = cls(C, 4, R).eval()
    feats = [torch.randn(B, C, 3, 3) * 5 for _ in range(4)]
    out = block(feats)
    stack = torch.stack(feats)
    assert torch.all(out >= stack.min(0).values - 1e-6)
    assert torch.all(out <= stack.max(0).values + 1e-6)


@pytest.mark.parametrize("cls", [AFF, IAFF])
def test_fusion_preserves_shape(cls):
    feats = [rand(3, C, 4, 7, seed=i) for i in range(4)]
    assert cls(C, 4, R)(feats).shape == (3, C, 4, 7)


def test_two_input_fusion_works():
    feats = [rand(B, C, H, W, seed=i) for i in range(2)]
    assert AFF(C, 2, R)(feats).shape == (B, C, H, W)


# --- gradients ------------------------------------------------------------------

GRAD_C, GRAD_R, GRAD_B, GRAD_HW = 4, 2, 8, 3


def _grad_case(make, n_inputs, seed):
    torch.manual_seed(seed)
    block = make().double().train()
    inputs = [torch.randn(GRAD_B, GRAD_C, GRAD_HW, GRAD_HW, dtype=torch.float64, requires_grad=True)
              for _ in range(n_inputs)]
    probe = torch.randn(GRAD_B, GRAD_C, GRAD_HW, GRAD_HW, dtype=torch.float64)

    def objective():
        out = block(inputs if n_inputs > 1 else inputs[0])
        return (out * probe).sum()

    tensors = inputs + list(block.parameters())
    analytic = torch.autograd.grad(objective(), tensors)
    with torch.no_grad():
        numeric = oracles.central_difference(objective, tensors)
    return oracles.max_relative_error(analytic, numeric)


@pytest.mark.parametrize(
    "name,make,n_inputs",
    [
        ("mscam", lambda: MSCAM(GRAD_C, GRAD_R), 1),
        ("aff", lambda: AFF(GRAD_C, 4, GRAD_R), 4),
        ("iaff", lambda: IAFF(GRAD_C, 4, GRAD_R), 4),
    ],
)
def test_fusion_gradients_match_central_differences(name, make, n_inputs):
    assert _grad_case(make, n_inputs, seed=3) < 1e-4


def test_multihead_weight_gradients_match_central_differences():
    torch.manual_seed(5)
    block = MultiHeadMSCAM(GRAD_C, 4, GRAD_R).double().train()
    inputs = [torch.randn(GRAD_B, GRAD_C, GRAD_HW, GRAD_HW, dtype=torch.float64, requires_grad=True)
              for _ in range(4)]
    probe = torch.randn(4, GRAD_B, GRAD_C, GRAD_HW, GRAD_HW, dtype=torch.float64)

    def objective():
        return (block(inputs) * probe).sum()

    tensors = inputs + list(block.parameters())
    analytic = torch.autograd.grad(objective(), tensors)
    with torch.no_grad():
        numeric = oracles.central_difference(objective, tensors)
    assert oracles.max_relative_error(analytic, numeric) < 1e-4


# --- decision fusion ------------------------------------------------------------


def test_decision_fuse_examples():
    s = torch.softmax(rand(7), 0)
    assert torch.allclose(decision_fuse([s] * 4), s)
    eye = torch.eye(7)
    out = decision_fuse([eye[0], eye[2], eye[4], eye[6]])
    assert torch.allclose(out, torch.tensor([0.25, 0, 0.25, 0, 0.25, 0, 0.25]))
    a, b = torch.full((7,), 0.8), torch.full((7,), 0.4)
    assert torch.allclose(decision_fuse([a, b, a, b]), torch.full((7,), 0.6))


@given(st.floats(-10, 10, allow_nan=False), st.integers(0, 1000))
def test_decision_fuse_is_linear(a, seed):
    scores = [rand(7, seed=seed + i, dtype=torch.float64) for i in range(4)]
    assert torch.allclose(decision_fuse([a * s for s in scores]), a * decision_fuse(scores), atol=1e-9)


@pytest.mark.parametrize("n", [1, 5])
def test_decision_fuse_count_errors(n):
    with pytest.raises(ValueError):
        decision_fuse([torch.zeros(7)] * n)


def test_decision_fuse_length_error():
    with pytest.raises(ValueError):
        decision_fuse([torch.zeros(6)] * 4)
