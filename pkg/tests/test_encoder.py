import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from conftest import finite_difference_check
from mmap_st.config import ModelConfig
from mmap_st.encoder import (LoRALinear, PatchEncoder, add_adapters, apply_lowrank_adapter,
                             build_encoder, crop_offsets, encode_tokens, make_multimag_views,
                             normalize_imagenet)
from mmap_st.errors import ConfigError, ShapeError


# -- views ------------------------------------------------------------------

def test_view_sizes_and_offsets(rng):
    patch = rng.random((112, 112, 3))
    v = make_multimag_views(patch, "center")
    assert v.view0.shape == v.view1.shape == v.view2.shape == (112, 112, 3)
    assert v.crop_offsets == ((28, 28), (42, 42))
    np.testing.assert_allclose(v.view0, patch)


@pytest.mark.parametrize("mode", ["center", "random"])
def test_constant_patch_gives_constant_views(mode):
    patch = np.full((32, 32, 3), 0.37)
    v = make_multimag_views(patch, mode, np.random.default_rng(0))
    for view in (v.view0, v.view1, v.view2):
        np.testing.assert_allclose(view, 0.37, atol=1e-12)


def test_center_views_are_deterministic(rng):
    patch = rng.random((16, 16, 3))
    a, b = make_multimag_views(patch, "center"), make_multimag_views(patch, "center")
    assert a.crop_offsets == b.crop_offsets
    np.testing.assert_array_equal(a.view1, b.view1)
    np.testing.assert_array_equal(a.view2, b.view2)


def test_center_crop_with_integer_scale_is_nearest_block():
    # a p/4 crop upsampled x4 bilinearly keeps the crop's mean
    patch = np.random.default_rng(3).random((16, 16, 3))
    v = make_multimag_views(patch, "center")
    np.testing.assert_allclose(v.view2.mean((0, 1)), patch[6:10, 6:10].mean((0, 1)), atol=0.05)


def test_views_reject_bad_sizes():
    with pytest.raises(ConfigError):
        make_multimag_views(np.zeros((18, 18, 3)), "center")
    with pytest.raises(ShapeError):
        make_multimag_views(np.zeros((16, 12, 3)), "center")
    with pytest.raises(ConfigError):
        crop_offsets(16, "sideways")


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([4, 8, 16, 32, 112]), st.integers(0, 2 ** 32 - 1))
def test_random_offsets_in_bounds(p, seed):
    offs = crop_offsets(p, "random", np.random.default_rng(seed))
    for (r, c), sub in zip(offs, (p // 2, p // 4)):
        assert 0 <= r <= p - sub and 0 <= c <= p - sub


def test_imagenet_normalization():
    x = torch.tensor([0.485, 0.456, 0.406], dtype=torch.float64).view(3, 1, 1).expand(3, 2, 2)
    assert torch.allclose(normalize_imagenet(x), torch.zeros(3, 2, 2, dtype=torch.float64))


# -- encoder ----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_encoder():
    torch.manual_seed(0)
    return build_encoder(ModelConfig()).eval()


def test_token_shape(toy_encoder):
    view = normalize_imagenet(torch.rand(3, 112, 112))
    for mag in ("x5", "x10", "x20"):
        seq = encode_tokens(view, toy_encoder, mag)
        assert seq.tokens.shape == (50, 128)
        assert seq.cls.shape == (128,)


def test_encoding_is_deterministic(toy_encoder):
    view = np.random.default_rng(0).random((112, 112, 3)).astype(np.float32)
    with torch.no_grad():
        a = encode_tokens(view, toy_encoder).tokens
        b = encode_tokens(view, toy_encoder).tokens
    assert torch.equal(a, b)


def test_zero_view_is_finite(toy_encoder):
    with torch.no_grad():
        out = encode_tokens(torch.zeros(3, 112, 112), toy_encoder).tokens
    assert torch.isfinite(out).all()


def test_encoder_shape_errors(toy_encoder):
    with pytest.raises(ShapeError):
        toy_encoder(torch.zeros(1, 3, 64, 64))
    with pytest.raises(ShapeError):
        encode_tokens(torch.zeros(2, 3, 112, 112), toy_encoder)
    with pytest.raises(ConfigError):
        PatchEncoder(input_size=100, vit_patch=16)


def test_encoder_gradients_match_finite_differences():
    torch.manual_seed(1)
    enc = PatchEncoder(16, 8, 8, depth=1, heads=2, mlp_ratio=1.0).double()
    x = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    w = torch.randn(5, 8, dtype=torch.float64)
    params = dict(enc.named_parameters())
    errs = finite_difference_check(lambda: (enc(x)[0] * w).sum(), params)
    assert max(errs.values()) < 1e-4, errs


def test_frozen_encoder_unchanged_by_step():
    torch.manual_seed(2)
    enc = PatchEncoder(16, 8, 8, depth=1, heads=2)
    head = nn.Linear(8, 1)
    for p in enc.parameters():
        p.requires_grad_(False)
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    opt = torch.optim.Adam([p for p in list(enc.parameters()) + list(head.parameters())
                            if p.requires_grad], lr=0.1)
    loss = head(enc(torch.randn(2, 3, 16, 16))[:, 0]).pow(2).sum()
    loss.backward()
    opt.step()
    for k, v in enc.state_dict().items():
        assert torch.equal(v, before[k]), k


# -- low-rank adapters ------------------------------------------------------

def test_fresh_adapter_is_identity():
    torch.manual_seed(0)
    base = nn.Linear(6, 4)
    ad = apply_lowrank_adapter(base, 2, alpha=3.0)
    x = torch.randn(5, 6)
    assert torch.equal(ad(x), base(x))


@pytest.mark.parametrize("r, d_in, d_out", [(1, 6, 4), (3, 8, 5), (4, 4, 4)])
def test_adapter_parameter_count(r, d_in, d_out):
    ad = apply_lowrank_adapter(nn.Linear(d_in, d_out), r)
    assert ad.n_trainable() == r * (d_in + d_out)
    assert sum(p.numel() for p in ad.parameters() if p.requires_grad) == r * (d_in + d_out)


def test_adapter_rank_bounds():
    with pytest.raises(ConfigError):
        apply_lowrank_adapter(nn.Linear(6, 4), 0)
    with pytest.raises(ConfigError):
        apply_lowrank_adapter(nn.Linear(6, 4), 5)


def test_merged_adapter_matches():
    torch.manual_seed(0)
    ad = LoRALinear(nn.Linear(7, 5).double(), 3, alpha=2.0)
    with torch.no_grad():
        ad.lora_B.normal_()
    x = torch.randn(4, 7, dtype=torch.float64)
    merged = ad.merge()
    expected = x @ (ad.base.weight + (2.0 / 3) * ad.lora_B @ ad.lora_A).T + ad.base.bias
    torch.testing.assert_close(merged(x), ad(x), rtol=1e-6, atol=0)
    torch.testing.assert_close(ad(x), expected, rtol=1e-12, atol=1e-12)


def test_add_adapters_freezes_base():
    enc = PatchEncoder(16, 8, 8, depth=1, heads=2)
    add_adapters(enc, 2)
    trainable = [n for n, p in enc.named_parameters() if p.requires_grad]
    assert trainable and all("lora_" in n for n in trainable)
