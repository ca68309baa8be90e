import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_difference_check
from mmap_st.errors import ConfigError, ShapeError
from mmap_st.globalfusion import (ContextAggregator, EnsembleHeads, LocalGlobalAttention,
                                  aggregate_context, ensemble_predict, local_global_attention,
                                  relative_offsets, stage2_loss)
from mmap_st.protobank import PrototypeSet

D64 = torch.float64


def _t(*v):
    return torch.tensor(v, dtype=D64)


def _protos(P):
    P = np.asarray(P, dtype=np.float64)
    return PrototypeSet(P, np.arange(len(P)), np.ones(len(P)))


def _identity_attention(d, residual=False, norm=False):
    m = LocalGlobalAttention(d, 1, residual=residual, norm=norm).double()
    with torch.no_grad():
        for lin in (m.attn.q, m.attn.k, m.attn.v, m.attn.o):
            lin.weight.copy_(torch.eye(d))
            lin.bias.zero_()
    return m


# -- attention examples ----------------------------------------------------------

def test_single_prototype_returns_it():
    v = [0.4, -2.0, 1.5]
    out = local_global_attention(_t(1, 1, 1), _protos([v]), _identity_attention(3))
    torch.testing.assert_close(out.h, _t(*v), rtol=0, atol=1e-12)
    assert out.weights.shape == (1, 1)


def test_identical_prototypes_return_the_value():
    v = [0.4, -2.0, 1.5]
    out = local_global_attention(_t(3, 0, -1), _protos([v] * 5), _identity_attention(3))
    torch.testing.assert_close(out.h, _t(*v), rtol=0, atol=1e-12)


def test_empty_prototypes_rejected():
    with pytest.raises(ConfigError):
        local_global_attention(_t(1, 0), _protos(np.zeros((0, 2))), _identity_attention(2))


def _layer_norm(x, eps=1e-5):
    mu = x.mean()
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean() + eps)


def test_hand_oracle_d2_l3():
    m = LocalGlobalAttention(2, 1).double()
    Wq = np.array([[1.0, 2.0], [0.0, 1.0]])
    Wk = np.array([[1.0, 0.0], [-1.0, 1.0]])
    Wv = np.array([[0.5, 0.0], [0.0, 2.0]])
    Wo = np.array([[1.0, -1.0], [0.5, 1.0]])
    b = [0.1, -0.1]
    with torch.no_grad():
        for lin, W in ((m.attn.q, Wq), (m.attn.k, Wk), (m.attn.v, Wv), (m.attn.o, Wo)):
            lin.weight.copy_(torch.tensor(W))
            lin.bias.copy_(torch.tensor(b))
    f = np.array([1.0, -0.5])
    P = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    out = local_global_attention(torch.tensor(f), _protos(P), m)

    q, K, V = Wq @ f + b, P @ Wk.T + b, P @ Wv.T + b
    logits = K @ q / math.sqrt(2)
    a = np.exp(logits - logits.max())
    a /= a.sum()
    expected = _layer_norm(f + Wo @ (a @ V) + b)
    np.testing.assert_allclose(out.h.detach().numpy(), expected, atol=1e-12)
    np.testing.assert_allclose(out.weights[0].detach().numpy(), a, atol=1e-12)


# -- aggregation strategies -----------------------------------------------------

def test_mean_and_sum():
    P = _protos([[1, 0], [0, 1]])
    torch.testing.assert_close(aggregate_context(_t(0, 0), P, "mean").h, _t(0.5, 0.5))
    torch.testing.assert_close(aggregate_context(_t(0, 0), P, "sum").h, _t(1, 1))


def test_cross_attn_matches_local_global_attention(rng):
    torch.manual_seed(0)
    agg = ContextAggregator("cross_attn", 4, 2).double()
    f, P = torch.tensor(rng.normal(size=4)), _protos(rng.normal(size=(5, 4)))
    a = aggregate_context(f, P, "cross_attn", agg).h
    b = local_global_attention(f, P, agg.attention).h
    assert torch.equal(a, b)


def test_strategy_errors():
    P = _protos([[1, 0]])
    with pytest.raises(ConfigError):
        aggregate_context(_t(0, 0), P, "cross_attn_pos", ContextAggregator("cross_attn_pos", 2, 1))
    with pytest.raises(ConfigError):
        aggregate_context(_t(0, 0), P, "median")
    with pytest.raises(ConfigError):
        ContextAggregator("median", 2, 1)


def test_masked_prototypes_are_ignored(rng):
    torch.manual_seed(0)
    f = torch.tensor(rng.normal(size=(1, 4)))
    P = torch.tensor(rng.normal(size=(1, 3, 4)))
    padded = torch.cat([P, torch.full((1, 2, 4), 99.0, dtype=D64)], 1)
    mask = torch.tensor([[True, True, True, False, False]])
    for strategy in ("cross_attn", "mean", "sum"):
        agg = ContextAggregator(strategy, 4, 2).double()
        torch.testing.assert_close(agg(f, padded, mask), agg(f, P), rtol=0, atol=1e-12)


def test_relative_offsets():
    off = relative_offsets((30, 40), [[30, 40], [60, 80]], (300, 400))
    np.testing.assert_allclose(off, [[0, 0], [0.06, 0.08]])


# -- invariants -------------------------------------------------------------------

def _instance(seed, d=8, L=6, heads=2, use_pos=False):
    torch.manual_seed(seed)
    m = LocalGlobalAttention(d, heads, use_pos).double()
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(1, d, generator=g, dtype=D64)
    P = torch.randn(1, L, d, generator=g, dtype=D64)
    off = torch.rand(1, L, 2, generator=g, dtype=D64) - 0.5
    perm = torch.randperm(L, generator=g)
    return m, f, P, off, perm


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    m, f, P, off, perm = _instance(seed)
    with torch.no_grad():
        h, _, w = m(f, P, return_weights=True)
        h2 = m(f, P[:, perm])
    torch.testing.assert_close(h2, h, rtol=0, atol=1e-6)
    assert (w >= 0).all()
    torch.testing.assert_close(w.sum(-1), torch.ones_like(w.sum(-1)), rtol=0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_positional_variant_is_invariant_when_offsets_move_along(seed):
    m, f, P, off, perm = _instance(seed, use_pos=True)
    with torch.no_grad():
        torch.testing.assert_close(m(f, P[:, perm], offsets=off[:, perm]), m(f, P, offsets=off),
                                   rtol=0, atol=1e-6)


def test_positional_variant_witness():
    m, f, P, off, _ = _instance(3, use_pos=True)
    perm = torch.tensor([1, 0, 2, 3, 4, 5])
    with torch.no_grad():
        a = m(f, P, offsets=off)
        b = m(f, P[:, perm], offsets=off)
    assert (a - b).abs().max() > 1e-6


# -- ensemble and loss ----------------------------------------------------------------

def _const_heads(d, g, outputs):
    heads = EnsembleHeads(d, g).double()
    with torch.no_grad():
        for lin, y in zip((heads.mlp1, heads.mlp2, heads.mlp3), outputs):
            lin.weight.zero_()
            lin.bias.copy_(torch.tensor(y, dtype=D64))
    return heads


def test_ensemble_examples():
    z = torch.zeros(3, dtype=D64)
    torch.testing.assert_close(ensemble_predict(z, z, z, _const_heads(3, 2, [[1, 1], [2, 2],
                                                                           [3, 3]])), _t(2, 2))
    y = [0.5, -1.0]
    torch.testing.assert_close(ensemble_predict(z, z, z, _const_heads(3, 2, [y] * 3)), _t(*y))
    heads = _const_heads(3, 2, [[0, 0]] * 3)
    r = torch.randn(3, dtype=D64)
    assert torch.equal(ensemble_predict(r, r, r, heads), torch.zeros(2, dtype=D64))
    with pytest.raises(ShapeError):
        ensemble_predict(r, r, torch.zeros(4, dtype=D64), heads)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-10, 10), st.sampled_from(["mlp1", "mlp2", "mlp3"]))
def test_ensemble_linear_in_each_head(seed, c, which):
    torch.manual_seed(seed)
    heads = EnsembleHeads(4, 3).double()
    e2, f, h = torch.randn(3, 4, dtype=D64)
    base = ensemble_predict(e2, f, h, heads)
    lin = getattr(heads, which)
    contrib = lin({"mlp1": e2, "mlp2": f, "mlp3": h}[which])
    with torch.no_grad():
        lin.weight.mul_(c)
        lin.bias.mul_(c)
    scaled = ensemble_predict(e2, f, h, heads)
    torch.testing.assert_close(scaled - base, (c - 1) * contrib / 3, rtol=1e-9, atol=1e-9)


def test_stage2_loss_examples():
    assert stage2_loss(_t(1, 2), _t(1, 2), _t(1, 3), _t(1, 3), 0.3).item() == pytest.approx(
        0, abs=1e-12)
    assert stage2_loss(_t(3, 1), _t(1, 1), _t(1, 0), _t(0, 1), 1.0).item() == pytest.approx(3)
    assert stage2_loss(_t(3, 1), _t(1, 1), _t(1, 0), _t(-1, 0), 0.0).item() == pytest.approx(2)


def stage2_gradient_errors(seed=0, d=4, L=3, g=2, strategy="cross_attn_pos"):
    torch.manual_seed(seed)
    agg = ContextAggregator(strategy, d, 2, pos_hidden=4).double()
    heads = EnsembleHeads(d, g).double()
    gen = torch.Generator().manual_seed(seed)
    e2, f = torch.randn(2, 2, d, generator=gen, dtype=D64)
    P = torch.randn(2, L, d, generator=gen, dtype=D64)
    off = torch.rand(2, L, 2, generator=gen, dtype=D64) - 0.5
    target = torch.randn(2, g, generator=gen, dtype=D64)

    def loss():
        h = agg(f, P, None, off)
        return stage2_loss(ensemble_predict(e2, f, h, heads), target, f, h, 0.3)

    params = {f"aggregator.{k}": p for k, p in agg.named_parameters()}
    params.update({f"heads.{k}": p for k, p in heads.named_parameters()})
    return finite_difference_check(loss, params)


@pytest.mark.parametrize("strategy", ["cross_attn", "cross_attn_pos"])
def test_stage2_gradients(strategy):
    errs = stage2_gradient_errors(strategy=strategy)
    assert max(errs.values()) < 1e-4, errs
