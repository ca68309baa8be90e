"""Phase 2: prototype-aware enrichment and the three-head ensemble."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import Attention
from .errors import ConfigError, ShapeError
from .magfusion import _t, magnification_alignment_loss

STRATEGIES = ("cross_attn", "cross_attn_pos", "mean", "sum")


@dataclass
class EnrichedFeature:
    h: torch.Tensor
    weights: torch.Tensor = None  # heads x L attention weights when attention is used


class LocalGlobalAttention(nn.Module):
    """Single-query cross-attention: the patch feature attends over its prototypes.

    ``h = LN(f + attn(f, protos))``; ``residual``/``norm`` can be switched off
    to inspect the raw attention output. With ``use_pos`` a two-layer perceptron
    maps each normalized (dx, dy) offset to a per-head additive logit.
    """

    def __init__(self, dim, heads=4, use_pos=False, pos_hidden=16, residual=True, norm=True):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.residual = residual
        self.norm = nn.LayerNorm(dim) if norm else nn.Identity()
        self.use_pos = use_pos
        if use_pos:
            self.pos = nn.Sequential(nn.Linear(2, pos_hidden), nn.Tanh(),
                                     nn.Linear(pos_hidden, heads))

    def forward(self, f, protos, mask=None, offsets=None, return_weights=False):
        """f: B x d; protos: B x L x d; mask: B x L (True = valid); offsets: B x L x 2."""
        if protos.shape[1] == 0:
            raise ConfigError("empty prototype set")
        bias = None
        if self.use_pos:
            if offsets is None:
                raise ConfigError("positional strategy needs centroid offsets")
            bias = self.pos(offsets).permute(0, 2, 1)[:, :, None, :]
        out, w = self.attn(f[:, None], protos, bias, mask)
        a = out[:, 0]
        h = self.norm(f + a if self.residual else a)
        if return_weights:
            return h, a, w[:, :, 0]
        return h


class ContextAggregator(nn.Module):
    """Dispatch over the aggregation strategies (attention, with positions, mean, sum)."""

    def __init__(self, strategy, dim, heads=4, pos_hidden=16):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown aggregation strategy {strategy!r}")
        self.strategy = strategy
        if strategy.startswith("cross_attn"):
            self.attention = LocalGlobalAttention(dim, heads, strategy == "cross_attn_pos",
                                                  pos_hidden)

    def forward(self, f, protos, mask=None, offsets=None):
        if protos.shape[1] == 0:
            raise ConfigError("empty prototype set")
        if self.strategy.startswith("cross_attn"):
            return self.attention(f, protos, mask, offsets)
        if mask is None:
            mask = torch.ones(protos.shape[:2], dtype=torch.bool)
        m = mask.to(protos.dtype)[..., None]
        total = (protos * m).sum(1)
        if self.strategy == "sum":
            return f + total
        return f + total / m.sum(1).clamp(min=1.0)


def relative_offsets(patch_center, centroid_centers, image_hw):
    """(centroid center - patch center) divided by the slide diagonal."""
    diag = float(np.hypot(*image_hw)) if image_hw and min(image_hw) > 0 else 1.0
    pc = np.asarray(patch_center, dtype=np.float64)
    cc = np.asarray(centroid_centers, dtype=np.float64)
    return (cc - pc[..., None, :]) / diag


def local_global_attention(f, protos, module):
    """Single-sample wrapper: ``protos`` is a :class:`PrototypeSet`."""
    f = _t(f)
    P = torch.as_tensor(np.asarray(protos.prototypes), dtype=f.dtype)
    if P.shape[0] == 0:
        raise ConfigError("empty prototype set")
    h, _, w = module(f[None], P[None], return_weights=True)
    return EnrichedFeature(h[0], w[0])


def aggregate_context(f, protos, strategy, aggregator=None, centers=None):
    """Enrich ``f`` with a :class:`PrototypeSet`.

    ``centers`` is ``(patch_center, centroid_centers_of_the_L_prototypes, image_hw)``
    and is required for ``cross_attn_pos``.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown aggregation strategy {strategy!r}")
    f = _t(f)
    P = torch.as_tensor(np.asarray(protos.prototypes), dtype=f.dtype)
    if P.shape[0] == 0:
        raise ConfigError("empty prototype set")
    if strategy == "cross_attn_pos" and centers is None:
        raise ConfigError("cross_attn_pos needs patch and centroid centers")
    if strategy in ("mean", "sum"):
        return EnrichedFeature(f + (P.mean(0) if strategy == "mean" else P.sum(0)))
    if aggregator is None or aggregator.strategy != strategy:
        raise ConfigError(f"an aggregator built for {strategy!r} is required")
    offsets = None
    if strategy == "cross_attn_pos":
        pc, cc, hw = centers
        offsets = torch.as_tensor(relative_offsets(pc, cc, hw), dtype=f.dtype)[None]
    h, _, w = aggregator.attention(f[None], P[None], None, offsets, return_weights=True)
    return EnrichedFeature(h[0], w[0])


class EnsembleHeads(nn.Module):
    """Three linear heads on the x20 class token, the fused feature and the enriched feature."""

    def __init__(self, dim, n_genes):
        super().__init__()
        self.mlp1 = nn.Linear(dim, n_genes)
        self.mlp2 = nn.Linear(dim, n_genes)
        self.mlp3 = nn.Linear(dim, n_genes)

    def forward(self, e2, f, h):
        return (self.mlp1(e2) + self.mlp2(f) + self.mlp3(h)) / 3.0


def ensemble_predict(e2, f, h, heads):
    d = heads.mlp1.in_features
    for name, v in (("e2", e2), ("f", f), ("h", h)):
        if v.shape[-1] != d:
            raise ShapeError(f"{name} has length {v.shape[-1]}, heads expect {d}")
    return heads(e2, f, h)


def stage2_loss_terms(pred, target, f, h, gamma2):
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    l_ge = ((pred - target) ** 2).mean(-1).mean()
    l_mag = magnification_alignment_loss(f, h).mean()
    return l_ge + gamma2 * l_mag, l_ge, l_mag


def stage2_loss(pred, target, f, h, gamma2):
    """Mean squared error over genes plus ``gamma2 * (1 - cos(f, h))``."""
    return stage2_loss_terms(pred, target, f, h, gamma2)[0]


class Phase2Model(nn.Module):
    def __init__(self, model_cfg, n_genes, strategy="cross_attn"):
        super().__init__()
        if model_cfg.mlp1_input not in ("e2", "e0"):
            raise ConfigError(f"mlp1_input must be 'e2' or 'e0', got {model_cfg.mlp1_input!r}")
        self.mlp1_input = model_cfg.mlp1_input
        self.aggregator = ContextAggregator(strategy, model_cfg.dim, model_cfg.global_heads,
                                            model_cfg.pos_hidden)
        self.heads = EnsembleHeads(model_cfg.dim, n_genes)

    def forward(self, phase1_out, protos, mask, offsets=None):
        f = phase1_out["f"]
        h = self.aggregator(f, protos, mask, offsets)
        e = phase1_out["e2"] if self.mlp1_input == "e2" else phase1_out["e0"]
        return {"h": h, "pred": ensemble_predict(e, f, h, self.heads)}
