"""Phase 1: fuse x5/x10/x20 token sequences into one patch feature."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoder import Block, build_encoder
from .errors import ShapeError

EPS = 1e-8


@dataclass
class FusedFeature:
    f: torch.Tensor
    source_cls: torch.Tensor  # 3 x d: e0, e1, e2


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def cosine(a, b, eps=EPS):
    a, b = _t(a), _t(b)
    denom = torch.clamp(a.norm(dim=-1) * b.norm(dim=-1), min=eps)
    return (a * b).sum(-1) / denom


def magnification_alignment_loss(f, e0, eps=EPS):
    """``1 - cos(f, e0)`` with the norm product floored at ``eps``; batched over leading dims."""
    return 1.0 - cosine(f, e0, eps)


def assemble_sequence(seq0, seq1, seq2):
    """[cls of x5; patch tokens of x10; patch tokens of x20] -> B x (1 + 2 tau) x d."""
    if seq0.shape != seq1.shape or seq0.shape != seq2.shape:
        raise ShapeError(f"token sequences disagree: {tuple(seq0.shape)}, "
                         f"{tuple(seq1.shape)}, {tuple(seq2.shape)}")
    return torch.cat([seq0[:, :1], seq1[:, 1:], seq2[:, 1:]], dim=1)


class MagnificationFusion(nn.Module):
    """Self-attention over the assembled sequence without positional encoding."""

    def __init__(self, dim, heads=4, layers=2, mlp_ratio=2.0):
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, seq0, seq1, seq2, return_all=False):
        squeeze = seq0.ndim == 2
        if squeeze:
            seq0, seq1, seq2 = seq0[None], seq1[None], seq2[None]
        if seq0.shape[-1] != self.dim:
            raise ShapeError(f"token dim {seq0.shape[-1]} != fusion dim {self.dim}")
        x = assemble_sequence(seq0, seq1, seq2)
        weights = []
        for blk in self.blocks:
            x, w = blk(x)
            weights.append(w)
        x = self.norm(x)
        f = x[:, 0]
        if squeeze:
            f, x = f[0], x[0]
        if return_all:
            return f, x, weights
        return f


def fuse_magnifications(seq0, seq1, seq2, fusion):
    """TokenSequence triple -> :class:`FusedFeature`."""
    f = fusion(seq0.tokens, seq1.tokens, seq2.tokens)
    cls = torch.stack([seq0.tokens[0], seq1.tokens[0], seq2.tokens[0]])
    return FusedFeature(f, cls)


def stage1_predict(f, head):
    if f.shape[-1] != head.in_features:
        raise ShapeError(f"feature length {f.shape[-1]} != head input {head.in_features}")
    return head(f)


def stage1_loss_terms(pred, target, f, e0, gamma1):
    """Returns ``(total, mse_term, alignment_term)``, each averaged over the batch."""
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    l_ge = ((pred - target) ** 2).mean(-1).mean()
    l_mag = magnification_alignment_loss(f, e0).mean()
    return l_ge + gamma1 * l_mag, l_ge, l_mag


def stage1_loss(pred, target, f, e0, gamma1):
    return stage1_loss_terms(pred, target, f, e0, gamma1)[0]


class Phase1Model(nn.Module):
    """Shared encoder over three magnifications, fusion, and the linear stage-1 head."""

    def __init__(self, model_cfg, n_genes):
        super().__init__()
        self.encoder = build_encoder(model_cfg)
        self.fusion = MagnificationFusion(model_cfg.dim, model_cfg.fusion_heads,
                                          model_cfg.fusion_layers, model_cfg.mlp_ratio)
        self.head = nn.Linear(model_cfg.dim, n_genes)

    def forward(self, views):
        """views: B x 3 x 3 x S x S normalized images (magnification-major)."""
        b = views.shape[0]
        tokens = self.encoder(views.flatten(0, 1)).view(b, 3, -1, self.encoder.dim)
        seq0, seq1, seq2 = tokens[:, 0], tokens[:, 1], tokens[:, 2]
        f = self.fusion(seq0, seq1, seq2)
        return {
            "f": f,
            "e0": seq0[:, 0],
            "e1": seq1[:, 0],
            "e2": seq2[:, 0],
            "pred": stage1_predict(f, self.head),
        }
