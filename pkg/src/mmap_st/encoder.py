"""Multi-magnification views and the patch token encoder.

The encoder is a small vision transformer standing in for a pretrained
pathology backbone; anything producing ``(tau + 1) x d`` tokens with a leading
class token can replace it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MAGNIFICATIONS = ("x5", "x10", "x20")


@dataclass
class MultiMagViews:
    view0: np.ndarray
    view1: np.ndarray
    view2: np.ndarray
    crop_offsets: tuple  # ((row, col) of the p/2 crop, (row, col) of the p/4 crop)


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (tau + 1) x d, row 0 is the class token
    magnification: str

    @property
    def cls(self):
        return self.tokens[0]


def crop_offsets(p, mode, rng=None):
    """Origins of the ``p/2`` and ``p/4`` sub-patches."""
    if p % 4:
        raise ConfigError(f"patch size {p} is not divisible by 4")
    offsets = []
    for sub in (p // 2, p // 4):
        if mode == "center":
            o = (p - sub) // 2
            offsets.append((o, o))
        elif mode == "random":
            if rng is None:
                raise ConfigError("random crops need an rng")
            r, c = rng.integers(0, p - sub + 1, size=2)
            offsets.append((int(r), int(c)))
        else:
            raise ConfigError(f"unknown crop mode {mode!r}")
    return tuple(offsets)


def views_from_offsets(patches, offsets, size=None):
    """Batched view construction.

    patches: B x p x p x 3 float tensor; offsets: B x 2 x 2 ints.
    Returns B x 3 x 3 x size x size (magnification, channel, row, col).
    """
    b, p = patches.shape[0], patches.shape[1]
    size = size or p
    x = patches.permute(0, 3, 1, 2)
    out = [F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
           if size != p else x]
    offsets = np.asarray(offsets, dtype=np.int64).reshape(b, 2, 2)
    for level, sub in enumerate((p // 2, p // 4)):
        crops = torch.stack([x[i, :, r:r + sub, c:c + sub]
                             for i, (r, c) in enumerate(offsets[:, level])])
        out.append(F.interpolate(crops, size=(size, size), mode="bilinear",
                                 align_corners=False))
    return torch.stack(out, dim=1)


def make_multimag_views(patch, mode="center", rng=None, size=None):
    """Whole patch plus ``p/2`` and ``p/4`` crops, all resized to ``p x p`` (or ``size``)."""
    patch = np.asarray(patch)
    p = patch.shape[0]
    if patch.ndim != 3 or patch.shape[1] != p or patch.shape[2] != 3:
        raise ShapeError(f"expected a square p x p x 3 patch, got {patch.shape}")
    offs = crop_offsets(p, mode, rng)
    t = torch.as_tensor(patch.astype(np.float64 if patch.dtype == np.float64 else np.float32))
    views = views_from_offsets(t[None], [offs], size)[0].permute(0, 2, 3, 1).numpy()
    return MultiMagViews(views[0], views[1], views[2], offs)


def normalize_imagenet(x):
    """Normalize ``... x 3 x H x W`` tensors in [0, 1] with ImageNet statistics."""
    mean = torch.tensor(IMAGENET_MEAN, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=x.dtype).view(3, 1, 1)
    return (x - mean) / std


class LoRALinear(nn.Module):
    """Linear map with a low-rank update ``W + (alpha / rank) B A``."""

    def __init__(self, base, rank, alpha=1.0, freeze_base=True):
        super().__init__()
        d_out, d_in = base.weight.shape
        if not 1 <= rank <= min(d_in, d_out):
            raise ConfigError(f"rank {rank} outside [1, {min(d_in, d_out)}]")
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, d_in, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        if freeze_base:
            for p in self.base.parameters():
                p.requires_grad_(False)

    def forward(self, x):
        return self.base(x) + F.linear(F.linear(x, self.lora_A), self.lora_B) * self.scaling

    def merged_weight(self):
        return self.base.weight + self.scaling * self.lora_B @ self.lora_A

    def merge(self):
        out = nn.Linear(self.base.in_features, self.base.out_features,
                        bias=self.base.bias is not None, dtype=self.base.weight.dtype)
        with torch.no_grad():
            out.weight.copy_(self.merged_weight())
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        return out

    def n_trainable(self):
        return self.lora_A.numel() + self.lora_B.numel()


def apply_lowrank_adapter(layer, rank, alpha=1.0):
    return LoRALinear(layer, rank, alpha)


def add_adapters(module, rank, alpha=1.0):
    """Wrap every ``nn.Linear`` under ``module`` in place and freeze everything else."""
    for p in module.parameters():
        p.requires_grad_(False)
    for name, child in list(module.named_children()):
        if isinstance(child, nn.Linear):
            setattr(module, name, LoRALinear(child, min(rank, *child.weight.shape), alpha))
        else:
            add_adapters(child, rank, alpha)
    return module


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with an optional additive logit bias.

    ``forward`` returns ``(output, weights)`` with weights of shape B x H x Lq x Lk.
    """

    def __init__(self, dim, heads, bias=True):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim, bias=bias)
        self.k = nn.Linear(dim, dim, bias=bias)
        self.v = nn.Linear(dim, dim, bias=bias)
        self.o = nn.Linear(dim, dim, bias=bias)

    def forward(self, query, context, logit_bias=None, key_mask=None):
        b, lq, d = query.shape
        lk = context.shape[1]
        hd = d // self.heads
        q = self.q(query).view(b, lq, self.heads, hd).transpose(1, 2)
        k = self.k(context).view(b, lk, self.heads, hd).transpose(1, 2)
        v = self.v(context).view(b, lk, self.heads, hd).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if logit_bias is not None:
            logits = logits + logit_bias
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = logits.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, lq, d)
        return self.o(out), weights


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(LN x), then x + mlp(LN x)."""

    def __init__(self, dim, heads, mlp_ratio=2.0):
        super().__init__()
        hidden = max(1, int(round(dim * mlp_ratio)))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        y = self.norm1(x)
        a, w = self.attn(y, y)
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, w


class PatchEncoder(nn.Module):
    """Vision transformer: patchify, linear embed, class token, learned positions."""

    def __init__(self, input_size=112, vit_patch=16, dim=128, depth=4, heads=4, mlp_ratio=2.0):
        super().__init__()
        if input_size % vit_patch:
            raise ConfigError(f"input_size {input_size} not divisible by vit_patch {vit_patch}")
        self.input_size, self.vit_patch, self.dim = input_size, vit_patch, dim
        self.n_tokens = (input_size // vit_patch) ** 2
        self.embed = nn.Linear(3 * vit_patch * vit_patch, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.n_tokens + 1, dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        """x: B x 3 x S x S normalized images -> B x (tau + 1) x d tokens."""
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.input_size \
                or x.shape[3] != self.input_size:
            raise ShapeError(f"expected B x 3 x {self.input_size} x {self.input_size}, "
                             f"got {tuple(x.shape)}")
        s = self.vit_patch
        patches = F.unfold(x, kernel_size=s, stride=s).transpose(1, 2)
        tokens = self.embed(patches)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        z = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for blk in self.blocks:
            z, _ = blk(z)
        return self.norm(z)


def build_encoder(model_cfg):
    enc = PatchEncoder(model_cfg.input_size, model_cfg.vit_patch, model_cfg.dim,
                       model_cfg.depth, model_cfg.heads, model_cfg.mlp_ratio)
    if model_cfg.lora_rank > 0:
        add_adapters(enc, model_cfg.lora_rank, model_cfg.lora_alpha)
    return enc


def encode_tokens(view, encoder, magnification="x5"):
    """Encode one normalized view (p x p x 3 array or 3 x p x p tensor)."""
    x = torch.as_tensor(np.asarray(view)) if not torch.is_tensor(view) else view
    if x.ndim == 3 and x.shape[-1] == 3 and x.shape[0] != 3:
        x = x.permute(2, 0, 1)
    if x.ndim != 3:
        raise ShapeError(f"expected a single 3-channel view, got shape {tuple(x.shape)}")
    x = x.to(next(encoder.parameters()).dtype)
    if magnification not in MAGNIFICATIONS:
        raise ConfigError(f"unknown magnification {magnification!r}")
    return TokenSequence(encoder(x[None])[0], magnification)
