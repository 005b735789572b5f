"""Dual-encoder backbone: text and vision transformers with prompt slots.

Both encoders accept per-layer prompt grids. A grid given for layer j
replaces the prompt slots of the running sequence before that layer's
attention, so each layer sees freshly injected prompts and the previous
layer's outgoing prompt states are discarded. Layers beyond the prompt
depth process the last injected slots as ordinary tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import TextEncoderConfig, VisionEncoderConfig


class MultiheadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, S, D = x.shape
        qkv = self.qkv(x).reshape(B, S, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)          # each (B, heads, S, head_dim)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, S, D)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP block, MLP ratio 4, GELU."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4),
            nn.GELU(),
            nn.Linear(dim * 4, dim),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _batch_prompts(prompts, batch: int, length: int, width: int, name: str):
    """Normalize a per-layer prompt list to (B, m, width) tensors."""
    out = []
    for j, g in enumerate(prompts):
        if g.dim() == 2:
            g = g.unsqueeze(0).expand(batch, -1, -1)
        if g.shape != (batch, length, width):
            raise ValueError(
                f"{name} prompt grid {j} has shape {tuple(g.shape)}, "
                f"expected ({batch}, {length}, {width})")
        out.append(g)
    return out


class TextTransformer(nn.Module):
    """Token-embedding transformer producing one vector per text.

    The output is the final-layer state at the end-of-text position (the
    last non-pad token) after the final LayerNorm. No further projection
    head is applied.
    """

    def __init__(self, cfg: TextEncoderConfig, vocab_size: int, pad_id: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.pad_id = pad_id
        self.token_embed = nn.Embedding(vocab_size, cfg.width)
        self.pos_embed = nn.Parameter(torch.empty(cfg.max_seq_len, cfg.width))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.num_heads) for _ in range(cfg.num_layers))
        self.norm_final = nn.LayerNorm(cfg.width)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)

    def forward(self, tokens: torch.Tensor, prompts=()) -> torch.Tensor:
        """tokens: (B, S) or (S,) int ids; prompts: per-layer grids, layer 1 first."""
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        B, S = tokens.shape
        if S > self.cfg.max_seq_len:
            raise ValueError("token sequence longer than max_seq_len")
        depth = len(prompts)
        if depth > self.cfg.num_layers:
            raise ValueError("more prompt grids than layers")
        nonpad = tokens != self.pad_id
        if not bool(nonpad.any(dim=1).all()):
            raise ValueError("all-pad token sequence")
        eot = nonpad.sum(dim=1) - 1                    # (B,)

        dtype = self.token_embed.weight.dtype
        x = self.token_embed(tokens) + self.pos_embed[:S].to(dtype)
        m = 0
        if depth:
            grids = _batch_prompts(prompts, B, prompts[0].shape[-2], self.cfg.width, "text")
            m = grids[0].shape[1]
            x = torch.cat([grids[0], x], dim=1)
        for j, blk in enumerate(self.blocks):
            if 0 < j < depth:
                x = torch.cat([grids[j], x[:, m:]], dim=1)
            x = blk(x)
        x = self.norm_final(x)
        out = x[torch.arange(B, device=x.device), m + eot]
        return out.squeeze(0) if squeeze else out


@dataclass
class DenseVisual:
    """Vision encoder output: patch grid, global token, and skip features.

    V: (B, h, w, width) patch states; prompt and class slots are excluded.
    v_g: (B, width) class-token state.
    stage_features: per skip layer, (B, h, w, width) patch states captured
    after that layer (shallowest first).
    """
    V: torch.Tensor
    v_g: torch.Tensor
    stage_features: tuple


class VisionTransformer(nn.Module):
    """ViT-style encoder over non-overlapping patches with prompt slots.

    Sequence layout is [class, prompt slots, patches]. Learned absolute
    positional embeddings cover the class and patch positions; prompt
    slots carry none, since they are re-injected per layer.
    """

    def __init__(self, cfg: VisionEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.grid = cfg.grid_size
        self.patch_embed = nn.Conv2d(3, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.empty(1, 1, cfg.width))
        self.pos_embed = nn.Parameter(torch.empty(1 + self.grid ** 2, cfg.width))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.num_heads) for _ in range(cfg.num_layers))
        self.norm_final = nn.LayerNorm(cfg.width)
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)

    def forward(self, images: torch.Tensor, prompts=()) -> DenseVisual:
        """images: (B, 3, H, W) or (3, H, W), values in [0, 1]."""
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        B, C, H, W = images.shape
        if C != 3 or H != self.cfg.image_size or W != self.cfg.image_size:
            raise ValueError(f"expected (B, 3, {self.cfg.image_size}, {self.cfg.image_size}) images")
        if not bool(torch.isfinite(images).all()):
            raise ValueError("non-finite image values")
        if bool(images.min() < 0) or bool(images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        depth = len(prompts)
        if depth > self.cfg.num_layers:
            raise ValueError("more prompt grids than layers")

        x = self.patch_embed(images.to(self.patch_embed.weight.dtype))
        x = x.flatten(2).transpose(1, 2)               # (B, h*w, width)
        x = x + self.pos_embed[1:]
        cls = self.cls_token.expand(B, -1, -1) + self.pos_embed[0]
        m = 0
        if depth:
            grids = _batch_prompts(prompts, B, prompts[0].shape[-2], self.cfg.width, "vision")
            m = grids[0].shape[1]
            x = torch.cat([cls, grids[0], x], dim=1)
        else:
            x = torch.cat([cls, x], dim=1)

        g = self.grid
        stages = []
        capture = set(self.cfg.skip_stages)
        for j, blk in enumerate(self.blocks):
            if 0 < j < depth:
                x = torch.cat([x[:, :1], grids[j], x[:, 1 + m:]], dim=1)
            x = blk(x)
            if (j + 1) in capture:
                stages.append(x[:, 1 + m:].reshape(B, g, g, self.cfg.width))
        x = self.norm_final(x)
        v_g = x[:, 0]
        V = x[:, 1 + m:].reshape(B, g, g, self.cfg.width)
        if squeeze:
            return DenseVisual(V=V[0], v_g=v_g[0], stage_features=tuple(s[0] for s in stages))
        return DenseVisual(V=V, v_g=v_g, stage_features=tuple(stages))
