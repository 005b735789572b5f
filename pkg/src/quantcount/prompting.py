"""Learnable prompt grids, quantity conditioning, and cross-branch coupling.

Training conditions every text prompt row with the quantity embedding
(rank-1 broadcast) and derives the vision prompts from the conditioned
text prompts through per-layer linear maps, so gradients flow between
branches. Inference uses the raw text prompts and skips the category
projection entirely.
"""
from __future__ import annotations

import torch
from torch import nn


class PromptBank(nn.Module):
    """Per-layer learnable text prompt grids, layer 1 first."""

    def __init__(self, depth: int, length: int, width: int):
        super().__init__()
        self.depth = depth
        self.length = length
        self.width = width
        self.grids = nn.ParameterList(
            nn.Parameter(torch.empty(length, width)) for _ in range(depth))
        for g in self.grids:
            nn.init.normal_(g, std=0.02)


class CouplingStack(nn.Module):
    """Per-layer linear maps taking text prompt rows to vision width."""

    def __init__(self, depth: int, text_width: int, vision_width: int):
        super().__init__()
        self.maps = nn.ModuleList(
            nn.Linear(text_width, vision_width) for _ in range(depth))
        for lin in self.maps:
            nn.init.normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)


class CategoryProjector(nn.Module):
    """Linear head mapping a full (count-aware) text encoding to a
    category-level one. Initialized to the identity so training starts
    from the unprojected encoding. Tracks invocations for purity checks."""

    def __init__(self, width: int):
        super().__init__()
        self.proj = nn.Linear(width, width)
        with torch.no_grad():
            self.proj.weight.copy_(torch.eye(width))
            self.proj.bias.zero_()
        self.call_count = 0

    def forward(self, text_encoding: torch.Tensor) -> torch.Tensor:
        self.call_count += 1
        return self.proj(text_encoding)


def condition_prompts(grids, quantity_embedding: torch.Tensor):
    """Add the quantity embedding to every row of every prompt grid.

    grids: iterable of (m, d) parameters. quantity_embedding: (d,) or (N, d).
    Returns per-layer tensors of shape (m, d) or (N, m, d) accordingly.
    """
    eps = quantity_embedding.unsqueeze(-2)             # (..., 1, d)
    return [g + eps for g in grids]


def couple_prompts(stack: CouplingStack, grids):
    """Apply the per-layer coupling map row-wise to each prompt grid."""
    if len(grids) != len(stack.maps):
        raise ValueError("prompt depth does not match coupling stack depth")
    return [lin(g) for lin, g in zip(stack.maps, grids)]
