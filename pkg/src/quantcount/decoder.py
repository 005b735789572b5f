"""Cost-aggregation decoder from vision-text similarity to a density map.

The pipeline is: cosine similarity between patch states and the category
text encoding, a 3x3 cost embedding, two windowed-attention blocks
(second one shifted) optionally guided by the patch states, then two
upsampling stages that mix in encoder skip features gated by the
similarity map, and a 1x1 regression head with ReLU.
"""
from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .backbone import DenseVisual
from .config import DecoderConfig

COSINE_EPS = 1e-8


def cosine_map(V: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """Per-position cosine similarity. V: (..., h, w, d); text: (..., d).

    Zero norms are guarded by clamping the norm product at 1e-8; values
    are clamped to [-1, 1] so downstream layers see bounded costs.
    """
    t = text.unsqueeze(-2).unsqueeze(-2)               # (..., 1, 1, d)
    dot = (V * t).sum(-1)
    denom = (V.norm(dim=-1) * t.norm(dim=-1)).clamp_min(COSINE_EPS)
    return (dot / denom).clamp(-1.0, 1.0)


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(win: torch.Tensor, ws: int, H: int, W: int) -> torch.Tensor:
    B = win.shape[0] // (H // ws * (W // ws))
    x = win.view(B, H // ws, W // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, -1)


class WindowBlock(nn.Module):
    """Pre-norm windowed attention + MLP block with optional guidance.

    When guidance is enabled, the guidance grid is concatenated to the
    normalized input channel-wise for the query and key projections only;
    values always come from the block input alone. shift > 0 applies the
    usual cyclic shift with cross-window masking.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int, shift: int,
                 use_guidance: bool):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.ws = window_size
        self.shift = shift
        self.use_guidance = use_guidance
        qk_in = dim * 2 if use_guidance else dim
        self.q = nn.Linear(qk_in, dim)
        self.k = nn.Linear(qk_in, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))
        self.rel_bias = nn.Parameter(torch.empty((2 * window_size - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        coords = torch.stack(torch.meshgrid(
            torch.arange(window_size), torch.arange(window_size), indexing="ij"))
        flat = coords.flatten(1)                       # (2, ws*ws)
        rel = flat[:, :, None] - flat[:, None, :]
        rel = rel.permute(1, 2, 0) + (window_size - 1)
        index = rel[..., 0] * (2 * window_size - 1) + rel[..., 1]
        self.register_buffer("rel_index", index, persistent=False)

    def _shift_mask(self, Hp, Wp, device, dtype):
        img = torch.zeros(1, Hp, Wp, 1, device=device)
        slices = (slice(0, -self.ws), slice(-self.ws, -self.shift), slice(-self.shift, None))
        cnt = 0
        for hs in slices:
            for ws_ in slices:
                img[:, hs, ws_, :] = cnt
                cnt += 1
        win = window_partition(img, self.ws).squeeze(-1)   # (nW, N)
        mask = win.unsqueeze(1) - win.unsqueeze(2)
        return (mask != 0).to(dtype) * -100.0              # (nW, N, N)

    def forward(self, x: torch.Tensor, guidance=None) -> torch.Tensor:
        B, H, W, C = x.shape
        shortcut = x
        x = self.norm1(x)
        qk = x
        if self.use_guidance:
            if guidance is None:
                raise ValueError("block built with guidance but none given")
            qk = torch.cat([x, guidance], dim=-1)

        pad_b = (self.ws - H % self.ws) % self.ws
        pad_r = (self.ws - W % self.ws) % self.ws
        if pad_b or pad_r:
            x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
            qk = F.pad(qk, (0, 0, 0, pad_r, 0, pad_b))
        Hp, Wp = x.shape[1], x.shape[2]
        if self.shift:
            x = torch.roll(x, (-self.shift, -self.shift), dims=(1, 2))
            qk = torch.roll(qk, (-self.shift, -self.shift), dims=(1, 2))

        N = self.ws * self.ws
        xw = window_partition(x, self.ws)
        qkw = window_partition(qk, self.ws)
        nW = xw.shape[0] // B
        q = self.q(qkw).reshape(-1, N, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(qkw).reshape(-1, N, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(xw).reshape(-1, N, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn + self.rel_bias[self.rel_index].permute(2, 0, 1)
        if self.shift:
            mask = self._shift_mask(Hp, Wp, x.device, attn.dtype)
            attn = attn.view(B, nW, self.num_heads, N, N) + mask[None, :, None]
            attn = attn.view(-1, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(-1, N, C)
        out = window_reverse(out, self.ws, Hp, Wp)

        if self.shift:
            out = torch.roll(out, (self.shift, self.shift), dims=(1, 2))
        if pad_b or pad_r:
            out = out[:, :H, :W]
        x = shortcut + self.proj(out)
        x = x + self.mlp(self.norm2(x))
        return x


class UpsampleStage(nn.Module):
    """One 2x refinement step.

    Bilinearly upsamples the aggregated grid, adds the projected encoder
    skip features gated by the (resized) similarity map, and applies a
    3x3 convolution. Width is preserved across stages.
    """

    def __init__(self, dim: int, skip_width: int):
        super().__init__()
        self.skip_proj = nn.Linear(skip_width, dim)
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, G: torch.Tensor, skip: torch.Tensor, S: torch.Tensor) -> torch.Tensor:
        """G: (B, h, w, dim); skip: (B, hs, ws, skip_width); S: (B, h0, w0)."""
        B, h, w, dim = G.shape
        up = F.interpolate(G.permute(0, 3, 1, 2), scale_factor=2, mode="bilinear",
                           align_corners=False)
        size = up.shape[-2:]
        skip = F.interpolate(skip.permute(0, 3, 1, 2), size=size, mode="bilinear",
                             align_corners=False).permute(0, 2, 3, 1)
        gate = torch.sigmoid(F.interpolate(S.unsqueeze(1), size=size, mode="bilinear",
                                           align_corners=False)).permute(0, 2, 3, 1)
        mixed = up.permute(0, 2, 3, 1) + self.skip_proj(skip) * gate
        out = self.conv(mixed.permute(0, 3, 1, 2))
        return out.permute(0, 2, 3, 1)


class CostAggregationDecoder(nn.Module):
    """Full decoder from (patch states, category encoding) to a density map."""

    def __init__(self, cfg: DecoderConfig, text_width: int, vision_width: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.bridge = nn.Linear(text_width, vision_width, bias=False)
        with torch.no_grad():
            self.bridge.weight.zero_()
            n = min(text_width, vision_width)
            self.bridge.weight[:n, :n].copy_(torch.eye(n))
        self.cost_embed = nn.Conv2d(1, cfg.width, 3, padding=1)
        shift = cfg.window_size // 2
        self.block1 = WindowBlock(cfg.width, cfg.num_heads, cfg.window_size, 0,
                                  cfg.use_guidance)
        self.block2 = WindowBlock(cfg.width, cfg.num_heads, cfg.window_size, shift,
                                  cfg.use_guidance)
        if cfg.use_guidance:
            self.guidance_proj = nn.Linear(vision_width, cfg.width)
        self.stages = nn.ModuleList(
            UpsampleStage(cfg.width, vision_width) for _ in range(cfg.num_upsample_stages))
        self.head = nn.Conv2d(cfg.width, 1, 1)
        nn.init.normal_(self.head.weight, std=0.02)
        # start slightly inside the ReLU's active region: a zero bias lets an
        # early optimizer step push every pre-activation negative, after which
        # the density gradient is identically zero and training is stuck
        nn.init.constant_(self.head.bias, 0.02)

    def similarity_map(self, V: torch.Tensor, text_category: torch.Tensor) -> torch.Tensor:
        return cosine_map(V, self.bridge(text_category))

    def embed_cost(self, S: torch.Tensor) -> torch.Tensor:
        return self.cost_embed(S.unsqueeze(1)).permute(0, 2, 3, 1)

    def aggregate(self, G: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
        guidance = self.guidance_proj(V) if self.cfg.use_guidance else None
        G = self.block1(G, guidance)
        G = self.block2(G, guidance)
        return G

    def forward(self, dense: DenseVisual, text_category: torch.Tensor) -> torch.Tensor:
        """Returns the density map, (B, 4h, 4w) for the default two stages."""
        squeeze = dense.V.dim() == 3
        V = dense.V.unsqueeze(0) if squeeze else dense.V
        skips = [s.unsqueeze(0) if squeeze else s for s in dense.stage_features]
        tc = text_category.unsqueeze(0) if squeeze else text_category
        if len(skips) != len(self.stages):
            raise ValueError(
                f"need {len(self.stages)} skip features, got {len(skips)}")

        S = self.similarity_map(V, tc)
        G = self.embed_cost(S)
        G = self.aggregate(G, V)
        # deepest skip feeds the first (coarsest) refinement stage
        for stage, skip in zip(self.stages, reversed(skips)):
            G = stage(G, skip, S)
        D = F.relu(self.head(G.permute(0, 3, 1, 2))).squeeze(1)
        return D[0] if squeeze else D

    @staticmethod
    def count(density: torch.Tensor) -> torch.Tensor:
        return density.sum(dim=(-2, -1))
