"""Pixel-space toy U-Net with text cross-attention.

Three resolution levels; cross-attention sits at the coarsest level (a
quarter of the input resolution) and every attention layer exposes its
per-token spatial probabilities so the training loop can supervise and
capture them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .lora import AdapterConfig, LoRALinear


@dataclass
class AttentionCapture:
    """Head/layer-averaged spatial attention per concept token, each map
    normalized to sum at most 1."""

    maps: dict[str, torch.Tensor]  # token -> (H', W'), values >= 0
    resolution: int


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of integer timesteps (float64 out)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.to(torch.float64).unsqueeze(-1) * freqs.unsqueeze(0)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Multi-head attention from spatial queries to prompt tokens.

    Returns both the attended values and the head-averaged attention
    probabilities (B, HW, L) for capture.
    """

    def __init__(self, dim: int, ctx_dim: int, heads: int = 4):
        super().__init__()
        assert dim % heads == 0
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(ctx_dim, dim, bias=False)
        self.to_v = nn.Linear(ctx_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(
        self, x: torch.Tensor, ctx: torch.Tensor, ctx_mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        l = ctx.shape[1]
        h = self.heads

        def split(t):
            return t.reshape(b, -1, h, d // h).transpose(1, 2)  # (B, h, *, dh)

        q, k, v = split(self.to_q(x)), split(self.to_k(ctx)), split(self.to_v(ctx))
        scores = q @ k.transpose(-2, -1) * self.scale  # (B, h, N, L)
        if ctx_mask is not None:
            scores = scores.masked_fill(ctx_mask[:, None, None, :], float("-inf"))
        probs = scores.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, n, d)
        return self.to_out(out), probs.mean(dim=1)

    def apply_adapter(self, config: AdapterConfig) -> None:
        mapping = {"q": "to_q", "k": "to_k", "v": "to_v", "out": "to_out"}
        for target in config.targets:
            name = mapping[target]
            layer = getattr(self, name)
            if isinstance(layer, LoRALinear):
                continue
            setattr(self, name, LoRALinear(layer, config.rank))


class AttentionBlock(nn.Module):
    """GroupNorm -> cross-attention -> residual, plus a small MLP."""

    def __init__(self, dim: int, ctx_dim: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, dim)
        self.attn = CrossAttention(dim, ctx_dim, heads)
        self.norm2 = nn.GroupNorm(8, dim)
        self.ff = nn.Sequential(nn.Conv2d(dim, dim * 2, 1), nn.SiLU(), nn.Conv2d(dim * 2, dim, 1))

    def forward(self, x, ctx, ctx_mask):
        b, c, hh, ww = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)  # (B, HW, C)
        attended, probs = self.attn(seq, ctx, ctx_mask)
        x = x + attended.transpose(1, 2).reshape(b, c, hh, ww)
        x = x + self.ff(self.norm2(x))
        return x, probs


class ToyUNet(nn.Module):
    """Small epsilon-prediction U-Net over RGB rasters.

    The final conv is zero-initialized, so a fresh network predicts zero
    noise everywhere.
    """

    def __init__(
        self,
        in_channels: int = 3,
        base: int = 32,
        mults: tuple[int, ...] = (1, 2, 4),
        ctx_dim: int = 128,
        heads: int = 4,
    ):
        super().__init__()
        chans = [base * m for m in mults]
        temb_dim = base * 4
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.conv_in = nn.Conv2d(in_channels, chans[0], 3, padding=1)

        self.down1 = ResBlock(chans[0], chans[0], temb_dim)
        self.pool1 = nn.Conv2d(chans[0], chans[0], 3, stride=2, padding=1)
        self.down2 = ResBlock(chans[0], chans[1], temb_dim)
        self.pool2 = nn.Conv2d(chans[1], chans[1], 3, stride=2, padding=1)
        self.down3 = ResBlock(chans[1], chans[2], temb_dim)
        self.attn_down = AttentionBlock(chans[2], ctx_dim, heads)

        self.mid1 = ResBlock(chans[2], chans[2], temb_dim)
        self.attn_mid = AttentionBlock(chans[2], ctx_dim, heads)
        self.mid2 = ResBlock(chans[2], chans[2], temb_dim)

        self.up3 = ResBlock(chans[2] + chans[2], chans[2], temb_dim)
        self.attn_up = AttentionBlock(chans[2], ctx_dim, heads)
        self.unpool2 = nn.Upsample(scale_factor=2, mode="nearest")
        self.up2 = ResBlock(chans[2] + chans[1], chans[1], temb_dim)
        self.unpool1 = nn.Upsample(scale_factor=2, mode="nearest")
        self.up1 = ResBlock(chans[1] + chans[0], chans[0], temb_dim)

        self.norm_out = nn.GroupNorm(8, chans[0])
        self.conv_out = nn.Conv2d(chans[0], in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def attention_blocks(self) -> list[AttentionBlock]:
        return [self.attn_down, self.attn_mid, self.attn_up]

    def apply_adapter(self, config: AdapterConfig) -> None:
        for block in self.attention_blocks:
            block.attn.apply_adapter(config)

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        ctx: torch.Tensor,
        ctx_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Predict noise; also return per-attention-layer probabilities
        (each (B, HW, L)) for capture."""
        if t.dim() == 0:
            t = t.expand(z_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim).to(z_t.dtype))

        captures: list[torch.Tensor] = []
        h1 = self.down1(self.conv_in(z_t), temb)
        h2 = self.down2(self.pool1(h1), temb)
        h3 = self.down3(self.pool2(h2), temb)
        h3, p = self.attn_down(h3, ctx, ctx_mask)
        captures.append(p)

        m = self.mid1(h3, temb)
        m, p = self.attn_mid(m, ctx, ctx_mask)
        captures.append(p)
        m = self.mid2(m, temb)

        u3 = self.up3(torch.cat([m, h3], dim=1), temb)
        u3, p = self.attn_up(u3, ctx, ctx_mask)
        captures.append(p)
        u2 = self.up2(torch.cat([self.unpool2(u3), h2], dim=1), temb)
        u1 = self.up1(torch.cat([self.unpool1(u2), h1], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(u1))), captures
