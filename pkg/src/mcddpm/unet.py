"""Split denoising U-Net with a cross-attention bottleneck.

The encoder half produces bottleneck features and a skip stack; the clean
branch runs the same encoder at time step 0 to build the context that the
noisy branch attends to; the decoder half turns the attended bottleneck back
into a single-channel estimate of the clean slice.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .bridge import num_groups


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 5
    base_width: int = 32
    depth: int = 3
    attention_heads: int = 4
    time_embed_dim: int = 64
    conditioning: bool = True
    share_context_encoder: bool = True

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.depth + 1)]

    @property
    def bottleneck_channels(self) -> int:
        return self.widths[-1]


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer position code evaluated at (possibly zero) step ``t``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(num_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(num_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    """Downsampling half: input conv, one block + strided conv per stage, bottleneck block."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        w, ted = config.widths, config.time_embed_dim
        self.inp = nn.Conv2d(config.in_channels, w[0], 3, padding=1)
        self.blocks = nn.ModuleList([TimeResBlock(w[i], w[i], ted) for i in range(config.depth)])
        self.downs = nn.ModuleList(
            [nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1) for i in range(config.depth)]
        )
        self.mid = TimeResBlock(w[-1], w[-1], ted)

    def forward(self, x, temb):
        h = self.inp(x)
        skips = []
        for block, down in zip(self.blocks, self.downs):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        return self.mid(h, temb), skips


class Decoder(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        w, ted = config.widths, config.time_embed_dim
        self.mid = TimeResBlock(w[-1], w[-1], ted)
        self.ups = nn.ModuleList(
            [nn.Conv2d(w[i + 1], w[i], 3, padding=1) for i in reversed(range(config.depth))]
        )
        self.blocks = nn.ModuleList(
            [TimeResBlock(2 * w[i], w[i], ted) for i in reversed(range(config.depth))]
        )
        self.out_norm = nn.GroupNorm(num_groups(w[0]), w[0])
        self.out = nn.Conv2d(w[0], 1, 3, padding=1)

    def forward(self, h, skips, temb):
        if len(skips) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} skip tensors, got {len(skips)}")
        h = self.mid(h, temb)
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            if h.shape[0] != skip.shape[0] or h.shape[2:] != skip.shape[2:]:
                raise ValueError(f"skip shape {tuple(skip.shape)} does not match {tuple(h.shape)}")
            h = block(torch.cat([h, skip], dim=1), temb)
        return self.out(F.silu(self.out_norm(h)))


class CrossAttention(nn.Module):
    """Multi-head attention from bottleneck queries to context keys/values, with residual.

    Spatial positions are flattened into the sequence axis; no positional
    encoding is added, so the result is invariant to permuting context positions.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels cannot be split into {heads} heads")
        self.heads = heads
        self.norm_q = nn.GroupNorm(num_groups(channels), channels)
        self.norm_kv = nn.GroupNorm(num_groups(channels), channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, context=None, return_weights: bool = False):
        if context is None:
            context = x
        B, C, H, W = x.shape
        if context.shape[:2] != (B, C):
            raise ValueError(f"context shape {tuple(context.shape)} incompatible with queries {tuple(x.shape)}")
        q = self.q(self.norm_q(x).flatten(2).transpose(1, 2))
        kv = self.norm_kv(context).flatten(2).transpose(1, 2)
        k, v = self.k(kv), self.v(kv)

        def heads(a):
            return a.reshape(B, a.shape[1], self.heads, C // self.heads).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(C // self.heads), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, H * W, C)
        out = x + self.proj(out).transpose(1, 2).reshape(B, C, H, W)
        return (out, weights) if return_weights else out


class ConditionalUNet(nn.Module):
    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        ted = config.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(ted, ted), nn.SiLU(), nn.Linear(ted, ted))
        self.encoder = Encoder(config)
        self.context_encoder = (
            None if config.share_context_encoder or not config.conditioning else copy.deepcopy(self.encoder)
        )
        self.attention = CrossAttention(config.bottleneck_channels, config.attention_heads)
        self.decoder = Decoder(config)
        self.evaluations = 0  # per-sample denoiser passes, for single-pass instrumentation

    def time_embedding(self, t, batch: int) -> torch.Tensor:
        dtype = self.time_mlp[0].weight.dtype
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        if t.numel() != batch:
            raise ValueError(f"got {t.numel()} time steps for a batch of {batch}")
        return self.time_mlp(sinusoidal_embedding(t, self.config.time_embed_dim).to(dtype))

    def _check_input(self, x):
        c = self.config
        if x.dim() != 4 or x.shape[1] != c.in_channels:
            raise ValueError(f"expected input with {c.in_channels} channels, got shape {tuple(x.shape)}")
        f = 2**c.depth
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {f}")

    def encode(self, x_cat, t):
        """Noisy-branch encoder: returns ``(bottleneck, skips, temb)``."""
        self._check_input(x_cat)
        temb = self.time_embedding(t, x_cat.shape[0])
        h, skips = self.encoder(x_cat, temb)
        return h, skips, temb

    def make_context(self, x0, z=None):
        """Clean-branch bottleneck at time step 0; the skip stack is discarded."""
        x_cat = x0 if z is None else torch.cat([x0, z], dim=1)
        self._check_input(x_cat)
        temb = self.time_embedding(0, x_cat.shape[0])
        encoder = self.context_encoder if self.context_encoder is not None else self.encoder
        context, _ = encoder(x_cat, temb)
        return context

    def cross_attention(self, h, context, return_weights: bool = False):
        if not self.config.conditioning:
            context = None
        return self.attention(h, context, return_weights=return_weights)

    def decode(self, h, skips, temb):
        return self.decoder(h, skips, temb)

    def forward(self, x_in, z, t, context=None):
        """Predict the clean slice: decode(cross_attention(encode(x_in (+) z, t), context))."""
        x_cat = x_in if z is None else torch.cat([x_in, z], dim=1)
        if self.config.conditioning and context is None:
            raise ValueError("conditioned model requires a context")
        h, skips, temb = self.encode(x_cat, t)
        self.evaluations += x_cat.shape[0]
        return self.decode(self.cross_attention(h, context), skips, temb)
