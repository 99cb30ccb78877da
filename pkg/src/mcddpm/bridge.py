"""Multichannel bridge network.

The extractor maps a fully-noised slice to a multichannel latent ``Z`` with
the same spatial size as the slice; the reconstructor maps ``Z`` back to a
single-channel estimate of the clean slice.  Neither downsamples.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def num_groups(channels: int, max_groups: int = 8) -> int:
    """Largest divisor of ``channels`` up to ``max_groups`` leaving >= 2 channels per group."""
    g = max(1, min(max_groups, channels // 2))
    while channels % g:
        g -= 1
    return g


class PreActResBlock(nn.Module):
    """Identity-mapping residual block: (norm -> SiLU -> conv3x3) x 2 plus skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(num_groups(channels), channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(num_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


@dataclass(frozen=True)
class BridgeConfig:
    latent_channels: int = 4
    hidden: int = 32
    num_blocks: int = 2


class _ResidualMap(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, hidden: int, num_blocks: int):
        super().__init__()
        self.inp = nn.Conv2d(in_ch, hidden, 3, padding=1)
        self.blocks = nn.Sequential(*[PreActResBlock(hidden) for _ in range(num_blocks)])
        self.out_norm = nn.GroupNorm(num_groups(hidden), hidden)
        self.out = nn.Conv2d(hidden, out_ch, 1)

    def forward(self, x):
        h = self.blocks(self.inp(x))
        return self.out(F.silu(self.out_norm(h)))


class BridgeNet(nn.Module):
    """Extractor ``x_full -> Z`` and reconstructor ``Z -> x_hat``."""

    def __init__(self, config: BridgeConfig = BridgeConfig()):
        super().__init__()
        self.config = config
        c = config
        self.extractor = _ResidualMap(1, c.latent_channels, c.hidden, c.num_blocks)
        self.reconstructor = _ResidualMap(c.latent_channels, 1, c.hidden, c.num_blocks)

    def encode(self, x_full: torch.Tensor) -> torch.Tensor:
        """``(B, 1, h, w)`` (or ``(B, h, w)``) -> latent ``(B, C_z, h, w)``."""
        if x_full.dim() == 3:
            x_full = x_full.unsqueeze(1)
        if x_full.dim() != 4 or x_full.shape[1] != 1:
            raise ValueError(f"expected a single-channel batch, got shape {tuple(x_full.shape)}")
        if not torch.isfinite(x_full).all():
            raise ValueError("bridge input contains non-finite values")
        return self.extractor(x_full)

    def reconstruct(self, z: torch.Tensor) -> torch.Tensor:
        """Latent ``(B, C_z, h, w)`` -> ``(B, 1, h, w)``."""
        if z.dim() != 4 or z.shape[1] != self.config.latent_channels:
            raise ValueError(
                f"expected latent with {self.config.latent_channels} channels, got shape {tuple(z.shape)}"
            )
        return self.reconstructor(z)

    def forward(self, x_full):
        z = self.encode(x_full)
        return z, self.reconstruct(z)


def bridge_encode(x_full, bridge: BridgeNet) -> torch.Tensor:
    """Encode one ``h x w`` slice (numpy or tensor) into a ``C_z x h x w`` latent."""
    x = torch.as_tensor(x_full, dtype=next(bridge.parameters()).dtype)
    if x.dim() != 2:
        raise ValueError(f"expected an h x w slice, got shape {tuple(x.shape)}")
    return bridge.encode(x[None, None])[0]


def bridge_reconstruct(z, bridge: BridgeNet) -> torch.Tensor:
    z = torch.as_tensor(z, dtype=next(bridge.parameters()).dtype)
    if z.dim() != 3:
        raise ValueError(f"expected a C_z x h x w latent, got shape {tuple(z.shape)}")
    return bridge.reconstruct(z[None])[0, 0]
