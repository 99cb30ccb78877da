"""The full network: bridge + conditioned U-Net, with ablation switches."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

from .bridge import BridgeConfig, BridgeNet
from .unet import ConditionalUNet, UNetConfig

ABLATIONS = ("full", "no_bridge", "no_conditioning")


@dataclass(frozen=True)
class ModelConfig:
    ablation: str = "full"
    latent_channels: int = 4
    bridge_hidden: int = 32
    bridge_blocks: int = 2
    base_width: int = 32
    depth: int = 3
    attention_heads: int = 4
    time_embed_dim: int = 64
    share_context_encoder: bool = True

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")

    @property
    def uses_bridge(self) -> bool:
        return self.ablation != "no_bridge"

    @property
    def uses_conditioning(self) -> bool:
        return self.ablation != "no_conditioning"

    def bridge_config(self) -> BridgeConfig:
        return BridgeConfig(self.latent_channels, self.bridge_hidden, self.bridge_blocks)

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            in_channels=1 + self.latent_channels if self.uses_bridge else 1,
            base_width=self.base_width,
            depth=self.depth,
            attention_heads=self.attention_heads,
            time_embed_dim=self.time_embed_dim,
            conditioning=self.uses_conditioning,
            share_context_encoder=self.share_context_encoder,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class MCDDPMNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        self.bridge = BridgeNet(config.bridge_config()) if config.uses_bridge else None
        self.unet = ConditionalUNet(config.unet_config())

    def forward(self, x_clean, x_in, x_full, t, detach_context: bool = False):
        """One denoising pass.

        ``x_clean`` feeds the context branch, ``x_in`` is the (patch-)noised
        slice the U-Net denoises and ``x_full`` is the fully-noised slice fed
        to the bridge.  All are ``(B, 1, h, w)``.  Returns ``(x0_hat, xz_hat)``
        where ``xz_hat`` is ``None`` without a bridge.
        """
        z = xz_hat = None
        if self.bridge is not None:
            z = self.bridge.encode(x_full)
            xz_hat = self.bridge.reconstruct(z)
        context = None
        if self.config.uses_conditioning:
            context = self.unet.make_context(x_clean, z)
            if detach_context:
                context = context.detach()
        return self.unet(x_in, z, t, context), xz_hat


def build_model(config: ModelConfig, seed: int | None = None, dtype=torch.float32) -> MCDDPMNet:
    if seed is not None:
        torch.manual_seed(seed)
    return MCDDPMNet(config).to(dtype)
