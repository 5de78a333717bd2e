"""Convolutional building blocks operating on ``[B, C, F, T]`` feature maps."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

__all__ = [
    "BlockConfig",
    "ConvBlock",
    "TFC",
    "TDF",
    "TFCTDFv3",
    "Downsample",
    "Upsample",
    "make_activation",
    "make_norm",
]


@dataclass(frozen=True)
class BlockConfig:
    bf: int = 8
    kernel: int = 3
    activation: str = "gelu"
    norm: str = "instance"
    tfc_convs: int = 3


def make_activation(kind: str) -> nn.Module:
    if kind == "gelu":
        return nn.GELU()
    if kind == "relu":
        return nn.ReLU()
    if kind == "silu":
        return nn.SiLU()
    if kind == "identity":
        return nn.Identity()
    raise ValueError(f"unknown activation {kind!r}")


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    if kind == "layer":
        return nn.GroupNorm(1, channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


def _check_channels(x: torch.Tensor, channels: int, who: str):
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValueError(f"{who}: expected [B, {channels}, F, T], got {tuple(x.shape)}")


class ConvBlock(nn.Sequential):
    """norm -> activation -> conv."""

    def __init__(self, in_channels, out_channels, cfg: BlockConfig, kernel=None, stride=1):
        kernel = cfg.kernel if kernel is None else kernel
        super().__init__(
            make_norm(cfg.norm, in_channels),
            make_activation(cfg.activation),
            nn.Conv2d(in_channels, out_channels, kernel, stride=stride, padding=kernel // 2),
        )

    @property
    def conv(self) -> nn.Conv2d:
        return self[2]


class TFC(nn.Module):
    """Stack of shape-preserving 3x3 conv blocks over (F, T)."""

    def __init__(self, channels: int, cfg: BlockConfig):
        super().__init__()
        self.channels = channels
        self.convs = nn.Sequential(*[ConvBlock(channels, channels, cfg) for _ in range(cfg.tfc_convs)])

    def forward(self, x):
        _check_channels(x, self.channels, "TFC")
        return self.convs(x)


class TDF(nn.Module):
    """Residual frequency bottleneck: ``x + expand(act(reduce(x)))``.

    ``reduce`` maps F -> F / bf and ``expand`` maps back, applied to every
    (batch, channel, frame) fiber along the frequency axis.
    """

    def __init__(self, bins: int, cfg: BlockConfig):
        super().__init__()
        if bins % cfg.bf:
            raise ValueError(f"bottleneck factor {cfg.bf} does not divide {bins} bins")
        self.bins = bins
        self.reduce = nn.Linear(bins, bins // cfg.bf, bias=False)
        self.act = make_activation(cfg.activation)
        self.expand = nn.Linear(bins // cfg.bf, bins, bias=False)

    @property
    def bottleneck(self) -> int:
        return self.reduce.out_features

    def forward(self, x):
        if x.dim() != 4 or x.shape[2] != self.bins:
            raise ValueError(f"TDF: expected F={self.bins}, got shape {tuple(x.shape)}")
        h = x.transpose(2, 3)  # [B, C, T, F]
        h = self.expand(self.act(self.reduce(h)))
        return x + h.transpose(2, 3)


class TFCTDFv3(nn.Module):
    """TFC -> TDF -> TFC with a 1x1 conv shortcut from the block input."""

    def __init__(self, channels: int, bins: int, cfg: BlockConfig):
        super().__init__()
        self.channels = channels
        self.tfc1 = TFC(channels, cfg)
        self.tdf = TDF(bins, cfg)
        self.tfc2 = TFC(channels, cfg)
        self.shortcut = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        _check_channels(x, self.channels, "TFCTDFv3")
        y = self.tfc1(x)
        y = self.tdf(y)
        y = self.tfc2(y)
        return y + self.shortcut(x)


class Downsample(nn.Module):
    """Halve F and T with a stride-2 3x3 conv, adding ``g`` channels."""

    def __init__(self, channels: int, g: int, cfg: BlockConfig):
        super().__init__()
        self.channels = channels
        self.block = ConvBlock(channels, channels + g, cfg, kernel=3, stride=2)

    @property
    def conv(self) -> nn.Conv2d:
        return self.block.conv

    def forward(self, x):
        _check_channels(x, self.channels, "Downsample")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"Downsample needs even F and T, got {tuple(x.shape)}")
        return self.block(x)


class Upsample(nn.Module):
    """Double F and T with a stride-2 3x3 transposed conv, removing ``g`` channels."""

    def __init__(self, channels: int, g: int, cfg: BlockConfig):
        super().__init__()
        if channels <= g:
            raise ValueError(f"Upsample needs channels > g, got {channels} <= {g}")
        self.channels = channels
        self.norm = make_norm(cfg.norm, channels)
        self.act = make_activation(cfg.activation)
        self.conv = nn.ConvTranspose2d(
            channels, channels - g, 3, stride=2, padding=1, output_padding=1
        )

    def forward(self, x):
        _check_channels(x, self.channels, "Upsample")
        return self.conv(self.act(self.norm(x)))
