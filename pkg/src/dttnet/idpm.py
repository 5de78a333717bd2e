"""Improved dual-path module: channel heads, time-axis and frequency-axis BLSTMs."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

__all__ = ["IdpmConfig", "split_heads", "merge_heads", "RNNBlock", "IDPM", "LatentStage", "count_rnn_flops"]


@dataclass(frozen=True)
class IdpmConfig:
    channels: int = 96
    heads: int = 2
    repeats: int = 4
    group_channels: int = 16

    def __post_init__(self):
        if self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"heads={self.heads} must divide channels={self.channels}")
        if self.head_channels % self.group_channels:
            raise ValueError(
                f"group size {self.group_channels} must divide per-head width {self.head_channels}"
            )

    @property
    def head_channels(self) -> int:
        return self.channels // self.heads


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """``[B, C, F, T] -> [B*H, C/H, F, T]``; head ``h`` holds channels ``h*C'..(h+1)*C'``."""
    b, c, f, t = x.shape
    if heads < 1 or c % heads:
        raise ValueError(f"{heads} heads do not divide {c} channels")
    return x.reshape(b * heads, c // heads, f, t)


def merge_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    bh, c, f, t = x.shape
    if bh % heads:
        raise ValueError(f"batch {bh} is not a multiple of {heads} heads")
    return x.reshape(bh // heads, c * heads, f, t)


class RNNBlock(nn.Module):
    """Residual ``x + FC(BLSTM(GroupNorm(x)))`` along one spatial axis.

    The other spatial axis is folded into the batch. The BLSTM has hidden
    size ``2C'`` per direction, so its output is ``4C'`` wide before the
    projection back to ``C'``.
    """

    def __init__(self, channels: int, axis: str, group_channels: int = 16):
        super().__init__()
        if axis not in ("time", "frequency"):
            raise ValueError(f"axis must be 'time' or 'frequency', got {axis!r}")
        if channels % group_channels:
            raise ValueError(f"group size {group_channels} does not divide {channels}")
        self.channels = channels
        self.axis = axis
        self.norm = nn.GroupNorm(channels // group_channels, channels)
        self.rnn = nn.LSTM(channels, 2 * channels, batch_first=True, bidirectional=True)
        self.fc = nn.Linear(4 * channels, channels)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"RNNBlock: expected [N, {self.channels}, F, T], got {tuple(x.shape)}")
        n, c, f, t = x.shape
        h = self.norm(x)
        if self.axis == "time":
            seq = h.permute(0, 2, 3, 1).reshape(n * f, t, c)
        else:
            seq = h.permute(0, 3, 2, 1).reshape(n * t, f, c)
        seq, _ = self.rnn(seq)
        seq = self.fc(seq)
        if self.axis == "time":
            h = seq.reshape(n, f, t, c).permute(0, 3, 1, 2)
        else:
            h = seq.reshape(n, t, f, c).permute(0, 3, 2, 1)
        return x + h


class IDPM(nn.Module):
    def __init__(self, cfg: IdpmConfig):
        super().__init__()
        self.cfg = cfg
        width = cfg.head_channels
        self.time_rnn = RNNBlock(width, "time", cfg.group_channels)
        self.freq_rnn = RNNBlock(width, "frequency", cfg.group_channels)

    def forward(self, x):
        h = split_heads(x, self.cfg.heads)
        h = self.freq_rnn(self.time_rnn(h))
        return merge_heads(h, self.cfg.heads)


class LatentStage(nn.Sequential):
    """``repeats`` IDPMs with independent parameters."""

    def __init__(self, cfg: IdpmConfig):
        super().__init__(*[IDPM(cfg) for _ in range(cfg.repeats)])
        self.cfg = cfg


def _lstm_flops(lstm: nn.LSTM, seq: torch.Tensor) -> int:
    batch, steps, width = seq.shape
    hidden = lstm.hidden_size
    directions = 2 if lstm.bidirectional else 1
    # four gates, each an (input + hidden) -> hidden matvec, two flops per MAC
    return 2 * 4 * (width + hidden) * hidden * batch * steps * directions


@torch.no_grad()
def count_rnn_flops(module: nn.Module, x: torch.Tensor) -> int:
    """Multiply-add flops spent in every LSTM while ``module(x)`` runs.

    Counted from the shapes each LSTM actually receives, so head splitting
    and axis folding are reflected as executed.
    """
    total = 0

    def hook(m, args, _out):
        nonlocal total
        total += _lstm_flops(m, args[0])

    handles = [m.register_forward_hook(hook) for m in module.modules() if isinstance(m, nn.LSTM)]
    try:
        module(x)
    finally:
        for h in handles:
            h.remove()
    return total
