"""Full network assembly, chunked inference and parameter accounting."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import BlockConfig, Downsample, TFCTDFv3, Upsample
from .idpm import IdpmConfig, LatentStage
from .spectral import AudioError, SpectralConfig, Waveform, istft_tensor, stft_tensor

__all__ = [
    "SOURCES",
    "ModelConfig",
    "DTTNet",
    "IdentityModel",
    "build",
    "parameter_table",
    "parameter_count",
    "fit_frames",
    "waveform_forward",
    "separate",
]

SOURCES = ("vocals", "drums", "bass", "other")


@dataclass(frozen=True)
class ModelConfig:
    source: str = "vocals"
    g: int = 32
    # two levels keep the default build near the 5.0 M budget; see README
    depth: int = 2
    repeats: int = 4
    heads: int = 2
    bf: int = 8
    group_channels: int = 16
    block_version: str = "v3"
    activation: str = "gelu"
    norm: str = "instance"
    tfc_convs: int = 3
    audio_channels: int = 2
    sample_rate: int = 44100
    spectral: SpectralConfig = field(default_factory=SpectralConfig)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if min(self.g, self.depth, self.heads, self.bf) < 1 or self.repeats < 0:
            raise ValueError("g, depth, heads and bf must be positive, repeats non-negative")
        if self.block_version == "v2":
            raise NotImplementedError("TFC-TDF v2 blocks are not implemented; use block_version='v3'")
        if self.block_version != "v3":
            raise ValueError(f"unknown block_version {self.block_version!r}")
        if self.audio_channels not in (1, 2):
            raise ValueError("audio_channels must be 1 or 2")
        bins = self.spectral.crop_bins
        if bins % (2**self.depth):
            raise ValueError(f"crop_bins={bins} not divisible by 2**depth={2**self.depth}")
        for level in range(self.depth + 1):
            if (bins >> level) % self.bf:
                raise ValueError(f"bf={self.bf} does not divide {bins >> level} bins at level {level}")
        # raises on head / group-norm divisibility
        self.idpm

    @classmethod
    def for_source(cls, source: str = "vocals", **overrides) -> "ModelConfig":
        """Per-source defaults: bass uses an 864-bin crop and bf=2."""
        if source == "bass":
            defaults = dict(bf=2, spectral=SpectralConfig(crop_bins=864))
        else:
            defaults = dict(bf=8, spectral=SpectralConfig(crop_bins=2048))
        defaults.update(overrides)
        return cls(source=source, **defaults)

    @property
    def input_channels(self) -> int:
        return 2 * self.audio_channels

    @property
    def latent_channels(self) -> int:
        return self.g * (self.depth + 1)

    @property
    def channel_ladder(self) -> list[int]:
        return [self.g * (i + 1) for i in range(self.depth + 1)]

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(bf=self.bf, activation=self.activation, norm=self.norm, tfc_convs=self.tfc_convs)

    @property
    def idpm(self) -> IdpmConfig:
        return IdpmConfig(self.latent_channels, self.heads, self.repeats, self.group_channels)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "spectral"}
        out["spectral"] = {f.name: getattr(self.spectral, f.name) for f in fields(self.spectral)}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        spectral = SpectralConfig(**d.pop("spectral", {}))
        return cls(spectral=spectral, **d)


class DTTNet(nn.Module):
    """Complex-spectrogram UNet: TFC-TDF v3 encoder/decoder around a BLSTM latent.

    Input and output are packed spectrograms ``[B, 2*audio_channels, F, T]``;
    the output is the target's spectrogram estimate (not a mask). Decoder
    features are multiplied element-wise with the matching encoder features.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g, bcfg = cfg.g, cfg.block
        ladder = cfg.channel_ladder
        bins = [cfg.spectral.crop_bins >> i for i in range(cfg.depth + 1)]

        self.first_conv = nn.Conv2d(cfg.input_channels, g, 1)
        self.encoder = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for i in range(cfg.depth):
            self.encoder.append(TFCTDFv3(ladder[i], bins[i], bcfg))
            self.downsample.append(Downsample(ladder[i], g, bcfg))
        self.bottleneck = TFCTDFv3(ladder[-1], bins[-1], bcfg)
        self.latent = LatentStage(cfg.idpm)
        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.upsample.append(Upsample(ladder[i + 1], g, bcfg))
            self.decoder.append(TFCTDFv3(ladder[i], bins[i], bcfg))
        self.final_conv = nn.Conv2d(g, cfg.input_channels, 1)

    def check_input(self, x: torch.Tensor):
        cfg = self.cfg
        step = 2**cfg.depth
        if (
            x.dim() != 4
            or x.shape[1] != cfg.input_channels
            or x.shape[2] != cfg.spectral.crop_bins
            or x.shape[3] % step
        ):
            raise ValueError(
                f"expected [B, {cfg.input_channels}, {cfg.spectral.crop_bins}, T] with T "
                f"divisible by {step}, got {tuple(x.shape)}"
            )

    def encode(self, x):
        h = self.first_conv(x)
        skips = []
        for block, down in zip(self.encoder, self.downsample):
            h = block(h)
            skips.append(h)
            h = down(h)
        return h, skips

    def decode(self, h, skips=None):
        """Run the decoder; ``skips=None`` drops the multiplicative skips."""
        for i, (up, block) in enumerate(zip(self.upsample, self.decoder)):
            h = up(h)
            if skips is not None:
                h = h * skips[-1 - i]
            h = block(h)
        return self.final_conv(h)

    def forward(self, x):
        self.check_input(x)
        h, skips = self.encode(x)
        h = self.latent(self.bottleneck(h))
        return self.decode(h, skips)


class IdentityModel(nn.Module):
    """Stand-in network that returns its input spectrogram unchanged."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg

    def forward(self, x):
        return x


def _init_lstm(lstm: nn.LSTM):
    for name, p in lstm.named_parameters():
        if name.startswith("weight"):
            for gate in p.data.chunk(4, dim=0):
                nn.init.orthogonal_(gate)
        else:
            nn.init.zeros_(p)


def build(cfg: ModelConfig, seed: int = 0) -> DTTNet:
    """Construct a model with deterministic initialization.

    Convolutions and linear layers keep PyTorch's Kaiming-uniform default;
    every BLSTM gate matrix is initialized orthogonally with zero biases.
    The global torch RNG is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DTTNet(cfg)
        for m in model.modules():
            if isinstance(m, nn.LSTM):
                _init_lstm(m)
    return model


def parameter_table(model: nn.Module) -> list[tuple[str, tuple[int, ...], int]]:
    return [(name, tuple(p.shape), p.numel()) for name, p in model.named_parameters()]


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def fit_frames(spec: torch.Tensor, depth: int) -> torch.Tensor:
    """Zero-pad the frame axis up to the next multiple of ``2**depth``."""
    step = 2**depth
    extra = -spec.shape[-1] % step
    return F.pad(spec, (0, extra)) if extra else spec


def waveform_forward(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Differentiable ``[B, ch, n]`` mixture -> ``[B, ch, n]`` target estimate.

    The STFT frame count is padded with zero frames to what the network
    accepts and the extra frames are dropped before inversion.
    """
    cfg: ModelConfig = model.cfg
    scfg = cfg.spectral
    n = x.shape[-1]
    spec = stft_tensor(x, scfg)
    frames = spec.shape[-1]
    out = model(fit_frames(spec, cfg.depth))[..., :frames]
    fill = stft_tensor(x, scfg, crop=False) if scfg.cropped_fill == "mixture" else None
    return istft_tensor(out, scfg, n, fill)


def _chunk_starts(n: int, chunk: int, step: int) -> list[int]:
    if n <= chunk:
        return [0]
    starts = list(range(0, n - chunk, step))
    starts.append(n - chunk)
    return starts


def _crossfade_weights(starts, chunk, n) -> list[np.ndarray]:
    """Linear ramps over each region shared with a neighbouring chunk."""
    ends = [min(s + chunk, n) for s in starts]
    weights = []
    for k, (s, e) in enumerate(zip(starts, ends)):
        w = np.ones(e - s)
        if k > 0:
            left = max(ends[k - 1] - s, 0)
            w[:left] = (np.arange(left) + 0.5) / left
        if k + 1 < len(starts):
            right = max(e - starts[k + 1], 0)
            if right:
                w[e - s - right :] = np.minimum(
                    w[e - s - right :], (np.arange(right, 0, -1) - 0.5) / right
                )
        weights.append(w)
    return weights


@torch.no_grad()
def separate(
    mix: Waveform,
    model: nn.Module,
    overlap: float = 0.5,
    chunk_seconds: float = 6.0,
) -> Waveform:
    """Chunked inference over a whole track, cross-fading overlapping chunks."""
    cfg: ModelConfig = model.cfg
    if mix.sample_rate != cfg.sample_rate:
        raise AudioError(f"sample rate {mix.sample_rate} != model rate {cfg.sample_rate}")
    if mix.channels != cfg.audio_channels:
        raise AudioError(f"{mix.channels}-channel input for a {cfg.audio_channels}-channel model")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must be in [0, 1)")
    n = mix.length
    chunk = int(round(chunk_seconds * mix.sample_rate))
    step = max(1, chunk - int(round(overlap * chunk)))
    starts = _chunk_starts(n, chunk, step)
    weights = _crossfade_weights(starts, chunk, n)

    dtype = next(model.parameters(), torch.empty(0)).dtype
    x = torch.from_numpy(np.ascontiguousarray(mix.samples)).to(dtype)
    acc = np.zeros((mix.channels, n))
    norm = np.zeros(n)
    model.eval()
    for s, w in zip(starts, weights):
        seg = x[:, s : s + len(w)]
        y = waveform_forward(model, seg[None])[0].double().numpy()
        acc[:, s : s + len(w)] += y * w
        norm[s : s + len(w)] += w
    out = (acc / norm).astype(mix.samples.dtype)
    return Waveform(out, mix.sample_rate)
