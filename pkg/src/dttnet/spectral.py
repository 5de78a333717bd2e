"""STFT front-end: waveform <-> cropped, channel-packed complex spectrogram.

Packing order along the channel axis is ``[ch0_real, ch0_imag, ch1_real,
ch1_imag]``. This layout is part of the checkpoint contract; a model trained
with one packing cannot be used with another.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import lfilter, lfiltic

__all__ = [
    "AudioError",
    "Waveform",
    "SpectralConfig",
    "ComplexSpectrogram",
    "pack",
    "unpack",
    "stft",
    "istft",
    "stft_tensor",
    "istft_tensor",
    "frame_count",
    "extend_edges",
    "window_sum",
    "read_wav",
    "write_wav",
]


class AudioError(ValueError):
    """Invalid audio input (shape, sample rate, non-finite samples)."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 44100

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise AudioError(f"expected [channels, time], got shape {samples.shape}")
        if samples.shape[0] not in (1, 2):
            raise AudioError(f"expected 1 or 2 channels, got {samples.shape[0]}")
        if samples.shape[1] < 1:
            raise AudioError("waveform is empty")
        if not np.all(np.isfinite(samples)):
            raise AudioError("waveform contains non-finite samples")
        if not np.issubdtype(samples.dtype, np.floating):
            samples = samples.astype(np.float32)
        self.samples = samples

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def seconds(self) -> float:
        return self.length / self.sample_rate


@dataclass(frozen=True)
class SpectralConfig:
    window_size: int = 6144
    hop_length: int = 1024
    window: str = "hann"
    crop_bins: int = 2048
    center_pad: bool = True
    # edge extension used for center padding: "predict", "reflect" or "constant"
    pad_mode: str = "predict"
    # "zeros" or "mixture": how bins above the crop are restored at inversion
    cropped_fill: str = "zeros"

    def __post_init__(self):
        if self.window_size < 2 or self.hop_length < 1:
            raise ValueError("window_size and hop_length must be positive")
        if self.hop_length > self.window_size:
            raise ValueError("hop_length must not exceed window_size")
        if not 1 <= self.crop_bins <= self.full_bins:
            raise ValueError(
                f"crop_bins={self.crop_bins} outside [1, {self.full_bins}]"
            )
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if self.pad_mode not in ("predict", "reflect", "constant"):
            raise ValueError(f"unknown pad_mode {self.pad_mode!r}")
        if self.cropped_fill not in ("zeros", "mixture"):
            raise ValueError(f"unknown cropped_fill {self.cropped_fill!r}")

    @property
    def full_bins(self) -> int:
        return self.window_size // 2 + 1

    def make_window(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.hann_window(self.window_size, periodic=True, dtype=dtype, device=device)


@dataclass
class ComplexSpectrogram:
    """Cropped spectrogram, ``data`` shaped ``[..., 2 * channels, F, T]``."""

    data: torch.Tensor
    full_bins: int
    source_length: int

    @property
    def bins(self) -> int:
        return self.data.shape[-2]

    @property
    def frames(self) -> int:
        return self.data.shape[-1]


def pack(z: torch.Tensor) -> torch.Tensor:
    """Complex ``[..., ch, F, T]`` -> real ``[..., 2*ch, F, T]``, interleaved re/im."""
    stacked = torch.stack([z.real, z.imag], dim=-3)  # [..., ch, 2, F, T]
    shape = stacked.shape
    return stacked.reshape(*shape[:-4], shape[-4] * 2, shape[-2], shape[-1])


def unpack(x: torch.Tensor) -> torch.Tensor:
    if x.shape[-3] % 2:
        raise ValueError(f"packed channel count must be even, got {x.shape[-3]}")
    shape = x.shape
    pairs = x.reshape(*shape[:-3], shape[-3] // 2, 2, shape[-2], shape[-1])
    return torch.complex(pairs[..., 0, :, :], pairs[..., 1, :, :])


def frame_count(length: int, cfg: SpectralConfig) -> int:
    if cfg.center_pad:
        return length // cfg.hop_length + 1
    return 1 + (length - cfg.window_size) // cfg.hop_length


def _predict_tail(x: np.ndarray, count: int, order: int, fit: int) -> np.ndarray | None:
    """Continue ``x`` (rows of 1-D signals) by ``count`` samples using a
    least-squares linear predictor fitted on its last ``fit`` samples.

    Returns None when the recursion blows up, so callers can fall back.
    """
    seg = x[:, -fit:]
    out = np.empty((x.shape[0], count))
    for i, row in enumerate(seg):
        lagged = sliding_window_view(row[:-1], order)
        coef, *_ = np.linalg.lstsq(lagged, row[order:], rcond=None)
        # v[n] = sum_k coef[k] * v[n - order + k]  ->  IIR with zero input
        a = np.concatenate([[1.0], -coef[::-1]])
        zi = lfiltic([1.0], a, row[-order:][::-1])
        out[i], _ = lfilter([1.0], a, np.zeros(count), zi=zi)
    bound = 4.0 * np.abs(seg).max(axis=1, keepdims=True) + 1e-12
    if not np.all(np.isfinite(out)) or np.any(np.abs(out) > bound):
        return None
    return out


def extend_edges(x: torch.Tensor, pad: int, mode: str = "predict") -> torch.Tensor:
    """Pad ``[N, time]`` by ``pad`` samples on both sides.

    ``predict`` extrapolates each edge with a linear predictor, which keeps
    band-limited input band-limited across the boundary (reflection leaves a
    slope discontinuity whose high-frequency content is lost to bin
    cropping). The extension is computed on detached data: gradients do not
    flow into the padded region.
    """
    length = x.shape[-1]
    if mode == "predict":
        fit = min(length, 8192)
        order = min(64, fit // 4)
        if order >= 8:
            arr = x.detach().cpu().double().numpy()
            right = _predict_tail(arr, pad, order, fit)
            left = _predict_tail(arr[:, ::-1].copy(), pad, order, fit)
            if right is not None and left is not None:
                left_t = torch.from_numpy(left[:, ::-1].copy()).to(x)
                right_t = torch.from_numpy(right).to(x)
                return torch.cat([left_t, x, right_t], dim=-1)
        mode = "reflect"
    if mode == "reflect" and length > pad:
        return torch.nn.functional.pad(x[:, None, :], (pad, pad), mode="reflect")[:, 0]
    return torch.nn.functional.pad(x, (pad, pad))


def stft_tensor(x: torch.Tensor, cfg: SpectralConfig, crop: bool = True) -> torch.Tensor:
    """``[..., ch, time]`` real -> packed ``[..., 2*ch, F, T]``."""
    lead = x.shape[:-1]
    length = x.shape[-1]
    flat = x.reshape(-1, length)
    if cfg.center_pad:
        flat = extend_edges(flat, cfg.window_size // 2, cfg.pad_mode)
    z = torch.stft(
        flat,
        n_fft=cfg.window_size,
        hop_length=cfg.hop_length,
        window=cfg.make_window(x.dtype, x.device),
        center=False,
        return_complex=True,
    )
    if crop:
        z = z[..., : cfg.crop_bins, :]
    z = z.reshape(*lead, z.shape[-2], z.shape[-1])
    return pack(z)


def istft_tensor(
    spec: torch.Tensor,
    cfg: SpectralConfig,
    length: int,
    fill: torch.Tensor | None = None,
) -> torch.Tensor:
    """Packed ``[..., 2*ch, F, T]`` -> ``[..., ch, length]``.

    Bins above ``F`` are zero unless ``fill`` (a packed, uncropped spectrogram
    of matching frame count) supplies them.
    """
    full = cfg.full_bins
    bins = spec.shape[-2]
    if bins > full:
        raise ValueError(f"spectrogram has {bins} bins, more than full_bins={full}")
    z = unpack(spec)
    if bins < full:
        if fill is not None:
            high = unpack(fill)[..., bins:full, :]
        else:
            high = z.new_zeros(*z.shape[:-2], full - bins, z.shape[-1])
        z = torch.cat([z, high], dim=-2)
    lead = z.shape[:-2]
    flat = z.reshape(-1, full, z.shape[-1])
    real_dtype = spec.dtype
    y = torch.istft(
        flat,
        n_fft=cfg.window_size,
        hop_length=cfg.hop_length,
        window=cfg.make_window(real_dtype, spec.device),
        center=cfg.center_pad,
        length=length,
    )
    return y.reshape(*lead, length)


def stft(w: Waveform, cfg: SpectralConfig) -> ComplexSpectrogram:
    if w.length < cfg.hop_length:
        raise AudioError(
            f"waveform of {w.length} samples is shorter than one hop ({cfg.hop_length})"
        )
    if not np.all(np.isfinite(w.samples)):
        raise AudioError("waveform contains non-finite samples")
    x = torch.from_numpy(np.ascontiguousarray(w.samples))
    return ComplexSpectrogram(stft_tensor(x, cfg), cfg.full_bins, w.length)


def istft(s: ComplexSpectrogram, cfg: SpectralConfig, sample_rate: int = 44100) -> Waveform:
    if s.bins > s.full_bins or s.full_bins != cfg.full_bins:
        raise ValueError(
            f"spectrogram bins {s.bins} / full_bins {s.full_bins} incompatible with config"
        )
    y = istft_tensor(s.data, cfg, s.source_length)
    return Waveform(y.detach().cpu().numpy(), sample_rate)


def window_sum(cfg: SpectralConfig, n_frames: int, length: int | None = None) -> np.ndarray:
    """Overlap-added squared window, trimmed to the signal region.

    This is the normalizer the inverse transform divides by; it must stay
    bounded away from zero wherever output samples are produced.
    """
    win = cfg.make_window(torch.float64).numpy()
    total = cfg.window_size + cfg.hop_length * (n_frames - 1)
    env = np.zeros(total)
    for t in range(n_frames):
        start = t * cfg.hop_length
        env[start : start + cfg.window_size] += win**2
    if cfg.center_pad:
        half = cfg.window_size // 2
        env = env[half:] if length is not None else env[half : total - half]
    if length is not None:
        if length > len(env):
            raise ValueError(f"{n_frames} frames cover {len(env)} samples, fewer than {length}")
        env = env[:length]
    return env


def read_wav(path: str | Path, expected_rate: int | None = 44100) -> Waveform:
    rate, data = wavfile.read(str(path))
    if expected_rate is not None and rate != expected_rate:
        raise AudioError(f"{path}: sample rate {rate} != expected {expected_rate}")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    elif data.dtype == np.int32:
        samples = data.astype(np.float32) / 2147483648.0
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    samples = samples.T if samples.ndim == 2 else samples[None, :]
    return Waveform(np.ascontiguousarray(samples), rate)


def write_wav(path: str | Path, w: Waveform, subtype: str = "float32") -> None:
    data = np.ascontiguousarray(w.samples.T)
    if subtype == "float32":
        data = data.astype(np.float32)
    elif subtype == "int16":
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown subtype {subtype!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(str(path), w.sample_rate, data)
