"""Complex-spectrogram UNet for music source separation, with training, SDR metrics and pattern-overlay mixtures."""
from .model import DTTNet, IdentityModel, ModelConfig, build, separate
from .spectral import SpectralConfig, Waveform, istft, read_wav, stft, write_wav

__version__ = "0.1.0"

__all__ = [
    "DTTNet",
    "IdentityModel",
    "ModelConfig",
    "SpectralConfig",
    "Waveform",
    "build",
    "istft",
    "read_wav",
    "separate",
    "stft",
    "write_wav",
]
