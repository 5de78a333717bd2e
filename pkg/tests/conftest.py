import sys

import numpy as np
import pytest
import torch

from dttnet.model import ModelConfig
from dttnet.spectral import SpectralConfig

torch.set_num_threads(1)

SMALL_SPECTRAL = SpectralConfig(window_size=64, hop_length=16, crop_bins=32)


def bandlimited(rng, channels, n, max_bin, window_size, scale=0.5):
    """Noise whose DFT is zero at and above ``max_bin`` of a ``window_size`` STFT."""
    cutoff = int(np.floor(max_bin * n / window_size))
    z = np.zeros((channels, n // 2 + 1), complex)
    z[:, 1:cutoff] = rng.normal(size=(channels, cutoff - 1)) + 1j * rng.normal(size=(channels, cutoff - 1))
    x = np.fft.irfft(z, n)
    return scale * x / np.abs(x).max()


def mini_config(**kw) -> ModelConfig:
    """g=4, D=2, L=1, H=2 on a 64/16 STFT cropped to 32 bins."""
    base = dict(
        g=4, depth=2, repeats=1, heads=2, bf=4, group_channels=3,
        spectral=SMALL_SPECTRAL, sample_rate=8000,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference_error(fn, tensors, eps=1e-3, max_entries=None, seed=0, zero_tol=0.0):
    """Worst relative error between autograd and central differences.

    ``fn`` maps the given float64 leaf tensors to a scalar. Relative error is
    ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, 1e-8)`` over the whole gradient
    vector of each tensor (optionally a random subset of entries). Tensors
    whose sampled gradients are both below ``zero_tol`` in norm count as
    agreeing; a bias feeding straight into instance norm has an exactly zero
    gradient that differences only resolve to rounding noise.
    """
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    fn().backward()
    worst = 0.0
    gen = np.random.default_rng(seed)
    for t in tensors:
        auto = t.grad.detach().clone().reshape(-1)
        flat = t.detach().reshape(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and len(idx) > max_entries:
            idx = gen.choice(idx, max_entries, replace=False)
        num = torch.zeros(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                t.view(-1)[i] = orig + eps
                up = fn().item()
                t.view(-1)[i] = orig - eps
                down = fn().item()
                t.view(-1)[i] = orig
                num[j] = (up - down) / (2 * eps)
        a = auto[idx]
        if max(a.norm().item(), num.norm().item()) <= zero_tol:
            continue
        err = (a - num).norm() / max(a.norm().item(), num.norm().item(), 1e-8)
        worst = max(worst, err.item())
    return worst


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
