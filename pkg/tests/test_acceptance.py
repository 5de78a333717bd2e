"""Acceptance suite: one PASS/FAIL line per criterion.

Run with pytest (lines are repeated in the terminal summary) or directly as
``python tests/test_acceptance.py``.
"""
import contextlib
import io
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
from conftest import bandlimited, finite_difference_error, mini_config  # noqa: E402

from dttnet.cli import main as cli_main  # noqa: E402
from dttnet.data import (  # noqa: E402
    PatternBank,
    PatternSampler,
    Segment,
    Track,
    TrackSet,
    build_eval_mixture,
    mix_train_pattern,
)
from dttnet.idpm import IdpmConfig, LatentStage, RNNBlock, merge_heads, split_heads  # noqa: E402
from dttnet.metrics import SdrReport, score_track, sdr, usdr  # noqa: E402
from dttnet.model import ModelConfig, build, parameter_count, separate, waveform_forward  # noqa: E402
from dttnet.spectral import SpectralConfig, Waveform, istft, stft  # noqa: E402
from dttnet.training import TrainConfig, fit, make_optimizer, train_step  # noqa: E402

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


# --- 1: parameter budget --------------------------------------------------------


def check_1():
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli_main(["inspect"])
    lines = buf.getvalue().splitlines()
    total = int(lines[-2].split()[-1])
    rows = sum(int(line.split()[-1]) for line in lines[1:-2])
    millions = float(lines[-1].split("=")[1])
    exact = parameter_count(build(ModelConfig()))
    ok = code == 0 and rows == total == exact and 4.5 <= millions <= 5.5
    return ok, f"total={total} ({millions:.3f} M, band 4.5-5.5 M), table sum={rows}"


# --- 2: STFT round trip ----------------------------------------------------------


def check_2():
    rng = np.random.default_rng(2)
    # 16 bins of guard below the crop keep Hann leakage out of the dropped bins
    x = bandlimited(rng, 2, 6 * 44100, 2048 - 16, 6144)
    worst = 0.0
    for dtype in (np.float64, np.float32):
        y = istft(stft(Waveform(x.astype(dtype)), SpectralConfig()), SpectralConfig()).samples
        worst = max(worst, float(np.abs(y - x).max()))
    return worst <= 1e-4, f"max abs error {worst:.2e} (float64 and float32) <= 1e-4"


# --- 3: head algebra -------------------------------------------------------------


def check_3():
    rng = np.random.default_rng(3)
    gen = torch.Generator().manual_seed(3)
    count, bitwise = 0, True
    for heads in (1, 2, 4):
        for _ in range(100):
            b, c, f, t = rng.integers(1, 4), rng.integers(1, 7), rng.integers(1, 9), rng.integers(1, 9)
            x = torch.randn(int(b), int(heads * c), int(f), int(t), generator=gen)
            y = merge_heads(split_heads(x, heads), heads)
            bitwise &= y.shape == x.shape and y.numpy().tobytes() == x.numpy().tobytes()
            count += 1
    identity = True
    for heads in (1, 2, 4):
        stage = LatentStage(IdpmConfig(32, heads, 2, 8))
        with torch.no_grad():
            for m in stage.modules():
                if isinstance(m, RNNBlock):
                    m.fc.weight.zero_()
                    m.fc.bias.zero_()
            x = torch.randn(2, 32, 5, 7, generator=gen)
            identity &= torch.equal(stage(x), x)
    return bitwise and identity, f"merge(split(x)) bitwise on {count} shapes; zeroed projections identity={identity}"


# --- 4: gradient check -----------------------------------------------------------


def check_4():
    torch.manual_seed(4)
    model = build(mini_config(), seed=4).double()
    x = torch.randn(1, 4, 32, 16, dtype=torch.float64) * 0.5
    with torch.no_grad():
        out = model(x)
        offset = torch.empty_like(out).uniform_(0.5, 1.0) * torch.sign(torch.randn_like(out))
    target = out + offset  # keeps the L1 kink far from every output

    def loss():
        return (model(x) - target).abs().mean()

    tensors = [x] + list(model.parameters())
    err = finite_difference_error(loss, tensors, eps=1e-6, max_entries=24, seed=4, zero_tol=1e-7)
    vanishing = sum(t.grad.norm().item() <= 1e-7 for t in tensors)
    return err <= 1e-3, (
        f"worst relative error {err:.2e} over {len(tensors)} tensors (float64) <= 1e-3; "
        f"{vanishing} have identically zero gradient (biases ahead of instance norm)"
    )


# --- 5: head-split timing --------------------------------------------------------


def check_5():
    rng = np.random.default_rng(5)
    mix = Waveform(bandlimited(rng, 2, 30 * 44100, 2048, 6144).astype(np.float32))
    models = {h: build(ModelConfig(heads=h)).eval() for h in (1, 2)}
    elapsed = {1: 0.0, 2: 0.0}
    for h in (2, 1, 1, 2):  # ABBA order cancels slow drift
        start = time.perf_counter()
        separate(mix, models[h])
        elapsed[h] += time.perf_counter() - start
    ok = elapsed[2] < elapsed[1]
    return ok, f"30 s input, two runs each: H=2 {elapsed[2]:.1f} s vs H=1 {elapsed[1]:.1f} s"


# --- 6: overfit ------------------------------------------------------------------


def band_noise(rng, lo, hi, n=240, window=64):
    z = np.zeros((4, 2, n // 2 + 1), complex)
    a, b = int(lo * n / window), int(hi * n / window)
    z[..., a:b] = rng.normal(size=(4, 2, b - a)) + 1j * rng.normal(size=(4, 2, b - a))
    x = np.fft.irfft(z, n)
    return (0.5 * x / np.abs(x).max()).astype(np.float32)


def check_6(steps=2000):
    rng = np.random.default_rng(0)
    target = band_noise(rng, 1, 10)
    mix = target + band_noise(rng, 14, 28)  # 240 samples -> F=32, T=16
    model = build(mini_config(), seed=0)
    opt = make_optimizer(model, TrainConfig(learning_rate=1e-3, weight_decay=0.0))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    first = None
    for _ in range(steps):
        loss = train_step(model, opt, mix, target, grad_clip=5.0)
        first = loss if first is None else first
        sched.step()
    with torch.no_grad():
        est = waveform_forward(model, torch.from_numpy(mix)).numpy()
    final = float(np.abs(est - target).mean())
    ratio = first / final
    score = usdr(list(zip(target, est)))
    ok = ratio >= 100 and score > 20
    return ok, f"L1 {first:.4f} -> {final:.6f} ({ratio:.1f}x, need >= 100x) in {steps} steps; train uSDR {score:.2f} dB"


# --- 7: metric oracles -----------------------------------------------------------


def check_7():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 44100))
    half = sdr(x, 0.5 * x)
    sr = 1000
    report = SdrReport()
    for k in range(5):
        ref = rng.normal(size=(2, (4 + k) * sr + 77))
        report.tracks.append(score_track(f"t{k}", ref, ref + (0.1 + 0.3 * k) * rng.normal(size=ref.shape), sr))
    records = report.records()
    chunk_ok = all(r["csdr"] == float(np.median([v for v in r["chunk_sdrs"] if v is not None])) for r in records)
    chunk_ok &= all(t.csdr == float(np.median(t.chunks)) for t in report.tracks)
    mean_ok = report.usdr == float(np.mean([r["usdr"] for r in records]))
    mean_ok &= usdr([(t, t * 0.5) for t in rng.normal(size=(3, 2, 500))]) == pytest.approx(half, abs=1e-9)
    ok = abs(half - 6.0206) <= 1e-3 and chunk_ok and mean_ok
    return ok, f"sdr(x, 0.5x)={half:.4f} dB; chunk medians exact={chunk_ok}; uSDR exact mean={mean_ok}"


# --- 8: mixture procedures -------------------------------------------------------


def segment_bank(rng, sr, lengths, names, split):
    patterns = {}
    for name in names:
        segs = [
            Segment(f"{name}_{i}", Waveform(rng.uniform(0.1, 0.5, (1, n)) * rng.choice([-1, 1], (1, n)), sr))
            for i, n in enumerate(lengths)
        ]
        patterns[name] = {"train": [], "valid": [], "test": []}
        patterns[name][split] = segs
    return PatternBank(patterns)


def check_8():
    sr = 100
    rng = np.random.default_rng(8)
    bank = segment_bank(rng, sr, list(rng.integers(4 * sr, 8 * sr, 40)), ["p"], "test")
    song = Waveform(np.zeros((2, 180 * sr)), sr)
    fractions = []
    for seed in range(1000):
        out, _ = build_eval_mixture(song, bank, "p", np.random.default_rng(seed), "test")
        fractions.append(float(np.mean(np.all(out.samples == song.samples, axis=0))))
    lo, hi = min(fractions), max(fractions)
    zero_ok = 0.53 <= lo and hi <= 0.57

    sr = 1000
    window_ok = True
    for length in (4 * sr, 5 * sr, 8 * sr):
        bank = segment_bank(rng, sr, [length], ["p"], "train")
        mix = Waveform(rng.normal(size=(2, 6 * sr)), sr)
        out, _, pl = mix_train_pattern(mix, bank, "p", rng, Waveform(rng.normal(size=(2, 6 * sr)), sr))
        diff = out.samples - mix.samples
        mask = np.zeros(diff.shape[1], bool)
        mask[pl.dst_offset : pl.dst_offset + pl.length] = True
        window_ok &= not np.any(diff[:, ~mask]) and bool(np.all(diff[:, mask] != 0))
        window_ok &= pl.length == min(length, 6 * sr)

    bank = segment_bank(rng, sr, [4 * sr] * 5, ["vocal_chops", "drum_loops", "synth_leads"], "train")
    sampler = PatternSampler(bank, "nvc")
    for seed in range(2000):
        sampler.draw(np.random.default_rng(seed))
    nvc_ok = sampler.draws_for("vocal_chops") == [] and len(sampler.audit) == 2000

    ok = zero_ok and window_ok and nvc_ok
    return ok, (
        f"zero fraction over 1000 runs in [{lo:.4f}, {hi:.4f}] within [0.53, 0.57]; "
        f"difference confined to placed window={window_ok}; NVC vocal_chops draws=0 of {len(sampler.audit)}"
    )


# --- 9: determinism --------------------------------------------------------------

NOT_REPRODUCED = (
    "not reproduced at desk scale: published cSDR values, absolute uSDR and inference times, "
    "and fine-tuning uSDR tables (they need full-dataset training on GPUs)"
)


def check_9(tmp: Path):
    rng = np.random.default_rng(9)
    sr = 8000

    def tracks(count):
        out = []
        for i in range(count):
            v, o = (0.2 * rng.normal(size=(2, 2, sr))).astype(np.float32)
            out.append(Track(f"t{i}", Waveform(v + o, sr), {"vocals": Waveform(v, sr), "other": Waveform(o, sr)}))
        return TrackSet(out)

    train, valid = tracks(2), tracks(1)
    cfg = TrainConfig(epoch_size=4, batch_size=2, max_epochs=2, chunk_seconds=0.25, augment=True, seed=9)
    runs = []
    for k in range(2):
        lines = []
        fit(cfg, build(mini_config(), seed=9), train, valid, tmp / f"run{k}", on_epoch=lines.append)
        runs.append((lines, (tmp / f"run{k}" / "best.ckpt").read_bytes()))
    ok = torch.get_num_threads() == 1 and runs[0] == runs[1]
    return ok, f"two fixed-seed single-threaded runs bitwise identical={runs[0] == runs[1]}; {NOT_REPRODUCED}"


# --- pytest entry points ---------------------------------------------------------


def run(n, *args):
    ok, detail = globals()[f"check_{n}"](*args)
    assert record(n, ok, detail), RESULTS[n]


def test_criterion_1_parameter_budget():
    run(1)


def test_criterion_2_round_trip():
    run(2)


def test_criterion_3_head_algebra():
    run(3)


def test_criterion_4_gradient_check():
    run(4)


@pytest.mark.slow
def test_criterion_5_head_split_faster():
    run(5)


@pytest.mark.slow
def test_criterion_6_overfit():
    run(6)


def test_criterion_7_metric_oracles():
    run(7)


def test_criterion_8_mixture_procedures():
    run(8)


def test_criterion_9_determinism(tmp_path):
    run(9, tmp_path)


if __name__ == "__main__":
    import tempfile

    torch.set_num_threads(1)
    failed = 0
    for n in range(1, 10):
        args = (Path(tempfile.mkdtemp()),) if n == 9 else ()
        try:
            ok, detail = globals()[f"check_{n}"](*args)
        except Exception as e:  # report and keep going
            ok, detail = False, f"error: {e!r}"
        failed += not record(n, ok, detail)
    sys.exit(1 if failed else 0)
