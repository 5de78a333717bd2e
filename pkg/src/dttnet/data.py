"""Tracks, chunk sampling, pitch/tempo augmentation and pattern overlays."""
from __future__ import annotations

import logging
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import resample

from .spectral import SpectralConfig, Waveform, istft_tensor, pack, read_wav, stft_tensor, unpack

log = logging.getLogger(__name__)

__all__ = [
    "DataError",
    "Track",
    "TrackSet",
    "load_trackset",
    "sample_chunk",
    "AugmentSpec",
    "PITCH_SEMITONES",
    "STRETCH_PERCENT",
    "phase_vocoder",
    "time_stretch",
    "pitch_shift",
    "augment",
    "Segment",
    "PatternBank",
    "split_patterns",
    "load_pattern_bank",
    "Placement",
    "pad_or_truncate",
    "PatternSampler",
    "mix_train_pattern",
    "build_eval_mixture",
    "overlay_patterns",
    "replay_placements",
    "derive_rng",
    "ChunkSampler",
    "iter_batches",
]

PITCH_SEMITONES = (-2, -1, 0, 1, 2)
STRETCH_PERCENT = (-20, -10, 0, 10, 20)
VOCAL_CHOPS = "vocal_chops"
SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    pass


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; string keys are hashed."""
    words = [int(seed)]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.default_rng(np.random.SeedSequence(words))


# --- tracks -----------------------------------------------------------------


@dataclass
class Track:
    name: str
    mixture: Waveform
    stems: dict[str, Waveform]

    def __post_init__(self):
        for src, w in self.stems.items():
            if w.samples.shape != self.mixture.samples.shape or w.sample_rate != self.mixture.sample_rate:
                raise DataError(f"{self.name}: stem {src} does not match the mixture")

    @property
    def length(self) -> int:
        return self.mixture.length

    def check_consistency(self, tol: float = 1e-3) -> bool:
        """Warn (but do not fail) when the stems do not add up to the mixture."""
        if not self.stems:
            return True
        total = sum(w.samples.astype(np.float64) for w in self.stems.values())
        err = float(np.max(np.abs(total - self.mixture.samples)))
        if err > tol:
            log.warning("%s: mixture differs from stem sum by %.2e", self.name, err)
            return False
        return True


@dataclass
class TrackSet:
    tracks: list[Track]
    split: str = "train"

    def __len__(self):
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks)


def load_trackset(root: str | Path, split: str | None = None, sample_rate: int = 44100) -> TrackSet:
    """Load ``<root>[/<split>]/<track>/{mixture,<source>}.wav``."""
    root = Path(root)
    base = root / split if split and (root / split).is_dir() else root
    if not base.is_dir():
        raise DataError(f"dataset directory {base} does not exist")
    tracks = []
    for d in sorted(p for p in base.iterdir() if p.is_dir()):
        mix_path = d / "mixture.wav"
        if not mix_path.exists():
            continue
        stems = {
            p.stem: read_wav(p, sample_rate)
            for p in sorted(d.glob("*.wav"))
            if p.name != "mixture.wav"
        }
        track = Track(d.name, read_wav(mix_path, sample_rate), stems)
        track.check_consistency()
        tracks.append(track)
    if not tracks:
        raise DataError(f"no tracks with mixture.wav under {base}")
    return TrackSet(tracks, split or "train")


def sample_chunk(ts: TrackSet, seconds: float, rng: np.random.Generator, target: str = "vocals"):
    """Aligned random crop ``(mixture, target)`` from a uniformly chosen track."""
    eligible = []
    for t in ts.tracks:
        size = int(round(seconds * t.mixture.sample_rate))
        if t.length < size:
            log.warning("skipping %s: %d samples is shorter than a %.1f s chunk", t.name, t.length, seconds)
        elif target not in t.stems:
            raise DataError(f"{t.name}: no {target!r} stem")
        else:
            eligible.append(t)
    if not eligible:
        raise DataError("no track is long enough for a chunk")
    track = eligible[rng.integers(len(eligible))]
    size = int(round(seconds * track.mixture.sample_rate))
    start = int(rng.integers(track.length - size + 1))
    sl = slice(start, start + size)
    sr = track.mixture.sample_rate
    return (
        Waveform(track.mixture.samples[:, sl].copy(), sr),
        Waveform(track.stems[target].samples[:, sl].copy(), sr),
    )


# --- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    pitch_semitones: int = 0
    stretch_percent: int = 0

    def __post_init__(self):
        if self.pitch_semitones not in PITCH_SEMITONES:
            raise ValueError(f"pitch_semitones must be one of {PITCH_SEMITONES}")
        if self.stretch_percent not in STRETCH_PERCENT:
            raise ValueError(f"stretch_percent must be one of {STRETCH_PERCENT}")

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "AugmentSpec":
        return cls(int(rng.choice(PITCH_SEMITONES)), int(rng.choice(STRETCH_PERCENT)))

    @property
    def is_identity(self) -> bool:
        return self.pitch_semitones == 0 and self.stretch_percent == 0

    @property
    def duration_factor(self) -> float:
        return 1.0 + self.stretch_percent / 100.0


VOCODER_SPECTRAL = SpectralConfig(window_size=2048, hop_length=512, crop_bins=1025, pad_mode="reflect")


def phase_vocoder(z: np.ndarray, rate: float, hop: int, n_fft: int) -> np.ndarray:
    """Resample STFT frames ``z[..., F, T]`` at ``rate`` with phase propagation.

    ``rate > 1`` speeds up (fewer frames), ``rate < 1`` slows down.
    """
    bins, frames = z.shape[-2:]
    steps = np.arange(0, frames, rate)
    out = np.zeros(z.shape[:-1] + (len(steps),), dtype=np.complex128)
    advance = 2 * np.pi * hop * np.arange(bins) / n_fft
    padded = np.concatenate([z, np.zeros(z.shape[:-1] + (2,), dtype=z.dtype)], axis=-1)
    phase = np.angle(padded[..., 0])
    for t, step in enumerate(steps):
        i = int(step)
        a, b = padded[..., i], padded[..., i + 1]
        frac = step - i
        out[..., t] = ((1 - frac) * np.abs(a) + frac * np.abs(b)) * np.exp(1j * phase)
        dphi = np.angle(b) - np.angle(a) - advance
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + advance + dphi
    return out


def time_stretch(samples: np.ndarray, factor: float, cfg: SpectralConfig = VOCODER_SPECTRAL) -> np.ndarray:
    """Change duration by ``factor`` (1.2 = 20 % longer) without changing pitch."""
    n = samples.shape[-1]
    length = int(round(n * factor))
    x = torch.from_numpy(np.ascontiguousarray(samples, dtype=np.float64))
    z = unpack(stft_tensor(x, cfg, crop=False)).numpy()
    y = phase_vocoder(z, 1.0 / factor, cfg.hop_length, cfg.window_size)
    out = istft_tensor(pack(torch.from_numpy(y)), cfg, length)
    return out.numpy()


def pitch_shift(samples: np.ndarray, semitones: float, cfg: SpectralConfig = VOCODER_SPECTRAL) -> np.ndarray:
    """Stretch by the pitch ratio, then resample back to the original length."""
    n = samples.shape[-1]
    ratio = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(samples, ratio, cfg)
    return resample(stretched, n, axis=-1)


def augment(w: Waveform, spec: AugmentSpec) -> Waveform:
    if spec.is_identity:
        return Waveform(w.samples.copy(), w.sample_rate)
    x = w.samples.astype(np.float64)
    if spec.pitch_semitones:
        x = pitch_shift(x, spec.pitch_semitones)
    if spec.stretch_percent:
        x = time_stretch(x, spec.duration_factor)
    return Waveform(x.astype(w.samples.dtype), w.sample_rate)


# --- pattern bank -------------------------------------------------------------


@dataclass
class Segment:
    name: str
    audio: Waveform


@dataclass
class PatternBank:
    """``patterns[name][split]`` -> list of segments, split in {train, valid, test}."""

    patterns: dict[str, dict[str, list[Segment]]] = field(default_factory=dict)
    seed: int = 0

    def names(self) -> list[str]:
        return sorted(self.patterns)

    def segments(self, pattern: str, split: str) -> list[Segment]:
        if pattern not in self.patterns:
            raise DataError(f"unknown pattern {pattern!r}")
        return self.patterns[pattern][split]

    def manifest(self) -> dict:
        out = {"seed": self.seed, "patterns": self.names()}
        for p in self.names():
            for s in SPLITS:
                out[f"{p}.{s}"] = [seg.name for seg in self.patterns[p][s]]
        return out


def _largest_remainder(n: int, ratio) -> list[int]:
    total = sum(ratio)
    quotas = [n * r / total for r in ratio]
    sizes = [int(q) for q in quotas]
    order = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_patterns(segments: list, ratio=(5, 1, 4), rng: np.random.Generator | None = None):
    """Shuffle and split into disjoint (train, valid, test) lists in ``ratio``."""
    if len(segments) < sum(ratio):
        log.warning("only %d segments; the %s split will be coarse", len(segments), ratio)
    rng = rng or np.random.default_rng(0)
    order = rng.permutation(len(segments))
    sizes = _largest_remainder(len(segments), ratio)
    out, start = [], 0
    for size in sizes:
        out.append([segments[i] for i in order[start : start + size]])
        start += size
    return tuple(out)


def load_pattern_bank(
    root: str | Path, seed: int = 0, ratio=(5, 1, 4), sample_rate: int = 44100
) -> PatternBank:
    """One sub-directory per pattern, each holding WAV segments."""
    root = Path(root)
    bank = PatternBank(seed=seed)
    if not root.is_dir():
        raise DataError(f"pattern directory {root} does not exist")
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        segs = [Segment(p.name, read_wav(p, sample_rate)) for p in sorted(d.glob("*.wav"))]
        for s in segs:
            if not 4.0 <= s.audio.seconds <= 8.0:
                log.warning("%s/%s is %.2f s, outside 4-8 s", d.name, s.name, s.audio.seconds)
        if segs:
            parts = split_patterns(segs, ratio, derive_rng(seed, "split", d.name))
            bank.patterns[d.name] = dict(zip(SPLITS, parts))
    return bank


# --- overlays -----------------------------------------------------------------


@dataclass(frozen=True)
class Placement:
    """``segment[src_offset : src_offset + length]`` added at ``dst_offset``."""

    pattern: str
    segment: str
    src_offset: int
    dst_offset: int
    length: int
    gain: float = 1.0

    def as_list(self) -> list:
        return [self.pattern, self.segment, self.src_offset, self.dst_offset, self.length, self.gain]

    @classmethod
    def from_list(cls, v) -> "Placement":
        return cls(str(v[0]), str(v[1]), int(v[2]), int(v[3]), int(v[4]), float(v[5]))


def _match_channels(seg: np.ndarray, channels: int) -> np.ndarray:
    if seg.shape[0] == channels:
        return seg
    if seg.shape[0] == 1:
        return np.repeat(seg, channels, axis=0)
    return seg.mean(axis=0, keepdims=True)


def pad_or_truncate(seg_len: int, n: int, rng: np.random.Generator) -> tuple[int, int, int]:
    """``(src_offset, dst_offset, length)`` fitting a segment into ``n`` samples.

    Long segments are cropped at a uniform offset; short ones are placed at a
    uniform position and zero-padded around.
    """
    if seg_len >= n:
        return int(rng.integers(seg_len - n + 1)), 0, n
    return 0, int(rng.integers(n - seg_len + 1)), seg_len


class PatternSampler:
    """Chooses pattern segments for fine-tuning and logs every draw.

    ``mode`` is ``base`` (nothing), ``vc`` (all patterns; Vocal Chops also go
    into the target) or ``nvc`` (Vocal Chops never drawn).
    """

    def __init__(self, bank: PatternBank, mode: str = "vc", vocal_chops: str = VOCAL_CHOPS, split: str = "train"):
        if mode not in ("base", "vc", "nvc"):
            raise ValueError(f"unknown mode {mode!r}")
        self.bank = bank
        self.mode = mode
        self.vocal_chops = vocal_chops
        self.split = split
        if mode == "base":
            self.allowed = []
        elif mode == "nvc":
            self.allowed = [p for p in bank.names() if p != vocal_chops]
        else:
            self.allowed = bank.names()
        self.allowed = [p for p in self.allowed if bank.segments(p, split)]
        self.audit: list[tuple[str, str]] = []

    def draw(self, rng: np.random.Generator) -> tuple[str, int] | None:
        if not self.allowed:
            return None
        pattern = self.allowed[rng.integers(len(self.allowed))]
        idx = int(rng.integers(len(self.bank.segments(pattern, self.split))))
        self.audit.append((pattern, self.bank.segments(pattern, self.split)[idx].name))
        return pattern, idx

    def adds_to_target(self, pattern: str) -> bool:
        return self.mode == "vc" and pattern == self.vocal_chops

    def draws_for(self, pattern: str) -> list[str]:
        return [seg for p, seg in self.audit if p == pattern]


def mix_train_pattern(
    mix: Waveform,
    bank: PatternBank,
    pattern: str,
    rng: np.random.Generator,
    target: Waveform | None = None,
    add_to_target: bool = False,
    gain: float = 1.0,
    index: int | None = None,
    split: str = "train",
):
    """Add one pattern segment to a training chunk.

    Returns ``(mix', target', placement)``; the target is returned untouched
    unless ``add_to_target`` is set.
    """
    segs = bank.segments(pattern, split)
    if not segs:
        raise DataError(f"pattern {pattern!r} has no {split} segments")
    if index is None:
        index = int(rng.integers(len(segs)))
    seg = segs[index]
    n = mix.length
    src, dst, length = pad_or_truncate(seg.audio.length, n, rng)
    piece = _match_channels(seg.audio.samples, mix.channels)[:, src : src + length] * gain
    out = mix.samples.copy()
    out[:, dst : dst + length] += piece.astype(out.dtype)
    new_target = target
    if target is not None and add_to_target:
        t = target.samples.copy()
        t[:, dst : dst + length] += piece.astype(t.dtype)
        new_target = Waveform(t, target.sample_rate)
    placement = Placement(pattern, seg.name, src, dst, length, gain)
    return Waveform(out, mix.sample_rate), new_target, placement


def build_eval_mixture(
    song: Waveform,
    bank: PatternBank,
    pattern: str,
    rng: np.random.Generator,
    split: str = "valid",
    zero_fraction: float = 0.55,
    subset_size: int | None = None,
    gain: float = 1.0,
):
    """Overlay a zero-gapped concatenation of pattern segments onto a song.

    A random subset of segments is laid end to end with zero gaps between
    (and around) them so that ``zero_fraction`` of the overlay is silent.
    By default the subset grows until the non-zero budget is filled; the
    last segment is shortened to land on the budget exactly. Gap lengths are
    uniform draws rescaled to the required total.

    Returns ``(song', placements)``.
    """
    n = song.length
    segs = bank.segments(pattern, split)
    budget = int(round((1.0 - zero_fraction) * n))
    order = rng.permutation(len(segs))
    if subset_size is not None:
        order = order[:subset_size]
    chosen, lengths, used = [], [], 0
    for i in order:
        if used >= budget:
            break
        take = min(segs[i].audio.length, budget - used)
        chosen.append(int(i))
        lengths.append(take)
        used += take
    if subset_size is not None and len(chosen) < subset_size:
        log.info("%s: subset reduced to %d segments to fit %d samples", pattern, len(chosen), n)
    if used < budget:
        log.warning("%s: only %d of %d overlay samples filled", pattern, used, budget)
    if not chosen:
        return Waveform(song.samples.copy(), song.sample_rate), []

    zeros = n - used
    w = rng.uniform(size=len(chosen) + 1)
    gaps = np.floor(w / w.sum() * zeros).astype(int)
    gaps[: zeros - gaps.sum()] += 1

    out = song.samples.copy()
    placements = []
    pos = 0
    for k, (i, length) in enumerate(zip(chosen, lengths)):
        pos += int(gaps[k])
        seg = segs[i]
        piece = _match_channels(seg.audio.samples, song.channels)[:, :length] * gain
        out[:, pos : pos + length] += piece.astype(out.dtype)
        placements.append(Placement(pattern, seg.name, 0, pos, length, gain))
        pos += length
    return Waveform(out, song.sample_rate), placements


def overlay_patterns(
    song: Waveform,
    bank: PatternBank,
    patterns: list[str],
    seed: int,
    track_key: str,
    split: str = "test",
    **kw,
):
    """Apply each pattern's overlay in turn.

    Every pattern draws from its own generator keyed on ``(seed, pattern,
    track_key)``, so the combined overlay equals the sum of the individual
    ones.
    """
    placements = []
    for p in patterns:
        song, pl = build_eval_mixture(song, bank, p, derive_rng(seed, "eval", p, track_key), split, **kw)
        placements.extend(pl)
    return song, placements


def replay_placements(song: Waveform, bank: PatternBank, placements, split: str) -> Waveform:
    out = song.samples.copy()
    for pl in placements:
        seg = next(s for s in bank.segments(pl.pattern, split) if s.name == pl.segment)
        piece = _match_channels(seg.audio.samples, song.channels)
        out[:, pl.dst_offset : pl.dst_offset + pl.length] += (
            piece[:, pl.src_offset : pl.src_offset + pl.length] * pl.gain
        ).astype(out.dtype)
    return Waveform(out, song.sample_rate)


# --- training stream ------------------------------------------------------------


class ChunkSampler:
    """Reproducible training chunks.

    Chunk ``(epoch, index)`` draws from its own generator, so the stream does
    not depend on how many workers produce it.
    """

    def __init__(
        self,
        tracks: TrackSet,
        target: str = "vocals",
        seconds: float = 6.0,
        seed: int = 0,
        augment: bool = True,
        patterns: PatternSampler | None = None,
    ):
        self.tracks = tracks
        self.target = target
        self.seconds = seconds
        self.seed = seed
        self.augment = augment
        self.patterns = patterns

    def draw(self, epoch: int, index: int) -> tuple[np.ndarray, np.ndarray]:
        rng = derive_rng(self.seed, epoch, index)
        spec = AugmentSpec.draw(rng) if self.augment else AugmentSpec()
        mix, tgt = sample_chunk(self.tracks, self.seconds / spec.duration_factor, rng, self.target)
        if not spec.is_identity:
            rest = Waveform(mix.samples - tgt.samples, mix.sample_rate)
            tgt, rest = augment(tgt, spec), augment(rest, spec)
            mix = Waveform(tgt.samples + rest.samples, mix.sample_rate)
        size = int(round(self.seconds * mix.sample_rate))
        mix = Waveform(_fit_length(mix.samples, size), mix.sample_rate)
        tgt = Waveform(_fit_length(tgt.samples, size), tgt.sample_rate)
        if self.patterns is not None:
            choice = self.patterns.draw(rng)
            if choice is not None:
                pattern, idx = choice
                mix, tgt, _ = mix_train_pattern(
                    mix, self.patterns.bank, pattern, rng, tgt,
                    add_to_target=self.patterns.adds_to_target(pattern), index=idx,
                    split=self.patterns.split,
                )
        return mix.samples, tgt.samples


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if x.shape[-1] >= n:
        return x[:, :n]
    return np.pad(x, ((0, 0), (0, n - x.shape[-1])))


def iter_batches(sampler: ChunkSampler, epoch: int, epoch_size: int, batch_size: int, workers: int = 0):
    """Yield ``(mix, target)`` float32 arrays ``[B, ch, n]`` for one epoch.

    With ``workers > 0`` chunks are produced by a thread pool through a
    bounded window of pending futures; order and content are unchanged.
    """
    def batches(chunks):
        buf = []
        for c in chunks:
            buf.append(c)
            if len(buf) == batch_size:
                yield _stack(buf)
                buf = []
        if buf:
            yield _stack(buf)

    if workers <= 0:
        yield from batches(sampler.draw(epoch, i) for i in range(epoch_size))
        return
    with ThreadPoolExecutor(workers) as pool:
        def produce():
            pending = deque()
            for i in range(epoch_size):
                pending.append(pool.submit(sampler.draw, epoch, i))
                if len(pending) >= 2 * workers * batch_size:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()

        yield from batches(produce())


def _stack(chunks):
    mix = np.stack([m for m, _ in chunks]).astype(np.float32)
    tgt = np.stack([t for _, t in chunks]).astype(np.float32)
    return mix, tgt
