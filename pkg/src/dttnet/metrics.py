"""Energy-ratio SDR, utterance-level mean (uSDR) and 1 s chunk median (cSDR).

These are plain energy ratios, not BSS-eval with distortion filters, so
absolute cSDR numbers are not comparable with BSS-eval tables.

Constants:
    SDR_CAP_DB       error energy is floored at ``1e-10 * ||ref||^2``, so a
                     perfect estimate scores +100 dB.
    SILENCE_ENERGY   references below this total energy are silent: their
                     SDR is NaN and they are left out of every aggregate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .spectral import Waveform

__all__ = [
    "SDR_CAP_DB",
    "SILENCE_ENERGY",
    "MetricError",
    "sdr",
    "usdr",
    "chunk_sdrs",
    "csdr",
    "TrackScore",
    "SdrReport",
    "score_track",
]

SDR_CAP_DB = 100.0
SILENCE_ENERGY = 1e-12


class MetricError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    if isinstance(x, Waveform):
        x = x.samples
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def sdr(ref, est) -> float:
    """``10 log10(||ref||^2 / ||ref - est||^2)`` summed over channels.

    Returns NaN for a silent reference.
    """
    r, e = _as_array(ref), _as_array(est)
    if r.shape != e.shape:
        raise MetricError(f"shape mismatch: ref {r.shape} vs est {e.shape}")
    num = float(np.sum(r**2))
    if num < SILENCE_ENERGY:
        return math.nan
    den = max(float(np.sum((r - e) ** 2)), num * 10 ** (-SDR_CAP_DB / 10))
    return 10 * math.log10(num / den)


def usdr(tracks) -> float:
    """Mean SDR over ``(ref, est)`` pairs, skipping silent references."""
    values = [sdr(r, e) for r, e in tracks]
    if not values:
        raise MetricError("no tracks")
    valid = [v for v in values if not math.isnan(v)]
    if not valid:
        raise MetricError("all tracks have silent references")
    return float(np.mean(valid))


def chunk_sdrs(ref, est, sample_rate: int = 44100, seconds: float = 1.0) -> np.ndarray:
    """Per-chunk SDR over non-overlapping chunks; a trailing partial chunk is dropped."""
    r, e = _as_array(ref), _as_array(est)
    if r.shape != e.shape:
        raise MetricError(f"shape mismatch: ref {r.shape} vs est {e.shape}")
    size = int(round(seconds * sample_rate))
    count = r.shape[1] // size
    return np.array(
        [sdr(r[:, i * size : (i + 1) * size], e[:, i * size : (i + 1) * size]) for i in range(count)]
    )


def csdr(ref, est, sample_rate: int = 44100, seconds: float = 1.0) -> float:
    values = chunk_sdrs(ref, est, sample_rate, seconds)
    valid = values[~np.isnan(values)]
    if valid.size == 0:
        raise MetricError("no non-silent chunks of full length")
    return float(np.median(valid))


@dataclass
class TrackScore:
    track_id: str
    usdr: float
    csdr: float
    chunks: np.ndarray

    @property
    def chunk_count(self) -> int:
        return int(np.sum(~np.isnan(self.chunks)))

    @property
    def silent(self) -> bool:
        return math.isnan(self.usdr)

    def to_record(self) -> dict:
        return {
            "track": self.track_id,
            "usdr": None if math.isnan(self.usdr) else self.usdr,
            "csdr": None if math.isnan(self.csdr) else self.csdr,
            "chunks": self.chunk_count,
            "chunk_sdrs": [None if math.isnan(v) else float(v) for v in self.chunks],
            "silent": self.silent,
            "perfect": self.usdr >= SDR_CAP_DB,
        }


def score_track(track_id: str, ref, est, sample_rate: int = 44100) -> TrackScore:
    chunks = chunk_sdrs(ref, est, sample_rate)
    valid = chunks[~np.isnan(chunks)]
    value = float(np.median(valid)) if valid.size else math.nan
    return TrackScore(track_id, sdr(ref, est), value, chunks)


@dataclass
class SdrReport:
    tracks: list[TrackScore] = field(default_factory=list)

    def _valid(self):
        return [t for t in self.tracks if not t.silent]

    @property
    def usdr(self) -> float:
        valid = self._valid()
        if not valid:
            raise MetricError("no non-silent tracks")
        return float(np.mean([t.usdr for t in valid]))

    @property
    def csdr(self) -> float:
        """Median over all valid chunks pooled across tracks."""
        pooled = np.concatenate([t.chunks for t in self.tracks]) if self.tracks else np.array([])
        pooled = pooled[~np.isnan(pooled)]
        if pooled.size == 0:
            raise MetricError("no valid chunks")
        return float(np.median(pooled))

    @property
    def csdr_track_median(self) -> float:
        """Median of per-track cSDR values."""
        values = [t.csdr for t in self.tracks if not math.isnan(t.csdr)]
        if not values:
            raise MetricError("no valid chunks")
        return float(np.median(values))

    def records(self) -> list[dict]:
        return [t.to_record() for t in self.tracks]

    def summary(self) -> str:
        lines = [f"{'track':<32} {'uSDR':>9} {'cSDR':>9} {'chunks':>7}"]
        for t in self.tracks:
            u = "silent" if t.silent else f"{t.usdr:9.3f}"
            c = "-" if math.isnan(t.csdr) else f"{t.csdr:9.3f}"
            lines.append(f"{t.track_id:<32} {u:>9} {c:>9} {t.chunk_count:>7}")
        lines.append("-" * len(lines[0]))
        lines.append(f"{'uSDR (mean over tracks)':<32} {self.usdr:9.3f}")
        lines.append(f"{'cSDR (median, pooled chunks)':<32} {'':>9} {self.csdr:9.3f}")
        lines.append(f"{'cSDR (median of track cSDRs)':<32} {'':>9} {self.csdr_track_median:9.3f}")
        return "\n".join(lines)
