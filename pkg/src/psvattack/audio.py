"""Time-domain audio primitives: waveforms, PCM WAV I/O, tiling, clipping, SNR.

All amplitudes are dimensionless floats with nominal range [-1, 1].  Digital
mixing never clamps; saturation is handled only when writing 16-bit PCM.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CANONICAL_RATE = 16000

# PCM scaling is deliberately asymmetric: load divides by 32768, save
# multiplies by 32767 and rounds.  The round trip is bounded by
# (0.5 + |sample|) / 32768 per sample.
PCM_LOAD_SCALE = 32768.0
PCM_SAVE_SCALE = 32767.0


class WavFormatError(Exception):
    """Raised for WAV files that are not mono 16-bit PCM RIFF/WAVE."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform samples must be 1-D, got shape {samples.shape}")
        if samples.shape[0] < 1:
            raise ValueError("waveform must contain at least one sample")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class Perturbation:
    """Fixed-length perturbation segment constrained to the l-inf ball of radius epsilon."""

    segment: Waveform
    epsilon: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        peak = float(np.max(np.abs(self.segment.samples))) if len(self.segment) else 0.0
        if peak > self.epsilon + 1e-12:
            raise ValueError(f"segment peak {peak} exceeds epsilon {self.epsilon}")

    def __len__(self) -> int:
        return len(self.segment)


def load_wav(path, expect_rate: int | None = None) -> Waveform:
    """Read a mono 16-bit PCM RIFF/WAVE file into a float waveform in [-1, 1].

    Integer samples are divided by 32768.  Raises FileNotFoundError for a
    missing file and WavFormatError (with a distinct message) for non-PCM
    encodings, multichannel layouts, truncated headers, or a sample rate
    other than expect_rate when given.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: non-PCM encoding {wf.getcomptype()!r}")
            if wf.getnchannels() != 1:
                raise WavFormatError(f"{path}: expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise WavFormatError(f"{path}: expected 16-bit samples, got {8 * wf.getsampwidth()}-bit")
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except wave.Error as exc:
        raise WavFormatError(f"{path}: malformed or truncated WAV header ({exc})") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated WAV file") from exc
    if n < 1 or len(raw) < 2 * n:
        raise WavFormatError(f"{path}: truncated WAV data (expected {n} frames)")
    if expect_rate is not None and rate != expect_rate:
        raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {expect_rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2", count=n)
    return Waveform(pcm.astype(np.float64) / PCM_LOAD_SCALE, rate)


def save_wav(path, w: Waveform) -> None:
    """Write a waveform as mono 16-bit PCM, rounding samples scaled by 32767.

    All samples must already lie in [-1, 1]; out-of-range values signal a
    missing clamp upstream and raise ValueError.
    """
    peak = float(np.max(np.abs(w.samples)))
    if peak > 1.0:
        raise ValueError(f"sample magnitude {peak} exceeds 1.0; clamp before saving")
    pcm = np.rint(w.samples * PCM_SAVE_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


def tile_to_length(segment: Waveform, length: int) -> Waveform:
    """Repeat a segment until it covers exactly `length` samples (offset 0)."""
    if length < 1:
        raise ValueError(f"target length must be >= 1, got {length}")
    n = len(segment)
    if n == 0:
        raise ValueError("cannot tile an empty segment")
    reps = -(-length // n)
    out = np.tile(segment.samples, reps)[:length]
    return Waveform(out, segment.sample_rate)


def tile_array(segment: np.ndarray, length: int) -> np.ndarray:
    """Array-level tiling used in the attack inner loop (same semantics as tile_to_length)."""
    n = segment.shape[0]
    reps = -(-length // n)
    return np.tile(segment, reps)[:length]


def fold_tiled_gradient(grad_tiled: np.ndarray, period: int) -> np.ndarray:
    """Chain rule through tiling: sum gradient contributions of all tiled copies.

    Position j of the tiled signal reads segment position j mod period, so the
    segment gradient at p is the sum over all j congruent to p.
    """
    n = grad_tiled.shape[-1]
    pad = (-n) % period
    if pad:
        grad_tiled = np.concatenate(
            [grad_tiled, np.zeros(grad_tiled.shape[:-1] + (pad,), dtype=grad_tiled.dtype)], axis=-1
        )
    folded = grad_tiled.reshape(grad_tiled.shape[:-1] + (-1, period)).sum(axis=-2)
    return folded


def clip_inf(w: Waveform, epsilon: float) -> Waveform:
    """Element-wise clipping into [-epsilon, epsilon]."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    return Waveform(np.clip(w.samples, -epsilon, epsilon), w.sample_rate)


def mix(x: Waveform, d: Waveform) -> Waveform:
    """Element-wise sum of two equal-length waveforms.  No clamping."""
    if x.sample_rate != d.sample_rate:
        raise ValueError(f"sample rate mismatch: {x.sample_rate} vs {d.sample_rate}")
    if len(x) != len(d):
        raise ValueError(f"length mismatch: {len(x)} vs {len(d)}")
    return Waveform(x.samples + d.samples, x.sample_rate)


def snr_db(clean: Waveform, perturbation: Waveform) -> float:
    """Speech-to-perturbation ratio 20*log10(||clean||_2 / ||perturbation||_2)."""
    if len(clean) != len(perturbation):
        raise ValueError(f"length mismatch: {len(clean)} vs {len(perturbation)}")
    clean_norm = float(np.linalg.norm(clean.samples))
    pert_norm = float(np.linalg.norm(perturbation.samples))
    if clean_norm == 0.0:
        raise ValueError("clean signal has zero energy")
    if pert_norm == 0.0:
        return float("inf")
    return 20.0 * np.log10(clean_norm / pert_norm)


def pcm16_bytes(w: Waveform) -> bytes:
    """Raw little-endian PCM payload as written by save_wav (for hashing/round trips)."""
    pcm = np.rint(w.samples * PCM_SAVE_SCALE).astype("<i2")
    return pcm.tobytes()


def _read_riff_chunks(path) -> list[tuple[bytes, int]]:
    """List (chunk id, size) pairs of a RIFF file.  Debug helper, not used by load_wav."""
    out = []
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12 or header[:4] != b"RIFF" or header[8:12] != b"WAVE":
            raise WavFormatError(f"{path}: not a RIFF/WAVE file")
        while True:
            head = fh.read(8)
            if len(head) < 8:
                break
            cid, size = struct.unpack("<4sI", head)
            out.append((cid, size))
            fh.seek(size + (size & 1), 1)
    return out
