"""Frequency-domain primitives: STFT, Mel filterbank, convolution, sine sweeps, RIRs.

Defaults target 16 kHz audio: frame 512 (32 ms), hop 160 (10 ms), 40 Mel
filters.  All transforms are plain functions of their inputs; nothing caches
state, so everything here is safe to call from multiple threads.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio import Waveform, load_wav, save_wav

DEFAULT_FRAME = 512
DEFAULT_HOP = 160
DEFAULT_N_MELS = 40
MEL_LOG_FLOOR = 1e-10

# 60 dB of decay corresponds to a field amplitude factor of 10^-3; the rate
# constant below is used verbatim as the synthetic-reflection envelope bound.
T60_DECAY_RATE = 6.91

RIR_CROP_BEFORE = 64
RIR_CROP_LEN = 4096


@dataclass(frozen=True)
class ComplexSpectrogram:
    frames: np.ndarray  # [n_frames, n_bins] complex
    frame_length: int
    hop: int
    sample_rate: int

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class MelSpec:
    frames: np.ndarray  # [n_frames, n_mels] log energies
    n_mels: int


@dataclass(frozen=True)
class Rir:
    """Finite impulse response, energy-normalized to unit l2 norm."""

    taps: Waveform
    label: str = ""

    def __len__(self) -> int:
        return len(self.taps)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, frame_length: int, hop: int) -> int:
    return (n_samples - frame_length) // hop + 1


def frame_signal(x: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    """Slice the last axis into overlapping frames: [..., L] -> [..., T, frame_length].

    Returns a read-only strided view; copy before mutating.
    """
    n = x.shape[-1]
    if n < frame_length:
        raise ValueError(f"signal of {n} samples is shorter than one frame ({frame_length})")
    t = frame_count(n, frame_length, hop)
    shape = x.shape[:-1] + (t, frame_length)
    strides = x.strides[:-1] + (hop * x.strides[-1], x.strides[-1])
    view = np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides)
    view.flags.writeable = False
    return view


def overlap_add(frames: np.ndarray, hop: int, n_samples: int) -> np.ndarray:
    """Adjoint of frame_signal: scatter-add frames back onto the signal axis."""
    t, frame_length = frames.shape[-2:]
    out = np.zeros(frames.shape[:-2] + (n_samples,), dtype=frames.dtype)
    for i in range(t):
        out[..., i * hop : i * hop + frame_length] += frames[..., i, :]
    return out


def stft(
    w: Waveform,
    frame_length: int = DEFAULT_FRAME,
    hop: int = DEFAULT_HOP,
    window: str = "hann",
) -> ComplexSpectrogram:
    """Windowed one-sided DFT of overlapping frames (no padding, no centering).

    Linear in the input frame-by-frame and bin-by-bin.  `window` is "hann"
    (default) or "rect".
    """
    if frame_length < 2 or frame_length & (frame_length - 1):
        raise ValueError(f"frame_length must be a power of two, got {frame_length}")
    if not 1 <= hop <= frame_length:
        raise ValueError(f"hop must be in [1, frame_length], got {hop}")
    if window == "hann":
        win = hann_window(frame_length)
    elif window == "rect":
        win = np.ones(frame_length)
    else:
        raise ValueError(f"unknown window {window!r}")
    frames = frame_signal(w.samples, frame_length, hop) * win
    return ComplexSpectrogram(np.fft.rfft(frames, axis=-1), frame_length, hop, w.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, frame_length: int, n_mels: int = DEFAULT_N_MELS) -> np.ndarray:
    """Triangular filters equally spaced on the Mel scale, shape [n_mels, n_bins].

    Every row is nonnegative with at least one nonzero entry.
    """
    n_bins = frame_length // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / frame_length
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / (center - lo)
        down = (hi - bin_hz) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        if not fb[m].any():
            # Narrow filters can fall between bins; keep the closest bin so the
            # row-nonzero invariant holds for any (n_mels, frame_length) combo.
            fb[m, int(np.argmin(np.abs(bin_hz - center)))] = 1.0
    return fb


def mel_spectrogram(
    w: Waveform,
    frame_length: int = DEFAULT_FRAME,
    hop: int = DEFAULT_HOP,
    n_mels: int = DEFAULT_N_MELS,
) -> MelSpec:
    """log(filterbank @ |STFT|^2 + floor); the floor keeps every cell finite."""
    spec = stft(w, frame_length, hop)
    power = spec.frames.real**2 + spec.frames.imag**2
    fb = mel_filterbank(w.sample_rate, frame_length, n_mels)
    return MelSpec(np.log(power @ fb.T + MEL_LOG_FLOOR), n_mels)


def fft_convolve(x: Waveform, r: Rir) -> Waveform:
    """Full linear convolution with the RIR, truncated to len(x).

    Truncation keeps waveforms length-aligned through the attack loss; the
    discarded tail extends past the utterance end.
    """
    if x.sample_rate != r.taps.sample_rate:
        raise ValueError(f"sample rate mismatch: {x.sample_rate} vs {r.taps.sample_rate}")
    out = fftconvolve(x.samples, r.taps.samples, mode="full")[: len(x)]
    return Waveform(out, x.sample_rate)


def convolve_truncated(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Array-level fft_convolve for hot loops; supports a batched first axis."""
    if x.ndim == 2:
        out = fftconvolve(x, taps[None, :], mode="full", axes=1)
        return out[:, : x.shape[1]]
    return fftconvolve(x, taps, mode="full")[: x.shape[0]]


def convolve_adjoint(grad_out: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Gradient of convolve_truncated with respect to its first argument.

    d/dx[n] = sum_k grad_out[n + k] * taps[k], i.e. correlation with the taps.
    """
    r = taps.shape[0]
    if grad_out.ndim == 2:
        full = fftconvolve(grad_out, taps[::-1][None, :], mode="full", axes=1)
        return full[:, r - 1 : r - 1 + grad_out.shape[1]]
    full = fftconvolve(grad_out, taps[::-1], mode="full")
    return full[r - 1 : r - 1 + grad_out.shape[0]]


def sine_sweep(f1: float, f2: float, duration: float, sample_rate: int) -> Waveform:
    """Exponential sine sweep from f1 to f2 Hz over `duration` seconds.

    x(t) = sin( (2*pi*f1*T / ln(f2/f1)) * (exp((t/T) * ln(f2/f1)) - 1) ),
    sampled at t = n / sample_rate.  The instantaneous frequency rises
    exponentially from f1 to f2.
    """
    if not 0.0 < f1 < f2:
        raise ValueError(f"need 0 < f1 < f2, got f1={f1}, f2={f2}")
    if f2 >= sample_rate / 2.0:
        raise ValueError(f"f2={f2} must stay below Nyquist ({sample_rate / 2.0})")
    if duration <= 0.0:
        raise ValueError(f"duration must be positive, got {duration}")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    log_ratio = np.log(f2 / f1)
    phase = (2.0 * np.pi * f1 * duration / log_ratio) * (np.exp(t / duration * log_ratio) - 1.0)
    return Waveform(np.sin(phase), sample_rate)


def deconvolve_sweep(recorded: Waveform, sweep: Waveform) -> Waveform:
    """Raw RIR estimate: recorded convolved with the time-reversed sweep.

    No amplitude compensation is applied, so the sweep's pink spectrum biases
    the estimate; downstream checks use cross-correlation rather than exact
    tap recovery.
    """
    if recorded.sample_rate != sweep.sample_rate:
        raise ValueError("recorded and sweep sample rates differ")
    if len(recorded) < len(sweep):
        raise ValueError(f"recording ({len(recorded)}) shorter than sweep ({len(sweep)})")
    raw = fftconvolve(recorded.samples, sweep.samples[::-1], mode="full")
    return Waveform(raw, recorded.sample_rate)


def estimate_rir(
    recorded: Waveform,
    sweep: Waveform,
    crop_before: int = RIR_CROP_BEFORE,
    crop_len: int = RIR_CROP_LEN,
    label: str = "estimated",
) -> Rir:
    """Estimate an RIR from a recorded sweep playback.

    The raw time-reversal estimate is cropped to `crop_len` taps starting
    `crop_before` taps ahead of its peak, then normalized to unit l2 energy.
    """
    raw = deconvolve_sweep(recorded, sweep).samples
    peak = int(np.argmax(np.abs(raw)))
    start = max(0, peak - crop_before)
    taps = raw[start : start + crop_len].copy()
    norm = float(np.linalg.norm(taps))
    if norm == 0.0:
        raise ValueError("deconvolution produced an all-zero response")
    return Rir(Waveform(taps / norm, recorded.sample_rate), label=label)


def bandpass_pulse(f_lo: float, f_hi: float, sample_rate: int = 16000, n_taps: int = 129) -> np.ndarray:
    """Hann-windowed sinc bandpass kernel (linear phase, peak at the center)."""
    if not 0.0 < f_lo < f_hi < sample_rate / 2.0:
        raise ValueError(f"need 0 < f_lo < f_hi < Nyquist, got ({f_lo}, {f_hi})")
    t = np.arange(n_taps) - (n_taps - 1) / 2
    lowpass = lambda fc: np.sinc(2.0 * fc / sample_rate * t) * (2.0 * fc / sample_rate)
    return (lowpass(f_hi) - lowpass(f_lo)) * hann_window(n_taps)


def synth_rir(
    seed: int,
    decay_t60: float = 0.25,
    n_reflections: int = 24,
    sample_rate: int = 16000,
    band: tuple[float, float] | None = None,
) -> Rir:
    """Deterministic sparse synthetic RIR: direct path plus decaying reflections.

    Tap 0 carries the direct path; n_reflections echoes land at random integer
    delays in (0, decay_t60] with magnitudes bounded by exp(-6.91 * t / T60)
    (60 dB of decay over decay_t60 seconds) and random signs.  When `band` is
    given, each arrival is shaped by the passband of a simulated
    playback/capture chain (a windowed-sinc bandpass), which adds a small
    constant group delay.  The result is normalized to unit l2 energy.
    """
    if decay_t60 <= 0.0:
        raise ValueError(f"decay_t60 must be positive, got {decay_t60}")
    if n_reflections < 1:
        raise ValueError(f"need at least one reflection, got {n_reflections}")
    rng = np.random.default_rng(np.random.SeedSequence([0x5172, seed]))
    n_taps = int(round(decay_t60 * sample_rate)) + 1
    taps = np.zeros(n_taps)
    taps[0] = 1.0
    delays = rng.integers(1, n_taps, size=n_reflections)
    gains = rng.uniform(0.25, 1.0, size=n_reflections)
    signs = rng.choice([-1.0, 1.0], size=n_reflections)
    envelope = np.exp(-T60_DECAY_RATE * (delays / sample_rate) / decay_t60)
    np.add.at(taps, delays, signs * gains * envelope)
    # Collisions could stack two reflections past the envelope; re-clip so the
    # documented bound holds for every tap after the direct path.
    bound = np.exp(-T60_DECAY_RATE * (np.arange(1, n_taps) / sample_rate) / decay_t60)
    taps[1:] = np.clip(taps[1:], -bound, bound)
    if band is not None:
        taps = np.convolve(taps, bandpass_pulse(band[0], band[1], sample_rate), mode="full")
    taps /= np.linalg.norm(taps)
    return Rir(Waveform(taps, sample_rate), label=f"synth-{seed}")


def identity_rir(sample_rate: int = 16000) -> Rir:
    return Rir(Waveform(np.array([1.0]), sample_rate), label="identity")


def cross_correlation_peak(a: np.ndarray, b: np.ndarray) -> float:
    """Peak of |cross-correlation| normalized by the l2 norms, in [0, 1]."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cross-correlation of a zero signal")
    xc = fftconvolve(a, b[::-1], mode="full")
    return float(np.max(np.abs(xc)) / (na * nb))


def save_rir(path, rir: Rir, extra_meta: dict | None = None) -> None:
    """Persist an RIR as peak-normalized WAV plus a sidecar metadata record.

    The sidecar stores the peak scale so the unit-energy taps can be restored
    without 16-bit quantization deciding the energy normalization.
    """
    path = Path(path)
    peak = float(np.max(np.abs(rir.taps.samples)))
    scaled = rir.taps.samples / peak
    save_wav(path, Waveform(scaled, rir.taps.sample_rate))
    meta = configparser.ConfigParser()
    meta["rir"] = {
        "label": rir.label,
        "sample_rate": str(rir.taps.sample_rate),
        "n_taps": str(len(rir.taps)),
        "peak_scale": repr(peak),
        "l2_norm": repr(float(np.linalg.norm(rir.taps.samples))),
    }
    if extra_meta:
        meta["params"] = {k: str(v) for k, v in extra_meta.items()}
    with open(path.with_suffix(path.suffix + ".meta.ini"), "w") as fh:
        meta.write(fh)


def load_rir(path) -> Rir:
    """Load a persisted RIR and restore unit l2 energy."""
    path = Path(path)
    w = load_wav(path)
    taps = w.samples / np.linalg.norm(w.samples)
    label = path.stem
    meta_path = path.with_suffix(path.suffix + ".meta.ini")
    if meta_path.is_file():
        meta = configparser.ConfigParser()
        meta.read(meta_path)
        label = meta.get("rir", "label", fallback=label)
    return Rir(Waveform(taps, w.sample_rate), label=label)
