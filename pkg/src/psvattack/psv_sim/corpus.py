"""Deterministic synthetic speech corpus.

Each speaker is a harmonic voice profile (fundamental, harmonic rolloff,
formant resonances); each utterance modulates that voice with a
content-seeded amplitude/frequency envelope, so utterances of one speaker
share timbre but differ in "what is said".  Everything derives from one root
seed through named SeedSequence chains.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from ..audio import CANONICAL_RATE, Waveform, load_wav, save_wav

# f0 bands used for same-band / cross-band attack pairing.  Kept narrow so
# same-band speakers are genuinely confusable and the verifier's threshold
# sits at a realistic operating point rather than a saturated one.
LOW_BAND = (100.0, 130.0)
HIGH_BAND = (180.0, 230.0)

PEAK_LEVEL = 0.5
_SPK = 0x5EAF
_ENV = 0xC043


@dataclass(frozen=True)
class SpeakerProfile:
    f0: float
    harmonic_amps: np.ndarray
    formant_centers: tuple[float, ...]
    formant_bandwidths: tuple[float, ...]
    seed: int

    def __post_init__(self):
        if not 80.0 <= self.f0 <= 300.0:
            raise ValueError(f"f0 {self.f0} outside [80, 300] Hz")
        top = len(self.harmonic_amps) * self.f0
        if top >= CANONICAL_RATE / 2.0:
            raise ValueError(f"highest harmonic {top} Hz reaches Nyquist")

    @property
    def band(self) -> str:
        return "low" if self.f0 <= LOW_BAND[1] else "high"


@dataclass(frozen=True)
class SpeakerSplit:
    enroll: tuple[int, ...]
    train: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        if not self.enroll:
            raise ValueError("every speaker needs at least one enroll utterance")
        if set(self.train) & set(self.test):
            raise ValueError("train/test utterance sets overlap")


@dataclass(frozen=True)
class Corpus:
    seed: int
    utt_seconds: float
    sample_rate: int
    speakers: tuple[SpeakerProfile, ...]
    utterances: tuple[tuple[tuple[Waveform, int], ...], ...]  # [speaker][utt] -> (wave, content_id)
    split: tuple[SpeakerSplit, ...]

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    def waves(self, spk: int, which: str) -> list[Waveform]:
        idx = getattr(self.split[spk], which)
        return [self.utterances[spk][i][0] for i in idx]


def make_profile(root_seed: int, spk_index: int) -> SpeakerProfile:
    """Profile for speaker i: even indices sit in the low f0 band, odd in the high."""
    rng = np.random.default_rng(np.random.SeedSequence([_SPK, root_seed, spk_index]))
    lo, hi = LOW_BAND if spk_index % 2 == 0 else HIGH_BAND
    f0 = float(rng.uniform(lo, hi))
    n_harm = min(30, int((CANONICAL_RATE / 2.0 - 400.0) // (hi * 1.03)))
    rolloff = rng.uniform(0.8, 1.2)
    amps = rng.uniform(0.5, 1.0, size=n_harm) / np.arange(1, n_harm + 1) ** rolloff
    centers = (
        float(rng.uniform(400.0, 700.0)),
        float(rng.uniform(1200.0, 1900.0)),
        float(rng.uniform(2600.0, 3200.0)),
    )
    bws = tuple(float(b) for b in rng.uniform(90.0, 180.0, size=3))
    return SpeakerProfile(f0, amps, centers, bws, spk_index)


def _smooth_curve(rng, n_samples: int, n_knots: int, lo: float, hi: float) -> np.ndarray:
    """Piecewise-linear random curve over the utterance, values in [lo, hi]."""
    knots = rng.uniform(lo, hi, size=n_knots)
    pos = np.linspace(0.0, n_samples - 1, n_knots)
    return np.interp(np.arange(n_samples), pos, knots)


def _resonator(x: np.ndarray, fc: float, bw: float, sr: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / sr)
    theta = 2.0 * np.pi * fc / sr
    a = [1.0, -2.0 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return lfilter(b, a, x)


def synth_utterance(
    root_seed: int,
    profile: SpeakerProfile,
    content_id: int,
    utt_seconds: float,
    sample_rate: int = CANONICAL_RATE,
) -> Waveform:
    """One utterance: jittered harmonic source * content envelope -> formants.

    The amplitude/frequency envelopes depend only on (root_seed, content_id),
    so two speakers given the same content id "say the same thing".
    """
    n = int(round(utt_seconds * sample_rate))
    env_rng = np.random.default_rng(np.random.SeedSequence([_ENV, root_seed, content_id]))
    am = _smooth_curve(env_rng, n, max(8, int(10 * utt_seconds)), 0.2, 1.0)
    fm = _smooth_curve(env_rng, n, max(4, int(5 * utt_seconds)), -1.0, 1.0)

    utt_rng = np.random.default_rng(
        np.random.SeedSequence([_SPK, root_seed, profile.seed, content_id])
    )
    f0 = profile.f0 * (1.0 + utt_rng.uniform(-0.03, 0.03))
    inst = f0 * (1.0 + 0.03 * fm)  # content-driven pitch contour
    phase = 2.0 * np.pi * np.cumsum(inst) / sample_rate
    source = np.zeros(n)
    # per-utterance timbre wobble: vocal effort shifts the harmonic balance
    wobble = utt_rng.uniform(0.8, 1.2, size=len(profile.harmonic_amps))
    for k, amp in enumerate(profile.harmonic_amps * wobble, start=1):
        source += amp * np.sin(k * phase + utt_rng.uniform(0.0, 2.0 * np.pi))
    source *= am
    source += 0.02 * utt_rng.standard_normal(n)  # aspiration noise

    weights = (1.0, 0.7, 0.4)
    voiced = sum(
        w * _resonator(source, fc, bw, sample_rate)
        for w, fc, bw in zip(
            weights, profile.formant_centers, profile.formant_bandwidths
        )
    )
    voiced *= PEAK_LEVEL / np.max(np.abs(voiced))
    return Waveform(voiced, sample_rate)


def default_split(n_utts: int) -> SpeakerSplit:
    """Utterance 0 enrolls; ~30% (at least 2) test; the rest train the attack."""
    n_test = max(2, int(round(0.3 * n_utts)))
    return SpeakerSplit(
        enroll=(0,),
        test=tuple(range(1, 1 + n_test)),
        train=tuple(range(1 + n_test, n_utts)),
    )


def synth_corpus(
    n_speakers: int = 8,
    n_utts_per_speaker: int = 10,
    utt_seconds: float = 2.0,
    seed: int = 0,
    sample_rate: int = CANONICAL_RATE,
) -> Corpus:
    if n_speakers < 4:
        raise ValueError(f"need at least 4 speakers, got {n_speakers}")
    if n_utts_per_speaker < 6:
        raise ValueError(f"need at least 6 utterances per speaker, got {n_utts_per_speaker}")
    speakers = tuple(make_profile(seed, i) for i in range(n_speakers))
    utterances = tuple(
        tuple(
            (synth_utterance(seed, prof, cid, utt_seconds, sample_rate), cid)
            for cid in range(n_utts_per_speaker)
        )
        for prof in speakers
    )
    split = tuple(default_split(n_utts_per_speaker) for _ in range(n_speakers))
    return Corpus(seed, utt_seconds, sample_rate, speakers, utterances, split)


# ------------------------------------------------------------- persistence


def save_corpus(directory, corpus: Corpus) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = configparser.ConfigParser()
    manifest["corpus"] = {
        "seed": str(corpus.seed),
        "n_speakers": str(corpus.n_speakers),
        "n_utts_per_speaker": str(len(corpus.utterances[0])),
        "utt_seconds": repr(corpus.utt_seconds),
        "sample_rate": str(corpus.sample_rate),
    }
    for i, prof in enumerate(corpus.speakers):
        spk_dir = directory / f"spk{i:02d}"
        spk_dir.mkdir(exist_ok=True)
        for w, cid in corpus.utterances[i]:
            save_wav(spk_dir / f"utt{cid:02d}.wav", w)
        sp = corpus.split[i]
        manifest[f"speaker.{i}"] = {
            "f0": repr(prof.f0),
            "band": prof.band,
            "formant_centers": " ".join(repr(c) for c in prof.formant_centers),
            "formant_bandwidths": " ".join(repr(b) for b in prof.formant_bandwidths),
            "n_harmonics": str(len(prof.harmonic_amps)),
            "content_ids": " ".join(str(cid) for _, cid in corpus.utterances[i]),
            "enroll": " ".join(map(str, sp.enroll)),
            "train": " ".join(map(str, sp.train)),
            "test": " ".join(map(str, sp.test)),
        }
    with open(directory / "manifest.ini", "w") as fh:
        manifest.write(fh)


def load_corpus(directory) -> Corpus:
    """Rebuild a corpus from disk; profiles are re-derived from the seed.

    Waveforms come from the WAV files (16-bit quantized), so they match the
    in-memory originals only to PCM precision.
    """
    directory = Path(directory)
    manifest = configparser.ConfigParser()
    read = manifest.read(directory / "manifest.ini")
    if not read:
        raise FileNotFoundError(f"no corpus manifest under {directory}")
    c = manifest["corpus"]
    seed = c.getint("seed")
    n_speakers = c.getint("n_speakers")
    sample_rate = c.getint("sample_rate")
    speakers = tuple(make_profile(seed, i) for i in range(n_speakers))
    utterances = []
    split = []
    for i in range(n_speakers):
        sec = manifest[f"speaker.{i}"]
        cids = [int(t) for t in sec["content_ids"].split()]
        utts = tuple(
            (load_wav(directory / f"spk{i:02d}" / f"utt{cid:02d}.wav", expect_rate=sample_rate), cid)
            for cid in cids
        )
        utterances.append(utts)
        split.append(
            SpeakerSplit(
                enroll=tuple(int(t) for t in sec["enroll"].split()),
                train=tuple(int(t) for t in sec["train"].split()),
                test=tuple(int(t) for t in sec["test"].split()),
            )
        )
    return Corpus(
        seed,
        c.getfloat("utt_seconds"),
        sample_rate,
        speakers,
        tuple(utterances),
        tuple(split),
    )
