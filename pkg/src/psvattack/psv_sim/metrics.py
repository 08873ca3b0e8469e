"""Verification-pipeline decisions and attack-evaluation metrics.

The deployed pipeline gates a probe on an identity check (cosine score
against the enrollment at threshold theta) and a content check (log-Mel
distortion proxy standing in for an external transcriber).  The replay
detector is an always-pass hook: it guards against recorded playback of the
victim, which a live adversary with a separate perturbation source
sidesteps by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..audio import Perturbation, Waveform, tile_array
from ..dsp import Rir, convolve_truncated, mel_spectrogram
from ..embedder.net import Embedding, ModelParams, cosine_score, forward


def compute_eer(genuine: Sequence[float], impostor: Sequence[float]) -> tuple[float, float]:
    """Equal error rate and its threshold over all candidate thresholds.

    Candidates are the distinct observed scores; FAR(t) = fraction of
    impostor scores >= t, FRR(t) = fraction of genuine scores < t.  Returns
    (eer, theta) at the candidate minimizing |FAR - FRR|, ties to the lowest
    threshold.
    """
    gen = np.asarray(genuine, dtype=np.float64)
    imp = np.asarray(impostor, dtype=np.float64)
    if gen.size == 0 or imp.size == 0:
        raise ValueError("compute_eer needs non-empty genuine and impostor score lists")
    candidates = np.unique(np.concatenate([gen, imp]))
    gen_sorted = np.sort(gen)
    imp_sorted = np.sort(imp)
    # integer-count ratios so results match a literal counting sweep exactly
    far = (imp.size - np.searchsorted(imp_sorted, candidates, side="left")) / imp.size
    frr = np.searchsorted(gen_sorted, candidates, side="left") / gen.size
    best = int(np.argmin(np.abs(far - frr)))  # argmin takes the first = lowest threshold
    eer = 0.5 * (far[best] + frr[best])
    return float(eer), float(candidates[best])


@dataclass(frozen=True)
class PSVDecision:
    identity_pass: bool
    content_pass: bool
    overall: bool
    identity_score: float
    content_distortion: float
    replay_pass: bool = True

    def __post_init__(self):
        if self.overall != (self.identity_pass and self.content_pass):
            raise ValueError("overall decision must be the conjunction of the checks")


def identity_check(
    params: ModelParams, theta: float, enrolled: Embedding, probe: Waveform
) -> tuple[bool, float]:
    """Same-speaker decision: cosine score against the enrollment >= theta."""
    if theta > 1.0:
        raise ValueError(f"threshold {theta} exceeds the cosine score range")
    emb, _ = forward(params, probe)
    score = cosine_score(emb, enrolled)
    return score >= theta, score


def content_check_proxy(
    clean: Waveform, adversarial: Waveform, tol: float
) -> tuple[bool, float]:
    """Mean absolute log-Mel difference as a stand-in for transcript agreement."""
    if len(clean) != len(adversarial):
        raise ValueError(f"length mismatch: {len(clean)} vs {len(adversarial)}")
    a = mel_spectrogram(clean).frames
    b = mel_spectrogram(adversarial).frames
    distortion = float(np.mean(np.abs(b - a)))
    return distortion <= tol, distortion


def calibrate_tolerance(
    corpus, epsilon: float, seed: int = 0, percentile: float = 95.0
) -> float:
    """Content tolerance = the given percentile of distortions caused by
    Gaussian noise scaled to peak epsilon across the clean corpus."""
    rng = np.random.default_rng(np.random.SeedSequence([0x701, seed]))
    distortions = []
    for spk_utts in corpus.utterances:
        for w, _ in spk_utts:
            noise = rng.standard_normal(len(w))
            noise *= epsilon / np.max(np.abs(noise))
            _, d = content_check_proxy(w, Waveform(w.samples + noise, w.sample_rate), np.inf)
            distortions.append(d)
    return float(np.percentile(distortions, percentile))


def always_pass_replay_check(probe: Waveform) -> bool:
    return True


def verify(
    params: ModelParams,
    theta: float,
    enrolled: Embedding,
    probe: Waveform,
    clean_ref: Waveform | None = None,
    tol: float = np.inf,
    replay_check: Callable[[Waveform], bool] = always_pass_replay_check,
) -> PSVDecision:
    """Full pipeline decision; the content check is vacuous without a clean_ref.

    The replay result is recorded but never gates the decision: the shipped
    detector is an always-pass stub, so overall is the conjunction of the
    identity and content checks alone.
    """
    identity_pass, score = identity_check(params, theta, enrolled, probe)
    if clean_ref is not None:
        content_pass, distortion = content_check_proxy(clean_ref, probe, tol)
    else:
        content_pass, distortion = True, 0.0
    return PSVDecision(
        identity_pass,
        content_pass,
        identity_pass and content_pass,
        score,
        distortion,
        replay_pass=bool(replay_check(probe)),
    )


@dataclass(frozen=True)
class TrialResult:
    utt_index: int
    rir_label: str
    score: float
    accepted: bool
    snr_db: float
    distortion: float


@dataclass(frozen=True)
class AttackMetrics:
    asr: float
    mean_snr_db: float
    mean_distortion: float
    per_utterance: tuple[TrialResult, ...]

    def __post_init__(self):
        n_pass = sum(r.accepted for r in self.per_utterance)
        if abs(self.asr - n_pass / len(self.per_utterance)) > 1e-12:
            raise ValueError("asr must equal the accepted-trial fraction")


def evaluate_attack(
    params: ModelParams,
    theta: float,
    delta: Perturbation | None,
    test_utts: Sequence[Waveform],
    target_emb: Embedding,
    rir_test: Sequence[Rir] | None = None,
) -> AttackMetrics:
    """Score each held-out utterance (+ tiled delta) against the target.

    With held-out RIRs, every (utterance, RIR) pair is one trial and both the
    speech and the perturbation pass through the room before mixing.  SNR and
    distortion compare against the speech as heard (post-RIR), isolating the
    perturbation's contribution.
    """
    if not test_utts:
        raise ValueError("evaluate_attack needs at least one test utterance")
    rows = []
    for ui, utt in enumerate(test_utts):
        d_tiled = (
            tile_array(delta.segment.samples, len(utt))
            if delta is not None
            else np.zeros(len(utt))
        )
        channels = [(r.label, r.taps.samples) for r in rir_test] if rir_test else [("", None)]
        for label, taps in channels:
            if taps is not None:
                speech = convolve_truncated(utt.samples, taps)
                noise = convolve_truncated(d_tiled, taps)
            else:
                speech, noise = utt.samples, d_tiled
            probe = Waveform(speech + noise, utt.sample_rate)
            emb, _ = forward(params, probe)
            score = cosine_score(emb, target_emb)
            noise_energy = float(np.linalg.norm(noise))
            snr = (
                np.inf
                if noise_energy == 0.0
                else 20.0 * np.log10(np.linalg.norm(speech) / noise_energy)
            )
            _, distortion = content_check_proxy(
                Waveform(speech, utt.sample_rate), probe, np.inf
            )
            rows.append(TrialResult(ui, label, float(score), score >= theta, float(snr), distortion))
    rows.sort(key=lambda r: (r.utt_index, r.rir_label))
    asr = sum(r.accepted for r in rows) / len(rows)
    return AttackMetrics(
        asr=asr,
        mean_snr_db=float(np.mean([r.snr_db for r in rows])),
        mean_distortion=float(np.mean([r.distortion for r in rows])),
        per_utterance=tuple(rows),
    )


def metrics_report(metrics: AttackMetrics, header: dict | None = None) -> str:
    """Key-value summary plus a delimited per-trial table."""
    lines = []
    for k, v in (header or {}).items():
        lines.append(f"{k} = {v}")
    lines.append(f"asr = {metrics.asr:.4f}")
    lines.append(f"mean_snr_db = {metrics.mean_snr_db:.4f}")
    lines.append(f"mean_distortion = {metrics.mean_distortion:.6f}")
    lines.append("")
    lines.append("utt\trir\tscore\taccepted\tsnr_db\tdistortion")
    for r in metrics.per_utterance:
        lines.append(
            f"{r.utt_index}\t{r.rir_label}\t{r.score:.6f}\t{int(r.accepted)}"
            f"\t{r.snr_db:.4f}\t{r.distortion:.6f}"
        )
    return "\n".join(lines) + "\n"
