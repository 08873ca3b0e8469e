"""Synthetic corpus, verification pipeline, and attack evaluation."""

from .corpus import (
    Corpus,
    SpeakerProfile,
    SpeakerSplit,
    load_corpus,
    save_corpus,
    synth_corpus,
    synth_utterance,
)
from .metrics import (
    AttackMetrics,
    PSVDecision,
    TrialResult,
    calibrate_tolerance,
    compute_eer,
    content_check_proxy,
    evaluate_attack,
    identity_check,
    metrics_report,
    verify,
)

__all__ = [
    "AttackMetrics",
    "Corpus",
    "PSVDecision",
    "SpeakerProfile",
    "SpeakerSplit",
    "TrialResult",
    "calibrate_tolerance",
    "compute_eer",
    "content_check_proxy",
    "evaluate_attack",
    "identity_check",
    "load_corpus",
    "metrics_report",
    "save_corpus",
    "synth_corpus",
    "synth_utterance",
    "verify",
]
