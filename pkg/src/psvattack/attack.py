"""Two-step universal perturbation optimizer.

Step 1 drives every training utterance's cosine score against the target
past the verification threshold (margin-clamped hinge), by signed momentum
gradient descent projected onto the l-inf ball of radius epsilon.  Step 2
restarts from the step-1 result and additionally minimizes the mean STFT
magnitude of the perturbation, trading surplus margin for a quieter signal.
Room impulse responses, when supplied, are sampled per iteration and applied
to speech and perturbation before mixing, so the perturbation survives
playback through an approximate room.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Perturbation, Waveform, clip_inf, fold_tiled_gradient, save_wav, tile_array
from .dsp import (
    DEFAULT_FRAME,
    DEFAULT_HOP,
    Rir,
    convolve_adjoint,
    convolve_truncated,
    frame_signal,
    hann_window,
    overlap_add,
)
from .embedder.net import Embedding, ModelParams, backward_batch, cosine_scores_and_grads, forward_batch

_CLAMP_TOL = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """Optimizer hyperparameters; alpha defaults derive from epsilon."""

    epsilon: float = 0.03
    alpha1: float | None = None  # default epsilon / 10
    alpha2: float | None = None  # default epsilon / 50
    beta: float = 0.9
    kappa: float = 0.1
    gamma: float = 5.0
    m1: int = 2000
    m2: int = 1000
    delta_len: int = 16000
    seed: int = 0
    rir_set: tuple[Rir, ...] | None = None
    distinct_rir_pairs: bool = False

    def __post_init__(self):
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.kappa < 0.0 or self.gamma < 0.0:
            raise ValueError("kappa and gamma must be >= 0")
        if self.m1 < 1 or self.m2 < 1:
            raise ValueError("m1 and m2 must be >= 1")
        if self.delta_len < 1:
            raise ValueError("delta_len must be >= 1")
        if self.alpha1 is None:
            object.__setattr__(self, "alpha1", self.epsilon / 10.0)
        if self.alpha2 is None:
            object.__setattr__(self, "alpha2", self.epsilon / 50.0)
        if self.alpha1 < 0.0 or self.alpha2 < 0.0:
            raise ValueError("step sizes must be >= 0")

    def summary(self) -> dict:
        d = {
            "epsilon": self.epsilon,
            "alpha1": self.alpha1,
            "alpha2": self.alpha2,
            "beta": self.beta,
            "kappa": self.kappa,
            "gamma": self.gamma,
            "m1": self.m1,
            "m2": self.m2,
            "delta_len": self.delta_len,
            "seed": self.seed,
            "distinct_rir_pairs": self.distinct_rir_pairs,
            "n_rirs": len(self.rir_set) if self.rir_set else 0,
        }
        return d


@dataclass(frozen=True)
class TrainSet:
    """Adversary training utterances at one common length, plus the target."""

    utterances: tuple[Waveform, ...]
    target_embedding: Embedding

    def __post_init__(self):
        if not self.utterances:
            raise ValueError("train set needs at least one utterance")
        lengths = {len(w) for w in self.utterances}
        if len(lengths) != 1:
            raise ValueError(f"utterances not equal length: {sorted(lengths)}")
        rates = {w.sample_rate for w in self.utterances}
        if len(rates) != 1:
            raise ValueError(f"utterances mix sample rates: {sorted(rates)}")

    @property
    def n(self) -> int:
        return len(self.utterances)

    @property
    def length(self) -> int:
        return len(self.utterances[0])

    @property
    def sample_rate(self) -> int:
        return self.utterances[0].sample_rate

    def matrix(self) -> np.ndarray:
        return np.stack([w.samples for w in self.utterances])


def make_train_set(utterances, target_embedding: Embedding) -> TrainSet:
    """Tile every utterance to the longest one's length."""
    if not utterances:
        raise ValueError("train set needs at least one utterance")
    l = max(len(w) for w in utterances)
    tiled = tuple(
        w if len(w) == l else Waveform(tile_array(w.samples, l), w.sample_rate)
        for w in utterances
    )
    return TrainSet(tiled, target_embedding)


@dataclass
class OptState:
    delta: Perturbation
    momentum_g: np.ndarray
    iteration: int
    best_delta: Perturbation
    best_metric: float


def pgd_step(state: OptState, grad: np.ndarray, alpha: float, epsilon: float, beta: float) -> OptState:
    """Momentum accumulation (raw gradient, unnormalized) + signed step + clip."""
    d = state.delta.segment
    if grad.shape != d.samples.shape:
        raise ValueError(f"gradient shape {grad.shape} != delta shape {d.samples.shape}")
    g = beta * state.momentum_g + grad
    stepped = clip_inf(Waveform(d.samples - alpha * np.sign(g), d.sample_rate), epsilon)
    return OptState(
        delta=Perturbation(stepped, epsilon),
        momentum_g=g,
        iteration=state.iteration + 1,
        best_delta=state.best_delta,
        best_metric=state.best_metric,
    )


# ------------------------------------------------------------------- losses


def _clamped_margin_eval(params, train_set, delta, theta, kappa, rir_pair, speech_matrix=None):
    """Shared L1 core: (loss, grad wrt delta, per-utterance scores).

    speech_matrix short-circuits the speech-side convolution when the caller
    has it precomputed for the sampled RIR.
    """
    X = train_set.matrix() if speech_matrix is None else speech_matrix
    tiled = tile_array(delta.segment.samples, train_set.length)
    if rir_pair is not None:
        speech_rir, pert_rir = rir_pair
        if speech_matrix is None:
            X = convolve_truncated(X, speech_rir.taps.samples)
        noise = convolve_truncated(tiled, pert_rir.taps.samples)
    else:
        noise = tiled
    emb, tape = forward_batch(params, X + noise, train_set.sample_rate)
    scores, score_grads = cosine_scores_and_grads(emb, train_set.target_embedding.values)
    margins = theta - scores
    loss = float(np.sum(np.maximum(margins, -kappa)))
    active = margins > -kappa  # at the clamp the term is constant: zero gradient
    if not active.any():
        return loss, np.zeros(len(delta.segment)), scores
    upstream = -(active[:, None] * score_grads)
    dx, _ = backward_batch(tape, upstream)
    g = dx.sum(axis=0)
    if rir_pair is not None:
        g = convolve_adjoint(g, rir_pair[1].taps.samples)
    return loss, fold_tiled_gradient(g, len(delta.segment)), scores


def loss_l1(params: ModelParams, train_set: TrainSet, delta: Perturbation, theta: float, kappa: float):
    """Sum of max(theta - score_i, -kappa) and its gradient wrt delta."""
    loss, grad, _ = _clamped_margin_eval(params, train_set, delta, theta, kappa, None)
    return loss, grad


def loss_l1_rir(
    params: ModelParams,
    train_set: TrainSet,
    delta: Perturbation,
    theta: float,
    kappa: float,
    rir_pair: tuple[Rir, Rir],
):
    """L1 with speech and perturbation each played through a room response."""
    loss, grad, _ = _clamped_margin_eval(params, train_set, delta, theta, kappa, rir_pair)
    return loss, grad


def _spectral_eval(delta, frame, hop):
    d = delta.segment.samples
    if len(d) < frame:
        raise ValueError(f"delta of {len(d)} samples is shorter than one {frame}-sample frame")
    win = hann_window(frame)
    fw = frame_signal(d, frame, hop) * win
    Z = np.fft.rfft(fw, axis=-1)
    mag = np.abs(Z)
    loss = float(mag.mean())
    # d|z|/dz = z/|z| (0 at z = 0), scaled by the mean's 1/(cells) weight.
    nonzero = mag > 0.0
    G = np.zeros_like(Z)
    np.divide(Z, mag, out=G, where=nonzero)
    G /= mag.size
    A = 0.5 * G
    A[..., 0] = G[..., 0].real
    A[..., -1] = G[..., -1].real
    dfw = frame * np.fft.irfft(A, n=frame, axis=-1)
    grad = overlap_add(dfw * win, hop, len(d))
    return loss, grad


def loss_l2(delta: Perturbation, frame: int = DEFAULT_FRAME, hop: int = DEFAULT_HOP):
    """Mean STFT magnitude of the un-tiled delta and its gradient."""
    return _spectral_eval(delta, frame, hop)


def loss_total(
    params: ModelParams,
    train_set: TrainSet,
    delta: Perturbation,
    theta: float,
    kappa: float,
    gamma: float,
    rir_pair: tuple[Rir, Rir] | None = None,
):
    """L1 (or its RIR form) + gamma * L2, with summed gradients."""
    l1, g1, _ = _clamped_margin_eval(params, train_set, delta, theta, kappa, rir_pair)
    if gamma == 0.0:
        return l1, g1
    l2, g2 = _spectral_eval(delta, DEFAULT_FRAME, DEFAULT_HOP)
    return l1 + gamma * l2, g1 + gamma * g2


# ------------------------------------------------------------------- crafting


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    l1: float
    l2: float
    total: float
    min_score: float
    delta_inf: float  # peak |delta| at this iterate

    def line(self) -> str:
        return (
            f"{self.iteration}\t{self.l1:.8f}\t{self.l2:.8f}\t{self.total:.8f}"
            f"\t{self.min_score:.6f}\t{self.delta_inf:.8f}"
        )


@dataclass(frozen=True)
class CraftReport:
    config: AttackConfig
    theta: float
    n_train: int
    delta1: Perturbation
    delta: Perturbation
    step1_trace: tuple[TraceRow, ...]
    step2_trace: tuple[TraceRow, ...]
    iters_to_margin: int  # first iteration with every training score >= theta

    @property
    def iterations(self) -> int:
        return len(self.step1_trace) + len(self.step2_trace)


def _zero_state(cfg: AttackConfig, sample_rate: int, init: np.ndarray | None = None) -> OptState:
    seg = np.zeros(cfg.delta_len) if init is None else init.copy()
    p = Perturbation(Waveform(seg, sample_rate), cfg.epsilon)
    return OptState(p, np.zeros(cfg.delta_len), 0, p, np.inf)


def _rir_sampler(cfg: AttackConfig):
    if not cfg.rir_set:
        return lambda rng: None
    rirs = cfg.rir_set

    def sample(rng):
        i = int(rng.integers(len(rirs)))
        j = int(rng.integers(len(rirs))) if cfg.distinct_rir_pairs else i
        return rirs[i], rirs[j]

    return sample


def craft_step1(
    params: ModelParams, train_set: TrainSet, cfg: AttackConfig, theta: float
) -> tuple[Perturbation, tuple[TraceRow, ...], int]:
    """Margin-maximization step; returns (delta1, trace, iters_to_margin).

    Tracks the lowest observed L1; stops early only when every margin is
    clamped (L1 = -N*kappa, impossible to improve).
    """
    rng = np.random.default_rng(np.random.SeedSequence([0xA7CC, cfg.seed, 1]))
    sample = _rir_sampler(cfg)
    state = _zero_state(cfg, train_set.sample_rate)
    floor = -train_set.n * cfg.kappa
    trace = []
    iters_to_margin = cfg.m1
    for i in range(cfg.m1):
        pair = sample(rng)
        l1, grad, scores = _clamped_margin_eval(params, train_set, state.delta, theta, cfg.kappa, pair)
        peak = float(np.max(np.abs(state.delta.segment.samples)))
        # L2 is informational here (step 1 optimizes L1 alone) but keeps the
        # trace format uniform and the L2 >= 0 invariant checkable per row.
        l2 = loss_l2(state.delta)[0]
        trace.append(TraceRow(i, l1, l2, l1, float(scores.min()), peak))
        if l1 < state.best_metric:
            state.best_metric = l1
            state.best_delta = state.delta
        if scores.min() >= theta and iters_to_margin == cfg.m1:
            iters_to_margin = i
        if l1 <= floor + _CLAMP_TOL:
            break
        state = pgd_step(state, grad, cfg.alpha1, cfg.epsilon, cfg.beta)
    return state.best_delta, tuple(trace), iters_to_margin


def craft_step2(
    params: ModelParams,
    train_set: TrainSet,
    delta_init: Perturbation,
    cfg: AttackConfig,
    theta: float,
) -> tuple[Perturbation, tuple[TraceRow, ...]]:
    """Spectral-flatness refinement from the step-1 result.

    Best iterate = lowest L2 among those keeping every training score >=
    theta; if none qualifies, lowest total loss wins.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0xA7CC, cfg.seed, 2]))
    sample = _rir_sampler(cfg)
    state = _zero_state(cfg, train_set.sample_rate, init=delta_init.segment.samples)
    best_qualified: Perturbation | None = None
    best_l2 = np.inf
    fallback = state.delta
    fallback_total = np.inf
    trace = []
    for i in range(cfg.m2):
        pair = sample(rng)
        l1, g1, scores = _clamped_margin_eval(params, train_set, state.delta, theta, cfg.kappa, pair)
        l2, g2 = _spectral_eval(state.delta, DEFAULT_FRAME, DEFAULT_HOP)
        total = l1 + cfg.gamma * l2
        peak = float(np.max(np.abs(state.delta.segment.samples)))
        trace.append(TraceRow(i, l1, l2, total, float(scores.min()), peak))
        if scores.min() >= theta and l2 < best_l2:
            best_l2 = l2
            best_qualified = state.delta
        if total < fallback_total:
            fallback_total = total
            fallback = state.delta
        state = pgd_step(state, g1 + cfg.gamma * g2, cfg.alpha2, cfg.epsilon, cfg.beta)
    chosen = best_qualified if best_qualified is not None else fallback
    return chosen, tuple(trace)


def craft(
    params: ModelParams,
    train_set: TrainSet,
    cfg: AttackConfig,
    theta: float,
    skip_step2: bool = False,
) -> tuple[Perturbation, CraftReport]:
    """Run both steps and assemble the provenance report."""
    delta1, trace1, iters_to_margin = craft_step1(params, train_set, cfg, theta)
    if skip_step2:
        delta, trace2 = delta1, ()
    else:
        delta, trace2 = craft_step2(params, train_set, delta1, cfg, theta)
    report = CraftReport(
        config=cfg,
        theta=theta,
        n_train=train_set.n,
        delta1=delta1,
        delta=delta,
        step1_trace=trace1,
        step2_trace=tuple(trace2),
        iters_to_margin=iters_to_margin,
    )
    return delta, report


def write_provenance(path, report: CraftReport, model_hash: str = "") -> None:
    """Config echo, outcome summary, and the per-iteration loss table."""
    lines = ["[config]"]
    for k, v in report.config.summary().items():
        lines.append(f"{k} = {v}")
    if report.config.rir_set:
        lines.append("rir_labels = " + " ".join(r.label for r in report.config.rir_set))
    lines += [
        "",
        "[result]",
        f"theta = {report.theta!r}",
        f"n_train = {report.n_train}",
        f"model_sha256 = {model_hash}",
        f"iterations_step1 = {len(report.step1_trace)}",
        f"iterations_step2 = {len(report.step2_trace)}",
        f"iters_to_margin = {report.iters_to_margin}",
        f"delta_peak = {float(np.max(np.abs(report.delta.segment.samples)))!r}",
        "",
        "[trace]",
        "step\titer\tl1\tl2\ttotal\tmin_score\tdelta_inf",
    ]
    for row in report.step1_trace:
        lines.append("1\t" + row.line())
    for row in report.step2_trace:
        lines.append("2\t" + row.line())
    Path(path).write_text("\n".join(lines) + "\n")


def save_delta(path, delta: Perturbation) -> None:
    save_wav(path, delta.segment)
