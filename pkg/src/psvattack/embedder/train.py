"""Prototypical training and threshold calibration for the embedding net.

Each update draws one query and one prototype utterance per speaker, scores
every query against every prototype with scaled cosine logits, and descends
the cross-entropy of matching queries to their own speaker.  Plain SGD with
momentum; deterministic for a fixed seed in a single-threaded run.
"""

from __future__ import annotations

import numpy as np

from .net import Embedding, ModelParams, backward_batch, forward, forward_batch, init_params

PROTO_SCALE_INIT = 10.0
PROTO_BIAS_INIT = -5.0

_PARAM_NAMES = (
    "conv1_w",
    "conv1_b",
    "conv2_w",
    "conv2_b",
    "attn_w",
    "attn_b",
    "attn_v",
    "fc_w",
    "fc_b",
)


def _proto_loss_and_grads(emb: np.ndarray, n_spk: int, scale: float, bias: float):
    """Cross-entropy of queries vs prototypes; returns loss, dE, dscale, dbias."""
    q, p = emb[:n_spk], emb[n_spk:]
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    qu, pu = q / qn, p / pn
    cos = qu @ pu.T
    logits = scale * cos + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float(np.trace(log_probs)) / n_spk

    dlogits = (np.exp(log_probs) - np.eye(n_spk)) / n_spk
    dscale = float(np.sum(dlogits * cos))
    dbias = float(np.sum(dlogits))
    dcos = scale * dlogits
    dqu = dcos @ pu
    dpu = dcos.T @ qu
    dq = (dqu - np.sum(dqu * qu, axis=1, keepdims=True) * qu) / qn
    dp = (dpu - np.sum(dpu * pu, axis=1, keepdims=True) * pu) / pn
    return loss, np.concatenate([dq, dp], axis=0), dscale, dbias


def train(
    corpus,
    epochs: int = 60,
    seed: int = 0,
    lr: float = 0.2,
    momentum: float = 0.9,
    log_every: int = 0,
    conv_channels: tuple[int, int] = (8, 16),
    attn_dim: int = 64,
    emb_dim: int = 64,
) -> ModelParams:
    """Fit params on the corpus train split; deterministic given seed."""
    n_spk = corpus.n_speakers
    if n_spk < 4:
        raise ValueError(f"need at least 4 speakers, got {n_spk}")
    train_waves = [corpus.waves(s, "train") for s in range(n_spk)]
    n_train = min(len(w) for w in train_waves)
    if n_train < 2 or n_train + len(corpus.waves(0, "test")) + 1 < 4:
        raise ValueError("corpus too small: each speaker needs >= 4 utterances with >= 2 in train")

    rng = np.random.default_rng(np.random.SeedSequence([0x7A17, seed]))
    params = init_params(seed, conv_channels=conv_channels, attn_dim=attn_dim, emb_dim=emb_dim)
    velocity = {name: np.zeros_like(getattr(params, name)) for name in _PARAM_NAMES}
    scale, bias = PROTO_SCALE_INIT, PROTO_BIAS_INIT
    v_scale = v_bias = 0.0

    sr = corpus.sample_rate
    for epoch in range(epochs):
        perms = [rng.permutation(n_train) for _ in range(n_spk)]
        for b in range(n_train // 2):
            queries = [train_waves[s][perms[s][2 * b]].samples for s in range(n_spk)]
            protos = [train_waves[s][perms[s][2 * b + 1]].samples for s in range(n_spk)]
            batch = np.stack(queries + protos)
            emb, tape = forward_batch(params, batch, sr)
            loss, d_emb, dscale, dbias = _proto_loss_and_grads(emb, n_spk, scale, bias)
            _, grads = backward_batch(tape, d_emb, want_input=False, want_params=True)
            for name in _PARAM_NAMES:
                velocity[name] = momentum * velocity[name] - lr * grads[name]
                getattr(params, name)[...] += velocity[name]
            v_scale = momentum * v_scale - lr * dscale
            v_bias = momentum * v_bias - lr * dbias
            scale += v_scale
            bias += v_bias
            if log_every and (epoch % log_every == 0) and b == 0:
                print(f"epoch {epoch:3d}  proto loss {loss:.4f}  scale {scale:.2f}")
    params.validate()
    return params


def enrollment_embedding(params: ModelParams, corpus, speaker: int) -> Embedding:
    """Mean embedding over the speaker's enroll utterances."""
    waves = corpus.waves(speaker, "enroll")
    embs = [forward(params, w)[0].values for w in waves]
    return Embedding(np.mean(embs, axis=0))


def score_trials(params: ModelParams, corpus) -> tuple[list[float], list[float]]:
    """Held-out genuine/impostor cosine scores: each test utterance against
    every speaker's enrollment."""
    from .net import cosine_scores_and_grads  # local: scores only, no autograd

    enrolls = np.stack(
        [enrollment_embedding(params, corpus, s).values for s in range(corpus.n_speakers)]
    )
    genuine, impostor = [], []
    for s in range(corpus.n_speakers):
        waves = corpus.waves(s, "test")
        batch = np.stack([w.samples for w in waves])
        emb, _ = forward_batch(params, batch, corpus.sample_rate)
        for t in range(corpus.n_speakers):
            scores, _ = cosine_scores_and_grads(emb, enrolls[t])
            (genuine if t == s else impostor).extend(float(v) for v in scores)
    return genuine, impostor


def calibrate_threshold(params: ModelParams, corpus) -> tuple[float, float]:
    """(theta, eer) on held-out trials; theta is the equal-error threshold."""
    from ..psv_sim.metrics import compute_eer  # deferred: psv_sim imports this package

    genuine, impostor = score_trials(params, corpus)
    if len(genuine) < 2 or len(impostor) < 2:
        raise ValueError("calibration needs at least 2 genuine and 2 impostor trials")
    eer, theta = compute_eer(genuine, impostor)
    return theta, eer
