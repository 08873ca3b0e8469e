"""Speaker-embedding network with hand-written reverse-mode gradients.

Pipeline: log-Mel frontend -> two strided conv/ReLU layers -> attentive
statistics pooling -> linear projection to a d-dim embedding.  The forward
pass records every intermediate needed to compute exact derivatives of a
scalar loss with respect to the input samples (the attack path) or the
parameters (the training path), as plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..audio import Waveform
from ..dsp import MEL_LOG_FLOOR, frame_signal, hann_window, mel_filterbank, overlap_add

VAR_FLOOR = 1e-6
MIN_MEL_FRAMES = 4


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError(f"embedding must be 1-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass
class ModelParams:
    """All learnable tensors plus the frontend configuration.

    conv weights are [out_ch, in_ch, 3, 3] with stride 2 along time and 1
    along the Mel axis; attn maps frame features (feat_dim) through a tanh
    bottleneck to scalar logits; fc maps [mean; std] to the embedding.
    """

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    attn_w: np.ndarray
    attn_b: np.ndarray
    attn_v: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray
    frame: int = 512
    hop: int = 160
    n_mels: int = 40

    @property
    def feat_dim(self) -> int:
        return self.conv2_w.shape[0] * self.n_mels

    @property
    def emb_dim(self) -> int:
        return self.fc_w.shape[0]

    def tensors(self) -> list[np.ndarray]:
        """Learnable tensors in serialization order."""
        return [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.attn_w,
            self.attn_b,
            self.attn_v,
            self.fc_w,
            self.fc_b,
        ]

    def validate(self) -> None:
        for t in self.tensors():
            if not np.all(np.isfinite(t)):
                raise ValueError("model parameters contain non-finite values")
        if self.fc_w.shape[1] != 2 * self.feat_dim:
            raise ValueError(
                f"fc expects {2 * self.feat_dim} inputs (mean+std), has {self.fc_w.shape[1]}"
            )


def init_params(
    seed: int,
    frame: int = 512,
    hop: int = 160,
    n_mels: int = 40,
    conv_channels: tuple[int, int] = (8, 16),
    attn_dim: int = 64,
    emb_dim: int = 64,
) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([0xE33D, seed]))
    c1, c2 = conv_channels
    feat = c2 * n_mels

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    params = ModelParams(
        conv1_w=he((c1, 1, 3, 3), 9),
        conv1_b=np.zeros(c1),
        conv2_w=he((c2, c1, 3, 3), 9 * c1),
        conv2_b=np.zeros(c2),
        attn_w=he((attn_dim, feat), feat),
        attn_b=np.zeros(attn_dim),
        attn_v=he((attn_dim,), attn_dim),
        fc_w=he((emb_dim, 2 * feat), 2 * feat),
        fc_b=np.zeros(emb_dim),
        frame=frame,
        hop=hop,
        n_mels=n_mels,
    )
    params.validate()
    return params


@lru_cache(maxsize=8)
def _cached_filterbank(sample_rate: int, frame: int, n_mels: int) -> np.ndarray:
    fb = mel_filterbank(sample_rate, frame, n_mels)
    fb.flags.writeable = False
    return fb


def _conv2d_forward(x, w, b, stride):
    """Stride-(sh, sw) 'same' conv via 9 strided slices; returns (out, cache)."""
    B, cin, H, W = x.shape
    cout, _, kh, kw = w.shape
    sh, sw = stride
    Ho = -(-H // sh)
    Wo = -(-W // sw)
    ph = max((Ho - 1) * sh + kh - H, 0)
    pw = max((Wo - 1) * sw + kw - W, 0)
    pt, pl = ph // 2, pw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pt, ph - pt), (pl, pw - pl)))
    cols = np.empty((B, cin, kh, kw, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw]
    out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))  # [B, Ho, Wo, cout]
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    cache = ((B, cin, H, W), xp.shape, (pt, pl), stride, w, cols)
    return out, cache


def _conv2d_backward(dout, cache, want_param_grads):
    (B, cin, H, W), xp_shape, (pt, pl), (sh, sw), w, cols = cache
    _, _, kh, kw = w.shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    # dcols[b, c, i, j, y, x] = sum_o dout[b, o, y, x] * w[o, c, i, j]
    dcols = np.tensordot(dout, w, axes=([1], [0]))  # [B, Ho, Wo, cin, kh, kw]
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += dcols[:, :, i, j]
    dx = dxp[:, :, pt : pt + H, pl : pl + W]
    if not want_param_grads:
        return dx, None, None
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 4, 5]))
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


@dataclass
class GradientTape:
    """Record of one batched forward pass, consumed by the backward helpers."""

    params: ModelParams
    sample_rate: int
    n_samples: int
    win: np.ndarray = field(repr=False)
    fb: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)
    mel_power: np.ndarray = field(repr=False)
    conv_caches: tuple = field(repr=False)
    z1: np.ndarray = field(repr=False)
    z2: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    mu: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    pooled: np.ndarray = field(repr=False)

    @property
    def batch_size(self) -> int:
        return self.Z.shape[0]


def forward_batch(params: ModelParams, x: np.ndarray, sample_rate: int) -> tuple[np.ndarray, GradientTape]:
    """Embed a [B, L] batch of equal-length signals; returns ([B, d], tape)."""
    params.validate()
    if x.ndim != 2:
        raise ValueError(f"expected [batch, samples], got shape {x.shape}")
    n_frames = (x.shape[1] - params.frame) // params.hop + 1 if x.shape[1] >= params.frame else 0
    if n_frames < MIN_MEL_FRAMES:
        raise ValueError(
            f"input of {x.shape[1]} samples yields {n_frames} Mel frames; need >= {MIN_MEL_FRAMES}"
        )
    win = hann_window(params.frame)
    fw = frame_signal(x, params.frame, params.hop) * win
    Z = np.fft.rfft(fw, axis=-1)
    power = Z.real**2 + Z.imag**2
    fb = _cached_filterbank(sample_rate, params.frame, params.n_mels)
    mel_power = power @ fb.T + MEL_LOG_FLOOR
    M = np.log(mel_power)

    z1, cache1 = _conv2d_forward(M[:, None, :, :], params.conv1_w, params.conv1_b, (2, 1))
    x1 = np.maximum(z1, 0.0)
    z2, cache2 = _conv2d_forward(x1, params.conv2_w, params.conv2_b, (2, 1))
    x2 = np.maximum(z2, 0.0)

    B, c2, T2, nm = x2.shape
    h = x2.transpose(0, 2, 1, 3).reshape(B, T2, c2 * nm)
    u = np.tanh(h @ params.attn_w.T + params.attn_b)
    e = u @ params.attn_v
    a = np.exp(e - e.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    mu = np.einsum("bt,btf->bf", a, h)
    m2 = np.einsum("bt,btf->bf", a, h * h)
    sigma = np.sqrt(m2 - mu**2 + VAR_FLOOR)
    pooled = np.concatenate([mu, sigma], axis=1)
    emb = pooled @ params.fc_w.T + params.fc_b

    tape = GradientTape(
        params=params,
        sample_rate=sample_rate,
        n_samples=x.shape[1],
        win=win,
        fb=fb,
        Z=Z,
        mel_power=mel_power,
        conv_caches=(cache1, cache2),
        z1=z1,
        z2=z2,
        h=h,
        u=u,
        a=a,
        mu=mu,
        sigma=sigma,
        pooled=pooled,
    )
    return emb, tape


def backward_batch(tape: GradientTape, upstream: np.ndarray, want_input: bool = True, want_params: bool = False):
    """Pull d(loss)/d(embedding) [B, d] back to inputs and/or parameters.

    Returns (dx [B, L] or None, dict of parameter gradients or None).
    ReLU uses subgradient 0 at the kink; zero-power Mel cells get the exact
    finite gradient through the log floor.
    """
    p = tape.params
    upstream = np.asarray(upstream, dtype=np.float64)
    B, feat2 = tape.pooled.shape
    if upstream.shape != (B, p.emb_dim):
        raise ValueError(f"upstream shape {upstream.shape} != {(B, p.emb_dim)}")
    h, u, a, mu, sigma = tape.h, tape.u, tape.a, tape.mu, tape.sigma
    feat = feat2 // 2

    param_grads: dict[str, np.ndarray] | None = {} if want_params else None
    dpooled = upstream @ p.fc_w
    if want_params:
        param_grads["fc_w"] = upstream.T @ tape.pooled
        param_grads["fc_b"] = upstream.sum(axis=0)

    dmu = dpooled[:, :feat].copy()
    dsigma = dpooled[:, feat:]
    dvar = dsigma / (2.0 * sigma)
    dm2 = dvar
    dmu -= 2.0 * mu * dvar

    da = np.einsum("bf,btf->bt", dmu, h) + np.einsum("bf,btf->bt", dm2, h * h)
    dh = a[:, :, None] * (dmu[:, None, :] + 2.0 * h * dm2[:, None, :])
    de = a * (da - np.sum(a * da, axis=1, keepdims=True))
    du = de[:, :, None] * p.attn_v
    dpre = du * (1.0 - u * u)
    dh += dpre @ p.attn_w
    if want_params:
        param_grads["attn_v"] = np.einsum("bt,bta->a", de, u)
        param_grads["attn_w"] = np.einsum("bta,btf->af", dpre, h)
        param_grads["attn_b"] = dpre.sum(axis=(0, 1))

    c2 = p.conv2_w.shape[0]
    T2 = h.shape[1]
    dx2 = dh.reshape(B, T2, c2, p.n_mels).transpose(0, 2, 1, 3)
    dz2 = dx2 * (tape.z2 > 0.0)
    dx1, dw2, db2 = _conv2d_backward(dz2, tape.conv_caches[1], want_params)
    dz1 = dx1 * (tape.z1 > 0.0)
    dx0, dw1, db1 = _conv2d_backward(dz1, tape.conv_caches[0], want_params)
    if want_params:
        param_grads["conv2_w"] = dw2
        param_grads["conv2_b"] = db2
        param_grads["conv1_w"] = dw1
        param_grads["conv1_b"] = db1

    if not want_input:
        return None, param_grads

    dM = dx0[:, 0]
    dpower = (dM / tape.mel_power) @ tape.fb
    # power = Re(Z)^2 + Im(Z)^2, so dL/dRe + i*dL/dIm = 2 * dpower * Z.  The
    # rfft adjoint is N * irfft of that with interior bins halved and the
    # imaginary parts of the DC/Nyquist bins dropped (they never vary).
    G = 2.0 * dpower * tape.Z
    A = 0.5 * G
    A[..., 0] = G[..., 0].real
    A[..., -1] = G[..., -1].real
    dfw = p.frame * np.fft.irfft(A, n=p.frame, axis=-1)
    dx = overlap_add(dfw * tape.win, p.hop, tape.n_samples)
    return dx, param_grads


def forward(params: ModelParams, w: Waveform) -> tuple[Embedding, GradientTape]:
    """Embed one waveform; the tape supports input_gradient afterwards."""
    emb, tape = forward_batch(params, w.samples[None, :], w.sample_rate)
    return Embedding(emb[0]), tape


def input_gradient(tape: GradientTape, upstream: np.ndarray) -> np.ndarray:
    """Exact d(upstream . embedding)/d(input sample), length = input length."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if tape.batch_size != 1:
        raise ValueError("input_gradient expects a tape from a single-waveform forward")
    if upstream.shape != (tape.params.emb_dim,):
        raise ValueError(f"upstream shape {upstream.shape} != ({tape.params.emb_dim},)")
    dx, _ = backward_batch(tape, upstream[None, :], want_input=True, want_params=False)
    return dx[0]


def cosine_score(a: Embedding, b: Embedding) -> float:
    """Cosine similarity in [-1, 1]; rejects zero-norm embeddings."""
    if a.dim != b.dim:
        raise ValueError(f"embedding dims differ: {a.dim} vs {b.dim}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine score undefined for zero-norm embedding")
    return float(np.clip(np.dot(a.values, b.values) / (na * nb), -1.0, 1.0))


def cosine_scores_and_grads(emb: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched cosine against one fixed target: scores [B] and d(score)/d(emb) [B, d]."""
    norms = np.linalg.norm(emb, axis=1)
    tn = float(np.linalg.norm(target))
    if tn == 0.0 or np.any(norms == 0.0):
        raise ValueError("cosine score undefined for zero-norm embedding")
    dots = emb @ target
    scores = dots / (norms * tn)
    grads = target[None, :] / (norms[:, None] * tn) - (scores / norms**2)[:, None] * emb
    return scores, grads
