"""Finite-difference checks for every gradient the attack relies on.

Each differentiable stage gets at least three random small instances; the
analytic directional derivative g.v must match the central difference
(f(x + h v) - f(x - h v)) / 2h within 1e-3 relative.
"""

import numpy as np
import pytest

from psvattack.attack import (
    AttackConfig,
    loss_l1,
    loss_l1_rir,
    loss_l2,
    loss_total,
    make_train_set,
)
from psvattack.audio import Perturbation, Waveform
from psvattack.dsp import Rir, identity_rir
from psvattack.embedder.net import (
    Embedding,
    _conv2d_backward,
    _conv2d_forward,
    backward_batch,
    cosine_scores_and_grads,
    forward_batch,
    init_params,
)

REL_TOL = 1e-3
FD_H = 1e-6
SR = 16000


def directional_fd(f, x, v, h=FD_H):
    return (f(x + h * v) - f(x - h * v)) / (2.0 * h)


def check_direction(f, x, grad, rng, h=FD_H):
    """Compare grad.v against a central difference along a random direction."""
    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    analytic = float(np.sum(grad * v))
    numeric = directional_fd(f, x, v, h)
    scale = max(abs(analytic), abs(numeric), 1e-8)
    assert abs(analytic - numeric) / scale < REL_TOL, (
        f"analytic {analytic} vs numeric {numeric}"
    )


def tiny_params(seed):
    p = init_params(seed, n_mels=10, conv_channels=(2, 3), attn_dim=5, emb_dim=4)
    # Freshly initialized conv biases are exactly zero, which parks ReLU-dead
    # patches exactly on the kink where two-sided differences disagree with
    # any subgradient.  Jitter the biases so FD probes a generic point.
    rng = np.random.default_rng(seed + 999)
    p.conv1_b = 0.01 * rng.standard_normal(p.conv1_b.shape)
    p.conv2_b = 0.01 * rng.standard_normal(p.conv2_b.shape)
    return p


# ------------------------------------------------------ network input gradient


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_frontend_and_network_input_gradient(seed):
    """d(U . e(x))/dx through mel frontend, convs, pooling and fc."""
    rng = np.random.default_rng(seed)
    params = tiny_params(seed)
    x = 0.1 * rng.standard_normal((2, 3200))  # 0.2 s per row
    upstream = rng.standard_normal((2, 4))

    def f(xv):
        emb, _ = forward_batch(params, xv, SR)
        return float(np.sum(upstream * emb))

    emb, tape = forward_batch(params, x, SR)
    dx, _ = backward_batch(tape, upstream)
    for _ in range(3):
        check_direction(f, x, dx, rng)


# -------------------------------------------------------------- conv2d kernel


@pytest.mark.parametrize(
    "seed,shape,cout,stride",
    [(0, (2, 2, 9, 7), 3, (2, 1)), (1, (1, 3, 8, 6), 2, (1, 1)), (2, (2, 1, 11, 5), 4, (2, 2))],
)
def test_conv2d_gradients(seed, shape, cout, stride):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((cout, shape[1], 3, 3))
    b = rng.standard_normal(cout)
    out, cache = _conv2d_forward(x, w, b, stride)
    upstream = rng.standard_normal(out.shape)
    dx, dw, db = _conv2d_backward(upstream, cache, want_param_grads=True)

    check_direction(lambda xv: float(np.sum(upstream * _conv2d_forward(xv, w, b, stride)[0])), x, dx, rng)
    check_direction(lambda wv: float(np.sum(upstream * _conv2d_forward(x, wv, b, stride)[0])), w, dw, rng)
    check_direction(lambda bv: float(np.sum(upstream * _conv2d_forward(x, w, bv, stride)[0])), b, db, rng)


# ----------------------------------------------- pooling / fc parameter path


@pytest.mark.parametrize("seed", [3, 4, 5])
def test_pooling_and_fc_parameter_gradients(seed):
    rng = np.random.default_rng(seed)
    params = tiny_params(seed)
    x = 0.1 * rng.standard_normal((2, 3200))
    upstream = rng.standard_normal((2, 4))
    _, tape = forward_batch(params, x, SR)
    _, grads = backward_batch(tape, upstream, want_input=False, want_params=True)

    for name in ("attn_w", "attn_b", "attn_v", "fc_w", "fc_b", "conv1_w", "conv2_b"):
        base = getattr(params, name).copy()

        def f(tv, name=name, base=base):
            setattr(params, name, tv)
            try:
                emb, _ = forward_batch(params, x, SR)
            finally:
                setattr(params, name, base)
            return float(np.sum(upstream * emb))

        check_direction(f, base, grads[name], rng)


# --------------------------------------------------------------- cosine score


@pytest.mark.parametrize("seed", [6, 7, 8])
def test_cosine_score_gradient(seed):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((3, 6))
    target = rng.standard_normal(6)
    scores, grads = cosine_scores_and_grads(emb, target)
    weights = rng.standard_normal(3)

    def f(ev):
        s, _ = cosine_scores_and_grads(ev, target)
        return float(np.sum(weights * s))

    check_direction(f, emb, weights[:, None] * grads, rng)


# ------------------------------------------------------------- attack losses


def _loss_fixture(seed, n_utts=3, length=4000, delta_len=1600):
    rng = np.random.default_rng(seed)
    params = tiny_params(seed)
    waves = [
        Waveform(0.1 * rng.standard_normal(length), SR) for _ in range(n_utts)
    ]
    target = Embedding(rng.standard_normal(4))
    ts = make_train_set(waves, target)
    eps = 0.05
    d = Perturbation(Waveform(rng.uniform(-eps, eps, size=delta_len) * 0.9, SR), eps)
    return params, ts, d, eps


def _perturbed(d, v, h):
    return Perturbation(Waveform(d.segment.samples + h * v, SR), d.epsilon + abs(h) * 2)


def _check_delta_direction(f_of_samples, d, grad, rng):
    v = rng.standard_normal(len(d))
    v /= np.linalg.norm(v)
    analytic = float(np.sum(grad * v))
    numeric = (f_of_samples(_perturbed(d, v, FD_H)) - f_of_samples(_perturbed(d, v, -FD_H))) / (2 * FD_H)
    scale = max(abs(analytic), abs(numeric), 1e-8)
    assert abs(analytic - numeric) / scale < REL_TOL


@pytest.mark.parametrize("seed", [10, 11, 12])
def test_loss_l1_gradient(seed):
    params, ts, d, _ = _loss_fixture(seed)
    rng = np.random.default_rng(seed + 100)
    _, grad = loss_l1(params, ts, d, theta=0.6, kappa=0.5)
    _check_delta_direction(lambda dv: loss_l1(params, ts, dv, 0.6, 0.5)[0], d, grad, rng)


@pytest.mark.parametrize("seed", [13, 14, 15])
def test_loss_l1_rir_gradient(seed):
    params, ts, d, _ = _loss_fixture(seed)
    rng = np.random.default_rng(seed + 100)
    taps = rng.standard_normal(40)
    taps /= np.linalg.norm(taps)
    pair = (identity_rir(SR), Rir(Waveform(taps, SR)))
    _, grad = loss_l1_rir(params, ts, d, 0.6, 0.5, pair)
    _check_delta_direction(
        lambda dv: loss_l1_rir(params, ts, dv, 0.6, 0.5, pair)[0], d, grad, rng
    )


@pytest.mark.parametrize("seed", [16, 17, 18])
def test_loss_l2_gradient(seed):
    rng = np.random.default_rng(seed)
    eps = 0.05
    d = Perturbation(Waveform(rng.uniform(-eps, eps, size=1600) * 0.9, SR), eps)
    _, grad = loss_l2(d)
    _check_delta_direction(lambda dv: loss_l2(dv)[0], d, grad, rng)


@pytest.mark.parametrize("seed", [19, 20, 21])
def test_loss_total_gradient(seed):
    params, ts, d, _ = _loss_fixture(seed)
    rng = np.random.default_rng(seed + 100)
    _, grad = loss_total(params, ts, d, theta=0.6, kappa=0.5, gamma=2.0)
    _check_delta_direction(
        lambda dv: loss_total(params, ts, dv, 0.6, 0.5, 2.0)[0], d, grad, rng
    )


def run_full_suite():
    """Every check in this module, for callers that also need the wall-clock cost."""
    for seed in (0, 1, 2):
        test_frontend_and_network_input_gradient(seed)
    for case in [
        (0, (2, 2, 9, 7), 3, (2, 1)),
        (1, (1, 3, 8, 6), 2, (1, 1)),
        (2, (2, 1, 11, 5), 4, (2, 2)),
    ]:
        test_conv2d_gradients(*case)
    for seed in (3, 4, 5):
        test_pooling_and_fc_parameter_gradients(seed)
    for seed in (6, 7, 8):
        test_cosine_score_gradient(seed)
    for seed in (10, 11, 12):
        test_loss_l1_gradient(seed)
    for seed in (13, 14, 15):
        test_loss_l1_rir_gradient(seed)
    for seed in (16, 17, 18):
        test_loss_l2_gradient(seed)
    for seed in (19, 20, 21):
        test_loss_total_gradient(seed)
