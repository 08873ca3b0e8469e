"""Waveform container, WAV round trips, tiling, and level arithmetic."""

import numpy as np
import pytest

from psvattack.audio import (
    Perturbation,
    Waveform,
    WavFormatError,
    clip_inf,
    fold_tiled_gradient,
    load_wav,
    mix,
    pcm16_bytes,
    save_wav,
    snr_db,
    tile_array,
    tile_to_length,
)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 3)), 16000)
    with pytest.raises(ValueError):
        Waveform(np.array([]), 16000)
    with pytest.raises(ValueError):
        Waveform(np.zeros(10), 0)
    w = Waveform(np.zeros(10, dtype=np.float32), 16000)
    assert w.samples.dtype == np.float64
    assert len(w) == 10
    assert w.duration == pytest.approx(10 / 16000)


def test_perturbation_budget():
    Perturbation(Waveform(np.full(8, 0.03), 16000), 0.03)
    with pytest.raises(ValueError):
        Perturbation(Waveform(np.full(8, 0.031), 16000), 0.03)
    with pytest.raises(ValueError):
        Perturbation(Waveform(np.zeros(8), 16000), -0.1)


def test_wav_round_trip_small_amplitude(tmp_path):
    # For |w| <= 0.5 the save scale (32767) and load scale (32768) differ by
    # less than half a quantization step, so error stays under 1/32768.
    rng = np.random.default_rng(11)
    w = Waveform(rng.uniform(-0.5, 0.5, 4000), 16000)
    path = tmp_path / "a.wav"
    save_wav(path, w)
    back = load_wav(path, expect_rate=16000)
    assert back.sample_rate == 16000
    assert len(back) == len(w)
    assert np.max(np.abs(back.samples - w.samples)) <= 1.0 / 32768.0


def test_wav_round_trip_full_range(tmp_path):
    # Full-range error bound: |round(w*32767)/32768 - w| <= (0.5 + |w|)/32768.
    rng = np.random.default_rng(12)
    w = Waveform(rng.uniform(-1.0, 1.0, 4000), 16000)
    path = tmp_path / "b.wav"
    save_wav(path, w)
    back = load_wav(path)
    bound = (0.5 + np.abs(w.samples)) / 32768.0
    assert np.all(np.abs(back.samples - w.samples) <= bound + 1e-15)


def test_save_rejects_clipping(tmp_path):
    with pytest.raises(ValueError):
        save_wav(tmp_path / "c.wav", Waveform(np.array([0.0, 1.0001]), 16000))


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "nope.wav")


def test_load_rejects_bad_formats(tmp_path):
    import wave

    stereo = tmp_path / "stereo.wav"
    with wave.open(str(stereo), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(b"\x00\x00" * 40)
    with pytest.raises(WavFormatError):
        load_wav(stereo)

    eight_bit = tmp_path / "eight.wav"
    with wave.open(str(eight_bit), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(1)
        fh.setframerate(16000)
        fh.writeframes(b"\x80" * 20)
    with pytest.raises(WavFormatError):
        load_wav(eight_bit)

    not_riff = tmp_path / "garbage.wav"
    not_riff.write_bytes(b"this is not a wav file")
    with pytest.raises(WavFormatError):
        load_wav(not_riff)


def test_load_rate_mismatch(tmp_path):
    path = tmp_path / "r8k.wav"
    save_wav(path, Waveform(np.zeros(100), 8000))
    with pytest.raises(WavFormatError):
        load_wav(path, expect_rate=16000)
    assert load_wav(path).sample_rate == 8000


def test_tile_to_length():
    seg = Waveform(np.array([1.0, 2.0, 3.0]), 16000)
    out = tile_to_length(seg, 8)
    assert np.array_equal(out.samples, [1, 2, 3, 1, 2, 3, 1, 2])
    assert len(tile_to_length(seg, 2)) == 2
    with pytest.raises(ValueError):
        tile_to_length(seg, 0)


def test_fold_is_tiling_adjoint():
    # <tile(seg), g> == <seg, fold(g)> for every seg, g: folding must gather
    # exactly the positions tiling scattered to.
    rng = np.random.default_rng(21)
    for _ in range(20):
        p = int(rng.integers(1, 40))
        n = int(rng.integers(1, 200))
        seg = rng.normal(size=p)
        g = rng.normal(size=n)
        lhs = float(np.dot(tile_array(seg, n), g))
        rhs = float(np.dot(seg, fold_tiled_gradient(g, p)))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_clip_inf():
    w = Waveform(np.array([-0.5, -0.01, 0.0, 0.01, 0.5]), 16000)
    c = clip_inf(w, 0.03)
    assert np.array_equal(c.samples, [-0.03, -0.01, 0.0, 0.01, 0.03])
    assert np.array_equal(clip_inf(w, 0.0).samples, np.zeros(5))


def test_mix_checks():
    x = Waveform(np.ones(10), 16000)
    d = Waveform(np.full(10, 0.25), 16000)
    assert np.allclose(mix(x, d).samples, 1.25)  # no clamping
    with pytest.raises(ValueError):
        mix(x, Waveform(np.ones(9), 16000))
    with pytest.raises(ValueError):
        mix(x, Waveform(np.ones(10), 8000))


def test_snr_db():
    t = np.arange(16000) / 16000
    clean = Waveform(np.sin(2 * np.pi * 440 * t), 16000)
    pert = Waveform(0.1 * np.sin(2 * np.pi * 440 * t), 16000)
    assert snr_db(clean, pert) == pytest.approx(20.0, abs=1e-9)
    assert snr_db(clean, Waveform(np.zeros(16000), 16000)) == np.inf
    with pytest.raises(ValueError):
        snr_db(Waveform(np.zeros(10), 16000), Waveform(np.ones(10), 16000))


def test_pcm16_bytes_deterministic():
    rng = np.random.default_rng(31)
    w = Waveform(rng.uniform(-0.9, 0.9, 500), 16000)
    assert pcm16_bytes(w) == pcm16_bytes(Waveform(w.samples.copy(), 16000))
    assert len(pcm16_bytes(w)) == 1000
