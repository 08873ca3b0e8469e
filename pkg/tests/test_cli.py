"""End-to-end subcommand behavior, exit codes, and replayability."""

import configparser

import numpy as np
import pytest

from psvattack.audio import load_wav
from psvattack.cli import main
from psvattack.dsp import synth_rir, save_rir


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus + trained model shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    run = root / "run"
    assert (
        main(
            [
                "synth-corpus",
                "--out", str(corpus),
                "--n-speakers", "4",
                "--n-utts", "6",
                "--utt-seconds", "1.0",
                "--seed", "5",
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "train",
                "--corpus", str(corpus),
                "--out", str(run),
                "--epochs", "3",
                "--seed", "5",
            ]
        )
        == 0
    )
    return {"root": root, "corpus": corpus, "run": run}


def craft_args(ws, out, extra=()):
    return [
        "craft",
        "--corpus", str(ws["corpus"]),
        "--model", str(ws["run"] / "model.psvm"),
        "--threshold", str(ws["run"] / "threshold.ini"),
        "--adversary", "0",
        "--target", "2",
        "--m1", "10",
        "--m2", "5",
        "--seed", "5",
        "--out", str(out),
        *extra,
    ]


def test_synth_corpus_rerun_identical_manifest(tmp_path):
    args = ["synth-corpus", "--n-speakers", "4", "--n-utts", "6", "--utt-seconds", "0.5", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "manifest.ini").read_bytes()
    b = (tmp_path / "b" / "manifest.ini").read_bytes()
    assert a == b
    wa = (tmp_path / "a" / "spk00" / "utt00.wav").read_bytes()
    wb = (tmp_path / "b" / "spk00" / "utt00.wav").read_bytes()
    assert wa == wb


def test_synth_corpus_rejects_three_speakers(tmp_path, capsys):
    assert main(["synth-corpus", "--n-speakers", "3", "--out", str(tmp_path)]) == 1
    assert "at least 4 speakers" in capsys.readouterr().err


def test_train_outputs_and_determinism(workspace, tmp_path):
    run = workspace["run"]
    assert (run / "model.psvm").is_file()
    record = configparser.ConfigParser()
    record.read(run / "threshold.ini")
    assert record.getfloat("calibration", "eer") <= 0.10
    theta = record.getfloat("calibration", "theta")

    rerun = tmp_path / "rerun"
    assert (
        main(["train", "--corpus", str(workspace["corpus"]), "--out", str(rerun), "--epochs", "3", "--seed", "5"])
        == 0
    )
    record2 = configparser.ConfigParser()
    record2.read(rerun / "threshold.ini")
    assert record2.getfloat("calibration", "theta") == theta
    assert (rerun / "model.psvm").read_bytes() == (run / "model.psvm").read_bytes()


def test_train_requires_corpus(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 1
    assert "corpus" in capsys.readouterr().err


def test_estimate_rir_simulate(tmp_path, capsys):
    assert main(["estimate-rir", "--simulate", "--seed", "2", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    ncc = float(out.rsplit("=", 1)[1])
    assert ncc >= 0.9
    meta = configparser.ConfigParser()
    meta.read(tmp_path / "rir-estimated.wav.meta.ini")
    assert meta["params"]["f1"] == "100.0"
    assert meta["params"]["f2"] == "7000.0"
    assert meta["params"]["duration"] == "2.0"
    assert meta["params"]["sample_rate"] == "16000"
    assert (tmp_path / "rir-truth.wav").is_file()


def test_estimate_rir_rejects_reversed_band(tmp_path, capsys):
    code = main(["estimate-rir", "--simulate", "--f1", "5000", "--f2", "100", "--out", str(tmp_path)])
    assert code == 1
    assert "f1" in capsys.readouterr().err


def test_estimate_rir_requires_recording_without_simulate(tmp_path, capsys):
    assert main(["estimate-rir", "--out", str(tmp_path)]) == 1
    assert "--recording" in capsys.readouterr().err


def test_craft_skip_step2_copies_step1(workspace, tmp_path):
    out = tmp_path / "atk"
    assert main(craft_args(workspace, out, ["--skip-step2"])) == 0
    assert (out / "delta.wav").read_bytes() == (out / "delta-step1.wav").read_bytes()
    prov = (out / "provenance.txt").read_text()
    assert "epsilon = 0.03" in prov
    assert "iterations_step2 = 0" in prov


def test_craft_replays_byte_identical_from_echo(workspace, tmp_path):
    first = tmp_path / "first"
    again = tmp_path / "again"
    assert main(craft_args(workspace, first)) == 0
    assert main(["craft", "--config", str(first / "attack-config.ini"), "--out", str(again)]) == 0
    assert (first / "delta.wav").read_bytes() == (again / "delta.wav").read_bytes()
    assert (first / "delta-step1.wav").read_bytes() == (again / "delta-step1.wav").read_bytes()


def test_craft_rejects_same_speaker(workspace, tmp_path, capsys):
    args = craft_args(workspace, tmp_path)
    args[args.index("--target") + 1] = "0"
    assert main(args) == 1
    assert "must differ" in capsys.readouterr().err


def test_craft_with_rir_dir_lists_split(workspace, tmp_path):
    rir_dir = tmp_path / "rirs"
    rir_dir.mkdir()
    for i in range(3):
        save_rir(rir_dir / f"room{i}.wav", synth_rir(i, decay_t60=0.12, n_reflections=6))
    out = tmp_path / "atk"
    assert main(craft_args(workspace, out, ["--rir-dir", str(rir_dir), "--rir-train", "2"])) == 0
    prov = (out / "provenance.txt").read_text()
    assert "rir_train_count = 2" in prov
    assert "rir_test_count = 1" in prov


def test_evaluate_clean_baseline_and_comparison(workspace, tmp_path, capsys):
    atk = tmp_path / "atk"
    assert main(craft_args(workspace, atk)) == 0
    ev = tmp_path / "ev"
    base = [
        "evaluate",
        "--corpus", str(workspace["corpus"]),
        "--model", str(workspace["run"] / "model.psvm"),
        "--threshold", str(workspace["run"] / "threshold.ini"),
        "--adversary", "0",
        "--target", "2",
        "--out", str(ev),
    ]
    assert main(base) == 0
    text = (ev / "evaluation.txt").read_text()
    assert "delta = clean" in text
    assert "asr = 0.0000" in text

    assert (
        main(base + ["--delta", str(atk / "delta.wav"), "--delta", str(atk / "delta-step1.wav")])
        == 0
    )
    text = (ev / "evaluation.txt").read_text()
    assert "delta = delta" in text
    assert "delta = delta-step1" in text


def test_evaluate_missing_model(workspace, tmp_path, capsys):
    assert (
        main(
            [
                "evaluate",
                "--corpus", str(workspace["corpus"]),
                "--model", str(tmp_path / "missing.psvm"),
                "--threshold", str(workspace["run"] / "threshold.ini"),
                "--out", str(tmp_path),
            ]
        )
        == 1
    )
    assert "missing.psvm" in capsys.readouterr().err


def test_delta_wav_respects_epsilon_after_quantization(workspace, tmp_path):
    out = tmp_path / "atk"
    assert main(craft_args(workspace, out)) == 0
    w = load_wav(out / "delta.wav")
    assert np.max(np.abs(w.samples)) <= 0.03 + 1.0 / 32768
