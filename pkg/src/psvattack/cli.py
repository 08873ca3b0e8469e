"""Command-line orchestration: corpus, training, RIR tools, crafting, evaluation.

Every run is determined by (config file + flag overrides + seed); each
subcommand writes the effective configuration into the output directory in
the same section/key layout it reads, so a run can be replayed with
`--config <echo file>` alone.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from .attack import AttackConfig, craft, make_train_set, save_delta, write_provenance
from .audio import Perturbation, WavFormatError, load_wav
from .dsp import (
    Rir,
    cross_correlation_peak,
    estimate_rir,
    fft_convolve,
    load_rir,
    save_rir,
    sine_sweep,
    synth_rir,
)
from .embedder import (
    ModelFormatError,
    calibrate_threshold,
    enrollment_embedding,
    load_model,
    model_hash,
    save_model,
    train,
)
from .psv_sim import evaluate_attack, load_corpus, metrics_report, save_corpus, synth_corpus


class _Resolver:
    """Flag value if given, else config-file value, else the built-in default."""

    def __init__(self, config_path: str | None, section: str):
        self.parser = configparser.ConfigParser()
        if config_path:
            read = self.parser.read(config_path)
            if not read:
                raise FileNotFoundError(f"config file not found: {config_path}")
        self.section = section
        self.effective: dict[str, object] = {}

    def get(self, key, flag_value, default, cast=str):
        if flag_value is not None:
            value = flag_value
        elif self.parser.has_option(self.section, key):
            raw = self.parser.get(self.section, key)
            value = (raw.lower() in ("1", "true", "yes", "on")) if cast is bool else cast(raw)
        else:
            value = default
        self.effective[key] = value
        return value

    def echo(self, out_dir: Path, name: str) -> Path:
        out = configparser.ConfigParser()
        out[self.section] = {
            k: (repr(v) if isinstance(v, float) else str(v))
            for k, v in self.effective.items()
            if v is not None
        }
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / name
        with open(path, "w") as fh:
            out.write(fh)
        return path


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_threshold(path) -> float:
    record = configparser.ConfigParser()
    if not record.read(path):
        raise FileNotFoundError(f"threshold record not found: {path}")
    return record.getfloat("calibration", "theta")


def _sorted_rirs(directory) -> list[Rir]:
    directory = Path(directory)
    paths = sorted(directory.glob("*.wav"))
    if not paths:
        raise FileNotFoundError(f"no RIR wav files under {directory}")
    return [load_rir(p) for p in paths]


# ---------------------------------------------------------------- subcommands


def cmd_synth_corpus(args) -> int:
    r = _Resolver(args.config, "corpus")
    n_speakers = r.get("n_speakers", args.n_speakers, 8, int)
    n_utts = r.get("n_utts", args.n_utts, 10, int)
    utt_seconds = r.get("utt_seconds", args.utt_seconds, 2.0, float)
    seed = r.get("seed", args.seed, 0, int)
    out = _out_dir(args)
    corpus = synth_corpus(n_speakers, n_utts, utt_seconds, seed=seed)
    save_corpus(out, corpus)
    r.echo(out, "corpus-config.ini")
    print(f"corpus: {n_speakers} speakers x {n_utts} utterances ({utt_seconds} s) -> {out}")
    return 0


def cmd_train(args) -> int:
    r = _Resolver(args.config, "train")
    corpus_dir = r.get("corpus", args.corpus, None)
    if corpus_dir is None:
        raise ValueError("train needs --corpus (or a config value)")
    epochs = r.get("epochs", args.epochs, 15, int)
    seed = r.get("seed", args.seed, 0, int)
    lr = r.get("lr", args.lr, 0.2, float)
    out = _out_dir(args)

    corpus = load_corpus(corpus_dir)
    params = train(corpus, epochs=epochs, seed=seed, lr=lr)
    model_path = out / "model.psvm"
    save_model(model_path, params)
    # Calibrate on the float32 parameters every later command will load, so
    # theta matches the scores craft/evaluate reproduce.
    params = load_model(model_path)
    theta, eer = calibrate_threshold(params, corpus)

    record = configparser.ConfigParser()
    record["calibration"] = {"theta": repr(theta), "eer": repr(eer), "seed": str(seed)}
    with open(out / "threshold.ini", "w") as fh:
        record.write(fh)
    r.echo(out, "train-config.ini")
    print(f"model: {model_path} sha256 {model_hash(model_path)[:12]}")
    print(f"threshold: theta = {theta:.6f}, eer = {eer:.4f}")
    return 0


def cmd_estimate_rir(args) -> int:
    r = _Resolver(args.config, "rir")
    f1 = r.get("f1", args.f1, 100.0, float)
    f2 = r.get("f2", args.f2, 7000.0, float)
    duration = r.get("duration", args.duration, 2.0, float)
    sample_rate = r.get("sample_rate", args.sample_rate, 16000, int)
    seed = r.get("seed", args.seed, 0, int)
    simulate = r.get("simulate", args.simulate or None, False, bool)
    band_low = r.get("band_low", args.band_low, 800.0, float)
    band_high = r.get("band_high", args.band_high, 2400.0, float)
    recording = r.get("recording", args.recording, None)
    out = _out_dir(args)

    sweep = sine_sweep(f1, f2, duration, sample_rate)
    meta = {"f1": f1, "f2": f2, "duration": duration, "sample_rate": sample_rate}
    if simulate:
        truth = synth_rir(seed, sample_rate=sample_rate, band=(band_low, band_high))
        recorded = fft_convolve(sweep, truth)
        estimate = estimate_rir(recorded, sweep)
        save_rir(out / "rir-truth.wav", truth, extra_meta=meta)
        save_rir(out / "rir-estimated.wav", estimate, extra_meta=meta)
        ncc = cross_correlation_peak(estimate.taps.samples, truth.taps.samples)
        print(f"simulated room, seed {seed}: cross-correlation = {ncc:.4f}")
    else:
        if recording is None:
            raise ValueError("estimate-rir needs --recording unless --simulate is set")
        recorded = load_wav(recording, expect_rate=sample_rate)
        estimate = estimate_rir(recorded, sweep)
        save_rir(out / "rir-estimated.wav", estimate, extra_meta=meta)
        print(f"estimated {len(estimate)} taps from {recording}")
    r.echo(out, "rir-config.ini")
    return 0


def cmd_craft(args) -> int:
    r = _Resolver(args.config, "attack")
    corpus_dir = r.get("corpus", args.corpus, None)
    model_path = r.get("model", args.model, None)
    threshold_path = r.get("threshold", args.threshold, None)
    if corpus_dir is None or model_path is None or threshold_path is None:
        raise ValueError("craft needs --corpus, --model and --threshold")
    adversary = r.get("adversary", args.adversary, 0, int)
    target = r.get("target", args.target, 1, int)
    epsilon = r.get("epsilon", args.epsilon, 0.03, float)
    alpha1 = r.get("alpha1", args.alpha1, None, float)
    alpha2 = r.get("alpha2", args.alpha2, None, float)
    beta = r.get("beta", args.beta, 0.9, float)
    kappa = r.get("kappa", args.kappa, 0.1, float)
    gamma = r.get("gamma", args.gamma, 5.0, float)
    m1 = r.get("m1", args.m1, 2000, int)
    m2 = r.get("m2", args.m2, 1000, int)
    delta_len = r.get("delta_len", args.delta_len, 16000, int)
    seed = r.get("seed", args.seed, 0, int)
    skip_step2 = r.get("skip_step2", args.skip_step2 or None, False, bool)
    rir_dir = r.get("rir_dir", args.rir_dir, None)
    rir_train = r.get("rir_train", args.rir_train, 0, int)
    out = _out_dir(args)

    corpus = load_corpus(corpus_dir)
    params = load_model(model_path)
    theta = _load_threshold(threshold_path)
    if not (0 <= adversary < corpus.n_speakers and 0 <= target < corpus.n_speakers):
        raise ValueError(f"speaker indices must lie in [0, {corpus.n_speakers})")
    if adversary == target:
        raise ValueError("adversary and target must differ")

    rir_set = None
    n_rir_test = 0
    if rir_dir is not None:
        rirs = _sorted_rirs(rir_dir)
        n_train = rir_train if rir_train > 0 else len(rirs)
        if n_train > len(rirs):
            raise ValueError(f"rir_train={n_train} exceeds {len(rirs)} available RIRs")
        rir_set = tuple(rirs[:n_train])
        n_rir_test = len(rirs) - n_train

    cfg = AttackConfig(
        epsilon=epsilon,
        alpha1=alpha1,
        alpha2=alpha2,
        beta=beta,
        kappa=kappa,
        gamma=gamma,
        m1=m1,
        m2=m2,
        delta_len=delta_len,
        seed=seed,
        rir_set=rir_set,
    )
    train_set = make_train_set(corpus.waves(adversary, "train"), enrollment_embedding(params, corpus, target))
    delta, report = craft(params, train_set, cfg, theta, skip_step2=skip_step2)

    save_delta(out / "delta.wav", delta)
    save_delta(out / "delta-step1.wav", report.delta1)
    write_provenance(out / "provenance.txt", report, model_hash=model_hash(model_path))
    if rir_set is not None:
        with open(out / "provenance.txt", "a") as fh:
            fh.write(f"rir_train_count = {len(rir_set)}\nrir_test_count = {n_rir_test}\n")
    r.echo(out, "attack-config.ini")
    trained = max(row.min_score for row in report.step1_trace)
    print(
        f"craft {adversary}->{target}: {report.iterations} iterations, "
        f"iters_to_margin {report.iters_to_margin}, best train min score {trained:.4f}"
    )
    return 0


def cmd_evaluate(args) -> int:
    r = _Resolver(args.config, "evaluate")
    corpus_dir = r.get("corpus", args.corpus, None)
    model_path = r.get("model", args.model, None)
    threshold_path = r.get("threshold", args.threshold, None)
    if corpus_dir is None or model_path is None or threshold_path is None:
        raise ValueError("evaluate needs --corpus, --model and --threshold")
    adversary = r.get("adversary", args.adversary, 0, int)
    target = r.get("target", args.target, 1, int)
    deltas = args.delta or []
    r.get("delta", " ".join(str(d) for d in deltas) or None, None)
    rir_dir = r.get("rir_dir", args.rir_dir, None)
    rir_skip = r.get("rir_skip", args.rir_skip, 0, int)
    out = _out_dir(args)

    corpus = load_corpus(corpus_dir)
    params = load_model(model_path)
    theta = _load_threshold(threshold_path)
    target_emb = enrollment_embedding(params, corpus, target)
    probes = corpus.waves(adversary, "test")

    rir_test = None
    if rir_dir is not None:
        rirs = _sorted_rirs(rir_dir)
        if rir_skip >= len(rirs):
            raise ValueError(f"rir_skip={rir_skip} leaves no test RIRs of {len(rirs)}")
        rir_test = rirs[rir_skip:]

    blocks = []
    runs = [(None, "clean")] if not deltas else [(p, Path(p).stem) for p in deltas]
    for delta_path, label in runs:
        if delta_path is None:
            delta = None
        else:
            w = load_wav(delta_path, expect_rate=corpus.sample_rate)
            delta = Perturbation(w, float(np.max(np.abs(w.samples))))
        metrics = evaluate_attack(params, theta, delta, probes, target_emb, rir_test=rir_test)
        header = {
            "delta": label,
            "adversary": adversary,
            "target": target,
            "theta": repr(theta),
            "n_test_rirs": len(rir_test) if rir_test else 0,
        }
        blocks.append(metrics_report(metrics, header=header))
        print(
            f"{label}: asr = {metrics.asr:.4f}, mean snr = {metrics.mean_snr_db:.2f} dB, "
            f"mean distortion = {metrics.mean_distortion:.6f}"
        )
    (out / "evaluation.txt").write_text("\n".join(blocks))
    r.echo(out, "evaluate-config.ini")
    return 0


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psvattack",
        description="Universal audio perturbations against a speaker-verification pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI file with a section per subcommand")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory (default: current)")
        p.add_argument("--threads", type=int, default=None, help="reserved; pipeline is single-threaded")

    p = sub.add_parser("synth-corpus", help="write a deterministic synthetic speech corpus")
    common(p)
    p.add_argument("--n-speakers", type=int, dest="n_speakers")
    p.add_argument("--n-utts", type=int, dest="n_utts")
    p.add_argument("--utt-seconds", type=float, dest="utt_seconds")
    p.set_defaults(fn=cmd_synth_corpus)

    p = sub.add_parser("train", help="train the embedder and calibrate the threshold")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("estimate-rir", help="estimate a room response from a sweep recording")
    common(p)
    p.add_argument("--recording", help="WAV of the played-back sweep")
    p.add_argument("--simulate", action="store_true", help="synthesize the room instead")
    p.add_argument("--f1", type=float)
    p.add_argument("--f2", type=float)
    p.add_argument("--duration", type=float)
    p.add_argument("--sample-rate", type=int, dest="sample_rate")
    p.add_argument("--band-low", type=float, dest="band_low")
    p.add_argument("--band-high", type=float, dest="band_high")
    p.set_defaults(fn=cmd_estimate_rir)

    p = sub.add_parser("craft", help="craft a universal perturbation")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--model")
    p.add_argument("--threshold", help="threshold.ini from the train step")
    p.add_argument("--adversary", type=int)
    p.add_argument("--target", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha1", type=float)
    p.add_argument("--alpha2", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--m1", type=int)
    p.add_argument("--m2", type=int)
    p.add_argument("--delta-len", type=int, dest="delta_len")
    p.add_argument("--skip-step2", action="store_true", dest="skip_step2")
    p.add_argument("--rir-dir", dest="rir_dir")
    p.add_argument("--rir-train", type=int, dest="rir_train", help="first K RIRs (sorted) train the craft")
    p.set_defaults(fn=cmd_craft)

    p = sub.add_parser("evaluate", help="score perturbations on held-out utterances")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--model")
    p.add_argument("--threshold")
    p.add_argument("--adversary", type=int)
    p.add_argument("--target", type=int)
    p.add_argument("--delta", action="append", help="delta WAV; repeat to compare; omit for clean baseline")
    p.add_argument("--rir-dir", dest="rir_dir")
    p.add_argument("--rir-skip", type=int, dest="rir_skip", help="skip the first K RIRs (the training ones)")
    p.set_defaults(fn=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, WavFormatError, ModelFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
