"""Command-line surface: synth-data, features, train-codec, train, generate,
eval. Exit codes: 0 ok, 2 usage, 3 data/config, 4 numeric failure. Every
failure prints a single machine-parseable "ERROR[kind]: ..." line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dsp, metrics, report, rhythm, synth
from .codec import ResidualVQCodec, train_codec
from .config import PipelineConfig, load_config, save_config
from .errors import (
    ConfigError,
    GestureDrumsError,
    TrainingDivergedError,
)
from .inference import GenerationRequest, generate
from .model import init_model
from .schedule import GenerationConfig
from .training import train_loop

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"ERROR[usage]: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gesturedrums",
                     description="Gesture-to-drums generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[], help="write a synthetic drum corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-clips", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=6.0, help="clip length in seconds")

    p = sub.add_parser("features", help="extract rhythm features from a WAV")
    p.add_argument("in_wav")
    p.add_argument("out_dump")
    p.add_argument("--bands", type=int, choices=(1, 2, 3, 4), default=2)
    p.add_argument("--adaptive", dest="adaptive", action="store_true", default=True)
    p.add_argument("--no-adaptive", dest="adaptive", action="store_false")
    p.add_argument("--text", action="store_true", help="also write a .txt export")

    p = sub.add_parser("train-codec", help="train the residual-VQ codec")
    p.add_argument("--config", default="desk")
    p.add_argument("--corpus", required=True, help="directory of WAV files")
    p.add_argument("--out", required=True, help="codec checkpoint path")
    p.add_argument("--steps", type=int, default=None, help="override config step count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-dir", default=None, help="where to put the loss log + figure")

    p = sub.add_parser("train", help="train the masked transformer")
    p.add_argument("--config", default="desk")
    p.add_argument("--corpus", required=True)
    p.add_argument("--codec", required=True, help="trained codec checkpoint")
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-dir", default=None)

    p = sub.add_parser("generate", help="generate drums from prompts")
    p.add_argument("--config", default="desk")
    p.add_argument("--model", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--timbre", required=True, help="timbre prompt WAV")
    p.add_argument("--rhythm", required=True, help="rhythm prompt WAV")
    p.add_argument("--out", required=True, help="output WAV")
    p.add_argument("--trace", default=None, help="trace JSON path (default: out + .trace.json)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cfg-weight", type=float, default=2.0)
    p.add_argument("--temperature", type=float, default=10.0)
    p.add_argument("--causal-bias", type=float, default=1.0)
    p.add_argument("--schedule", default="8,8,8,8,8,4,4,4,4",
                   help="comma-separated per-codebook iteration counts")
    p.add_argument("--include-prefix", action="store_true")

    p = sub.add_parser("eval", help="score generations against prompts and references")
    p.add_argument("--gen-dir", required=True)
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--prompts", required=True, help="JSON list of prompt records")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("config", help="print a resolved config tree")
    p.add_argument("name", nargs="?", default="desk")
    return parser


def _load_corpus(directory):
    paths = sorted(Path(directory).glob("*.wav"))
    if not paths:
        raise ConfigError(f"no WAV files in corpus directory {directory}")
    return [dsp.load_wav(p) for p in paths]


def _cmd_synth_data(args) -> int:
    paths = synth.write_corpus(args.out, args.n_clips, args.seed, duration_s=args.duration)
    print(f"wrote {len(paths)} clips to {args.out}")
    return EXIT_OK


def _cmd_features(args) -> int:
    clip = dsp.load_wav(args.in_wav)
    feats = rhythm.extract(clip, n_bands=args.bands, adaptive=args.adaptive)
    rhythm.write_feature_dump(args.out_dump, feats)
    for i, (bin_idx, hz) in enumerate(
        zip(feats.split.split_bins, rhythm.split_frequencies_hz(feats.split, clip.sample_rate))
    ):
        print(f"split {i + 1}: bin {bin_idx} (~{hz:.0f} Hz)")
    if not feats.split.split_bins:
        print("split: none (single band)")
    print(f"bands={feats.n_bands} frames={feats.n_frames} hop={feats.hop}")
    if args.text:
        txt = Path(args.out_dump).with_suffix(".txt")
        with open(txt, "w") as fh:
            fh.write(f"# bands={feats.n_bands} frames={feats.n_frames} hop={feats.hop} "
                     f"adaptive={int(feats.split.adaptive)} "
                     f"splits={feats.split.split_bins}\n")
            for row in feats.values:
                fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")
        print(f"text export: {txt}")
    return EXIT_OK


def _cmd_train_codec(args) -> int:
    cfg = load_config(args.config)
    corpus = _load_corpus(args.corpus)
    steps = args.steps if args.steps is not None else cfg.train.steps
    rng = np.random.default_rng(args.seed)
    codec, records = train_codec(corpus, cfg.codec, steps=steps, rng=rng)
    codec.save(args.out)
    print(f"codec checkpoint: {args.out} (final loss {records[-1]['loss']:.4f})")
    if args.log_dir:
        log_dir = Path(args.log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        with open(log_dir / "codec_train.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        report.save_training_curve(records, log_dir / "codec_train.png", title="codec loss")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    codec = ResidualVQCodec.load(args.codec)
    if codec.config.n_codebooks != cfg.model.n_codebooks:
        raise ConfigError(
            f"codec checkpoint has n_codebooks={codec.config.n_codebooks} but config "
            f"model.n_codebooks={cfg.model.n_codebooks}"
        )
    if codec.config.n_tokens != cfg.model.n_tokens:
        raise ConfigError(
            f"codec checkpoint has n_tokens={codec.config.n_tokens} but config "
            f"model.n_tokens={cfg.model.n_tokens}"
        )
    corpus = _load_corpus(args.corpus)
    train_cfg = cfg.train
    if args.steps is not None:
        train_cfg.steps = args.steps
    train_cfg.seed = args.seed
    model = init_model(cfg.model, seed=args.seed)
    records = train_loop(corpus, model, codec, train_cfg)
    model.save(args.out)
    print(f"model checkpoint: {args.out} (final loss {records[-1].loss:.4f})")
    if args.log_dir:
        log_dir = Path(args.log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        with open(log_dir / "model_train.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_dict()) + "\n")
        report.save_training_curve(
            [r.to_dict() for r in records], log_dir / "model_train.png", title="model loss"
        )
    return EXIT_OK


def _parse_schedule(text, n_codebooks):
    try:
        counts = tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --schedule {text!r}: {exc}") from exc
    if len(counts) != n_codebooks:
        raise ConfigError(
            f"--schedule has {len(counts)} entries but the codec/model use "
            f"{n_codebooks} codebooks"
        )
    return counts


def _cmd_generate(args) -> int:
    cfg = load_config(args.config)
    from .model import MaskedDrumTransformer

    model = MaskedDrumTransformer.load(args.model)
    codec = ResidualVQCodec.load(args.codec)
    # preflight before any encoding or model forwards
    if model.config.n_codebooks != codec.config.n_codebooks:
        raise ConfigError(
            f"model checkpoint n_codebooks={model.config.n_codebooks} but codec "
            f"checkpoint n_codebooks={codec.config.n_codebooks}"
        )
    if model.config.n_tokens != codec.config.n_tokens:
        raise ConfigError(
            f"model checkpoint n_tokens={model.config.n_tokens} but codec "
            f"checkpoint n_tokens={codec.config.n_tokens}"
        )
    if model.config.n_bands != cfg.features.n_bands:
        raise ConfigError(
            f"model checkpoint n_bands={model.config.n_bands} but config "
            f"features.n_bands={cfg.features.n_bands}"
        )
    gen_cfg = GenerationConfig(
        iters_per_codebook=_parse_schedule(args.schedule, model.config.n_codebooks),
        cfg_weight=args.cfg_weight,
        temperature=args.temperature,
        causal_bias=args.causal_bias,
        seed=args.seed,
        include_prefix=args.include_prefix,
    )
    req = GenerationRequest(
        timbre_prompt=dsp.load_wav(args.timbre),
        rhythm_prompt=dsp.load_wav(args.rhythm),
        gen=gen_cfg,
        n_bands=model.config.n_bands,
        adaptive=cfg.features.adaptive,
    )
    audio, trace = generate(req, model, codec)
    dsp.save_wav(args.out, audio)
    trace_path = args.trace or str(args.out) + ".trace.json"
    trace.save(trace_path)
    print(f"generation: {args.out} ({audio.duration:.2f} s)")
    print(f"trace: {trace_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    run = metrics.evaluate_run(args.gen_dir, args.ref_dir, args.prompts, seed=args.seed)
    written = report.write_report(run, args.out)
    for metric, stats in run.summary.items():
        print(f"{metric}: mean={stats['mean']:.4f} "
              f"ci95=[{stats['ci_lo']:.4f}, {stats['ci_hi']:.4f}] n={stats['n']}")
    if run.kad_value is not None:
        print(f"kad: {run.kad_value:.4f}")
    if run.errors:
        print(f"skipped {len(run.errors)} generation(s) with missing/bad files", file=sys.stderr)
    print("report files: " + ", ".join(str(p) for p in written))
    return EXIT_OK


def _cmd_config(args) -> int:
    cfg = load_config(args.name)
    from .config import dumps_config

    sys.stdout.write(dumps_config(cfg))
    return EXIT_OK


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "features": _cmd_features,
    "train-codec": _cmd_train_codec,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "eval": _cmd_eval,
    "config": _cmd_config,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except TrainingDivergedError as exc:
        print(f"ERROR[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GestureDrumsError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"ERROR[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, ArithmeticError) as exc:
        print(f"ERROR[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
