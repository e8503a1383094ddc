"""``rhythmlab`` command line: dataset, train, sample, eval.

stdout carries exactly one JSON document per command; logs go to stderr.
Exit codes: 0 ok, 2 config, 3 I/O, 4 numeric.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, SampleConfig
from .latent import LatentSequence
from .lyrics import EmptyPhonemeError, LrcParseError, PlacementError, default_vocab
from .tensor import NumericError

log = logging.getLogger("rhythmlab")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    if not Path(path).exists():
        raise CliError(f"config file not found: {path}", EXIT_CONFIG)
    return ExperimentConfig.load(path)


def _thread_limit():
    n = os.environ.get("RHYTHMLAB_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


# ---------------------------------------------------------------- commands


def cmd_dataset(args) -> dict:
    from .synth import generate_corpus, save_corpus

    config = _load_config(args.config)
    if args.seed is not None:
        config = replace(config, synth=replace(config.synth, seed=args.seed))
    if args.n_songs is not None:
        config = replace(config, synth=replace(config.synth, n_songs=args.n_songs))
    vocab = default_vocab()
    songs = generate_corpus(config.synth, vocab)
    try:
        save_corpus(songs, config.synth, vocab, args.out)
    except OSError as exc:
        raise CliError(f"cannot write corpus to {args.out}: {exc}", EXIT_IO) from exc
    return {
        "command": "dataset",
        "out": str(args.out),
        "count": len(songs),
        "total_frames": int(sum(len(s.latent) for s in songs)),
        "vocab_size": len(vocab),
        "config": config.to_dict(),
    }


def _open_corpus(path):
    from .synth import load_corpus

    try:
        return load_corpus(path)
    except FileNotFoundError as exc:
        raise CliError(f"corpus not found: {path} ({exc})", EXIT_IO) from exc


def cmd_train(args) -> dict:
    from .train import Trainer

    corpus = _open_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = _resume(args.resume, corpus.songs)
        config = trainer.config
    else:
        config = _load_config(args.config)
        config = replace(config, synth=corpus.spec)
        train = config.train
        if args.seed is not None:
            train = replace(train, seed=args.seed)
        if args.ablate_align:
            train = replace(train, ablate_align=True)
        config = ExperimentConfig(config.synth, replace(config.net, vocab_size=len(corpus.vocab)), train, config.sample, config.paths)
        trainer = Trainer(config, corpus.songs)
    until = args.steps if args.steps is not None else config.train.n_steps

    metrics_path = out / "metrics.jsonl"
    last_good = None
    first_loss = None
    every = config.train.checkpoint_every

    with metrics_path.open("a") as mf:
        def on_step(m):
            nonlocal last_good, first_loss
            if first_loss is None:
                first_loss = m["loss"]
            mf.write(json.dumps({k: m[k] for k in ("step", "loss", "lr", "t_mean", "wall_ms")}) + "\n")
            if m["step"] % config.train.log_every == 0:
                log.info("step %d loss %.4f lr %.2e", m["step"], m["loss"], m["lr"])
            if every and m["step"] % every == 0:
                path = out / f"ckpt_{m['step']:06d}.ckpt"
                trainer.save(path)
                last_good = path

        try:
            trainer.run(until, on_step)
        except NumericError as exc:
            print(f"numeric failure: {exc}; last good checkpoint: {last_good}", file=sys.stderr)
            raise CliError(str(exc), EXIT_NUMERIC) from exc

    final = out / "final.ckpt"
    trainer.save(final)
    _write_loss_csv(metrics_path, out / "loss.csv")
    losses = [h["loss"] for h in trainer.history]
    return {
        "command": "train",
        "steps": trainer.step,
        "initial_loss": first_loss,
        "final_loss": losses[-1] if losses else None,
        "checkpoint": str(final),
        "metrics": str(metrics_path),
        "config": config.to_dict(),
    }


def _resume(path, songs):
    from .train import CheckpointError, Trainer

    try:
        return Trainer.resume(path, songs)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {path}", EXIT_IO) from exc
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_IO) from exc


def _write_loss_csv(metrics_path: Path, csv_path: Path) -> None:
    with metrics_path.open() as src, csv_path.open("w", newline="") as dst:
        writer = csv.writer(dst)
        writer.writerow(["step", "loss", "lr"])
        for line in src:
            rec = json.loads(line)
            writer.writerow([rec["step"], rec["loss"], rec["lr"]])


def _open_checkpoint(path):
    from .train import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {path}", EXIT_IO) from exc
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_IO) from exc


def _sample_config(base: SampleConfig, args) -> SampleConfig:
    cfg = base
    if args.steps is not None:
        cfg = replace(cfg, n_steps=args.steps)
    if args.cfg_scale is not None:
        cfg = replace(cfg, cfg_scale=args.cfg_scale)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.raw:
        cfg = replace(cfg, use_ema=False)
    return cfg


def cmd_sample(args) -> dict:
    from .lyrics import PhonemeVocab, save_grid
    from .sampler import generate_song
    from .synth import extract_style_prompt

    ckpt = _open_checkpoint(args.checkpoint)
    config = ckpt.config
    sample = _sample_config(config.sample, args)
    net = ckpt.ema_net() if sample.use_ema else ckpt.net
    try:
        lrc_text = Path(args.lrc).read_text(encoding="utf-8")
        style_latent = LatentSequence.load(args.style)
    except OSError as exc:
        raise CliError(f"cannot read input: {exc}", EXIT_IO) from exc
    frame_rate = config.synth.frame_rate
    if args.length_seconds is not None:
        n_frames = int(np.floor(args.length_seconds * frame_rate))
    else:
        n_frames = config.net.max_frames
    prompt_len = min(config.train.prompt_len, len(style_latent))
    prompt = extract_style_prompt(style_latent.frames, prompt_len, np.random.default_rng(sample.seed))
    vocab = default_vocab() if args.rules is None else PhonemeVocab.load(args.rules)
    latent, grid, stats = generate_song(
        net, lrc_text, prompt, n_frames, sample, vocab, frame_rate,
        strict=not args.lenient, ablate_align=config.train.ablate_align,
    )
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        latent.save(out)
        save_grid(grid, out.with_name(out.name + ".grid.json"))
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", EXIT_IO) from exc
    return {
        "command": "sample",
        "out": str(out),
        "frames": n_frames,
        "song_seconds": n_frames / frame_rate,
        **stats,
        "sample": sample.__dict__,
        "config": config.to_dict(),
    }


def cmd_eval(args) -> dict:
    from .evaluate import evaluate

    corpus = _open_corpus(args.corpus)
    books = corpus.codebooks
    if args.ground_truth:
        config = _load_config(args.config) if args.config else ExperimentConfig()
        sample = _sample_config(config.sample, args)
        net = None
        frames = config.train.L_max
        prompt_len = config.train.prompt_len
    else:
        if args.checkpoint is None:
            raise CliError("eval needs --checkpoint unless --ground-truth is given", EXIT_CONFIG)
        ckpt = _open_checkpoint(args.checkpoint)
        config = ckpt.config
        sample = _sample_config(config.sample, args)
        net = ckpt.ema_net() if sample.use_ema else ckpt.net
        frames = config.train.L_max
        prompt_len = config.train.prompt_len
        if args.ablate_align and not config.train.ablate_align:
            log.warning("checkpoint was trained with alignment; evaluating it with packed lyrics")
    report = evaluate(
        net, corpus.songs, corpus.spec, books, sample, frames, prompt_len,
        ablate_align=args.ablate_align, ground_truth=args.ground_truth,
    )
    report["command"] = "eval"
    report["sample"] = sample.__dict__
    report["config"] = config.to_dict()
    if args.baseline_report:
        base = json.loads(Path(args.baseline_report).read_text())
        report["gap"] = per_gap(base["mean_per"], report["mean_per"])
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
        with Path(args.out).with_suffix(".csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["song", "style_id", "per", "frame_accuracy"])
            for row in report["songs"]:
                writer.writerow([row["song"], row["style_id"], row["per"], row["frame_accuracy"]])
    return report


def per_gap(aligned: float, ablated: float) -> dict:
    ratio = ablated / aligned if aligned > 0 else float("inf")
    return {
        "aligned_mean_per": aligned,
        "ablated_mean_per": ablated,
        "ratio": ratio,
        "flagged": ratio > 3,
    }


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rhythmlab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override the command's seed")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n-songs", type=int, dest="n_songs")
    p.set_defaults(func=cmd_dataset, out_required=True)

    p = sub.add_parser("train", parents=[common], help="train a velocity network")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, help="stop at this step (defaults to train.n_steps)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--ablate-align", action="store_true", help="pack lyrics at frame 0 instead of timestamps")
    p.set_defaults(func=cmd_train, out_required=True)

    def sampling_flags(p):
        p.add_argument("--steps", type=int, help="Euler steps (default 32)")
        p.add_argument("--cfg-scale", type=float, dest="cfg_scale", help="guidance scale (default 4.0)")
        p.add_argument("--raw", action="store_true", help="use raw instead of EMA weights")

    p = sub.add_parser("sample", parents=[common], help="generate a latent from lyrics and a style prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lrc", required=True)
    p.add_argument("--style", required=True, help="latent file (.f32 with .json sidecar) to draw the prompt from")
    p.add_argument("--length-seconds", type=float, dest="length_seconds")
    p.add_argument("--rules", help="grapheme<TAB>PHONEME rule table")
    p.add_argument("--lenient", action="store_true")
    sampling_flags(p)
    p.set_defaults(func=cmd_sample, out_required=True)

    p = sub.add_parser("eval", parents=[common], help="held-out PER of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ablate-align", action="store_true")
    p.add_argument("--ground-truth", action="store_true", help="score stored latents (decoder sanity check)")
    p.add_argument("--baseline-report", help="aligned-model report to compare against")
    sampling_flags(p)
    p.set_defaults(func=cmd_eval, out_required=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.out_required and not args.out:
        print(f"rhythmlab {args.command}: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with _thread_limit():
            result = args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, LrcParseError, PlacementError, EmptyPhonemeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    _emit(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
