"""The intelligibility experiment: aligned vs. packed-lyrics training, scored by held-out PER.

Each variant trains in its own directory and is resumable: a partial run
leaves ``latest.ckpt`` behind, a finished one ``final.ckpt``.  Re-running
skips straight to evaluation when the final checkpoints exist.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from .cli import per_gap
from .config import ExperimentConfig
from .evaluate import evaluate
from .lyrics import default_vocab
from .synth import generate_corpus, make_codebooks
from .train import Trainer, load_checkpoint

log = logging.getLogger(__name__)


def train_variant(config: ExperimentConfig, songs, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    final, latest = out_dir / "final.ckpt", out_dir / "latest.ckpt"
    if final.exists():
        return final
    if latest.exists():
        trainer = Trainer.resume(latest, songs)
        log.info("%s: resuming at step %d", out_dir.name, trainer.step)
    else:
        trainer = Trainer(config, songs)
    start = time.perf_counter()
    every = config.train.checkpoint_every

    with (out_dir / "metrics.jsonl").open("a") as mf:
        def on_step(m):
            mf.write(json.dumps({k: m[k] for k in ("step", "loss", "lr", "t_mean", "wall_ms")}) + "\n")
            if m["step"] % config.train.log_every == 0:
                log.info("%s step %d loss %.4f", out_dir.name, m["step"], m["loss"])
            if every and m["step"] % every == 0:
                mf.flush()
                trainer.save(latest)

        trainer.run(config.train.n_steps, on_step)
    trainer.save(final)
    (out_dir / "train_seconds.txt").write_text(f"{time.perf_counter() - start:.1f}\n")
    return final


def run_intelligibility(workdir: str | Path, config: ExperimentConfig | None = None) -> dict:
    """Train (if needed) and evaluate both variants; returns and writes ``report.json``."""
    workdir = Path(workdir)
    config = config or ExperimentConfig()
    vocab = default_vocab()
    config = replace(config, net=replace(config.net, vocab_size=len(vocab)))
    songs = generate_corpus(config.synth, vocab)
    books = make_codebooks(config.synth, len(vocab))
    report: dict = {"config": config.to_dict()}
    for name, ablate in (("aligned", False), ("ablated", True)):
        variant = replace(config, train=replace(config.train, ablate_align=ablate))
        ckpt = load_checkpoint(train_variant(variant, songs, workdir / name))
        net = ckpt.ema_net() if config.sample.use_ema else ckpt.net
        start = time.perf_counter()
        result = evaluate(net, songs, config.synth, books, config.sample, config.train.L_max,
                          config.train.prompt_len, ablate_align=ablate)
        result["eval_seconds"] = time.perf_counter() - start
        report[name] = result
        log.info("%s: mean PER %.3f", name, result["mean_per"])
    report["gap"] = per_gap(report["aligned"]["mean_per"], report["ablated"]["mean_per"])
    (workdir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
