"""Euler step-count and guidance-scale sweeps.

Without a checkpoint: error of Euler on dz/dt = -z against exp(-1).
With ``--checkpoint`` and ``--corpus`` (a directory from ``rhythmlab dataset``):
held-out PER for each (steps, cfg_scale) pair, written as CSV to stdout.
"""
import argparse
import csv
import math
import sys
from dataclasses import replace

import numpy as np

from rhythmlab.evaluate import evaluate
from rhythmlab.sampler import euler_integrate
from rhythmlab.synth import load_corpus
from rhythmlab.train import load_checkpoint


def analytic_table(writer):
    writer.writerow(["n_steps", "z_euler", "abs_error", "ratio_to_previous"])
    prev = None
    for n in (4, 8, 16, 32, 64, 128, 256):
        z = euler_integrate(lambda z, t: -z, np.array([1.0]), n)[0]
        err = abs(z - math.exp(-1))
        writer.writerow([n, f"{z:.10f}", f"{err:.3e}", f"{prev / err:.3f}" if prev else ""])
        prev = err


def model_table(writer, ckpt_path, corpus_path, steps, scales):
    ckpt = load_checkpoint(ckpt_path)
    corpus = load_corpus(corpus_path)
    net = ckpt.ema_net() if ckpt.config.sample.use_ema else ckpt.net
    writer.writerow(["n_steps", "cfg_scale", "mean_per", "mean_frame_accuracy", "rtf"])
    for n in steps:
        for s in scales:
            sample = replace(ckpt.config.sample, n_steps=n, cfg_scale=s)
            r = evaluate(net, corpus.songs, corpus.spec, corpus.codebooks, sample, ckpt.config.train.L_max,
                         ckpt.config.train.prompt_len, ablate_align=ckpt.config.train.ablate_align)
            writer.writerow([n, s, f"{r['mean_per']:.4f}", f"{r['mean_frame_accuracy']:.4f}", f"{r['rtf']:.4f}"])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint")
    parser.add_argument("--corpus")
    parser.add_argument("--steps", type=int, nargs="+", default=[4, 8, 16, 32, 64])
    parser.add_argument("--scales", type=float, nargs="+", default=[1.0, 2.0, 4.0, 6.0])
    args = parser.parse_args()
    writer = csv.writer(sys.stdout)
    if args.checkpoint:
        if not args.corpus:
            parser.error("--checkpoint needs --corpus")
        model_table(writer, args.checkpoint, args.corpus, args.steps, args.scales)
    else:
        analytic_table(writer)


if __name__ == "__main__":
    main()
