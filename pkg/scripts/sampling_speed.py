"""Wall-clock of sampling against Euler steps and lyric density at a fixed length."""
import argparse
import json
import statistics
import time

import numpy as np

from rhythmlab.config import NetConfig, SampleConfig
from rhythmlab.lyrics import LyricSheet, build_phoneme_grid, default_vocab
from rhythmlab.model import ConditionBundle, VelocityNet
from rhythmlab.sampler import euler_sample


def median_seconds(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--frames", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    cfg = NetConfig(max_frames=max(args.frames, 256))
    net = VelocityNet(cfg, seed=0, dtype=np.float32)
    vocab = default_vocab()
    style = np.random.default_rng(0).standard_normal((22, cfg.latent_channels))
    seconds = args.frames / 21.5
    rows = []
    for n_sentences in (1, 10, 50):
        gap = max(seconds - 1.0, 0.1) / n_sentences
        sheet = LyricSheet(tuple((round(k * gap, 2), "la") for k in range(n_sentences)))
        grid = build_phoneme_grid(sheet, vocab, args.frames, 21.5, strict=False)
        for n_steps in (8, 16, 32):
            bundle = ConditionBundle(grid, style, 0.0)
            secs = median_seconds(lambda: euler_sample(net, bundle, SampleConfig(n_steps=n_steps)), args.repeats)
            rows.append({"sentences": n_sentences, "n_steps": n_steps, "seconds": round(secs, 4),
                         "rtf": round(secs / seconds, 4)})
    print(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
