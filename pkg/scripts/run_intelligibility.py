"""Train the aligned and packed-lyrics models (if not cached) and compare held-out PER.

    python scripts/run_intelligibility.py --workdir runs/acceptance
"""
import argparse
import json
import logging

from rhythmlab.config import ExperimentConfig
from rhythmlab.experiment import run_intelligibility


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default="runs/acceptance")
    parser.add_argument("--config", help="experiment config JSON (defaults to the built-in config)")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    report = run_intelligibility(args.workdir, config)
    summary = {
        "aligned_mean_per": report["aligned"]["mean_per"],
        "ablated_mean_per": report["ablated"]["mean_per"],
        "aligned_frame_accuracy": report["aligned"]["mean_frame_accuracy"],
        "rtf": report["aligned"]["rtf"],
        "gap": report["gap"],
    }
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
