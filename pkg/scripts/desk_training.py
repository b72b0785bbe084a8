"""Desk-scale comparison: electronic vs co-designed quarter-width VGG13.

Uses $OPTIKONV_DATA when set, otherwise a synthetic stand-in written to
``--out-dir``. About 25 minutes on one CPU core with the defaults.
"""

import argparse
import json
import logging
import os

from optikonv.experiment import ExperimentConfig, resolve_data, run_experiment
from optikonv.train import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--subset", type=int, default=5000)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--width", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = ExperimentConfig(
        arch="vgg13", width=args.width, out_dir=args.out_dir, steps=("baseline", "remove"),
        data=os.environ.get("OPTIKONV_DATA") or "synthetic", synthetic_train=args.subset,
        train=TrainConfig(epochs=args.epochs, batch_size=128, lr0=0.05, subset_size=args.subset,
                          test_subset=1000, seed=args.seed))
    rows = run_experiment(cfg, resolve_data(cfg))
    for r in rows:
        print(json.dumps({k: r[k] for k in ("step", "top1", "macs", "reduction")}))
    print(f"top-1 gap (baseline - codesign): {rows[0]['top1'] - rows[1]['top1']:.2f} points")


if __name__ == "__main__":
    main()
