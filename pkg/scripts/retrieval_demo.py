"""Gerchberg-Saxton vs gradient retrieval on a sparse spot target.

Writes the target, both simulated PSFs, the quantized mask's dose map and
the loss curves to ``--out-dir``.
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from optikonv.optics import OpticsConfig, psf_from_phase
from optikonv.pgm import export_dose_map, save_psf_pgm
from optikonv.retrieval import FabModel, gerchberg_saxton, retrieve_phase_sgd, simulated_loss, spot_target


def ncc(a, b):
    a, b = a.ravel() - a.mean(), b.ravel() - b.mean()
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--gs-iters", type=int, default=200)
    ap.add_argument("--levels", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="runs/retrieval")
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = OpticsConfig(mask_pixels=64, distance=0.5e-3, aperture=None)
    target = spot_target(64)
    gs_mask, gs_hist = gerchberg_saxton(target, config, iters=args.gs_iters, seed=args.seed, return_history=True)
    sgd_mask, sgd_hist = retrieve_phase_sgd(target, config, iters=args.iters, seed=args.seed)
    q_mask, _ = retrieve_phase_sgd(target, config, iters=args.iters, seed=args.seed,
                                   fab=FabModel(levels=args.levels))
    save_psf_pgm(target, out / "target.pgm")
    for name, mask in (("gs", gs_mask), ("sgd", sgd_mask), (f"sgd_{args.levels}lv", q_mask)):
        psf = psf_from_phase(mask)
        save_psf_pgm(psf, out / f"psf_{name}.pgm")
        loss = simulated_loss(mask.phase, target, config)
        print(f"{name:<10} loss {loss:.4f}  NCC {ncc(psf.intensity, target.intensity):.4f}")
    export_dose_map(q_mask, out / "dose.pgm")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "gs", "sgd"])
        for i in range(max(len(gs_hist), len(sgd_hist))):
            w.writerow([i + 1, gs_hist[i] if i < len(gs_hist) else "", sgd_hist[i] if i < len(sgd_hist) else ""])


if __name__ == "__main__":
    main()
