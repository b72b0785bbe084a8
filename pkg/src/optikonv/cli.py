"""Command-line entry point: ``optikonv <subcommand> [flags]``.

Exit status is 0 on success, 1 for user errors (bad flags, configs or input
files) and 2 for internal errors. Settings come from ``--config`` first and
flags override them. ``OPTIKONV_DATA`` names the CIFAR-10 directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import OptikonvError

log = logging.getLogger("optikonv")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(f"{self.prog}: {message}")


def _common(p, *, train_flags=True):
    p.add_argument("--config", help="key=value experiment file; flags override its entries")
    p.add_argument("--seed", type=int, help="RNG seed for init, shuffling and retrieval")
    p.add_argument("--out-dir", help="directory for outputs (default: runs/<subcommand>)")
    p.add_argument("--threads", type=int, help="BLAS/FFT threads (1 gives bit-reproducible runs)")
    if train_flags:
        p.add_argument("--arch", choices=["vgg13", "resnet18"], help="network architecture")
        p.add_argument("--variant", choices=["electronic", "codesign"], help="electronic or optical stage 1")
        p.add_argument("--width", type=float, help="channel width multiplier")
        p.add_argument("--subset", type=int, help="use only the first N training images")
        p.add_argument("--epochs", type=int, help="training epochs")
        p.add_argument("--data", help="CIFAR-10 binary directory, or 'synthetic' (default: $OPTIKONV_DATA)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="any other config entry, repeatable")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="optikonv", description="Hybrid optical/electronic CNN toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model, checkpointing every epoch")
    _common(p)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on the test set")
    _common(p)
    p.add_argument("--ckpt", required=True, help="TNSR1 checkpoint written by train")

    p = sub.add_parser("macs", help="MAC count and per-layer table")
    _common(p)
    p.add_argument("--no-table", action="store_true", help="print totals only")

    p = sub.add_parser("compile-psf", help="merge branches and encode the optical layer as a PSF")
    _common(p, train_flags=False)
    p.add_argument("--ckpt", required=True, help="co-design model checkpoint")
    p.add_argument("--guard", type=int, default=2, help="empty pixels between PSF tiles")

    p = sub.add_parser("retrieve-phase", help="find a mask phase whose PSF matches a target")
    _common(p, train_flags=False)
    p.add_argument("--target", required=True, help="target PSF (16-bit PGM)")
    p.add_argument("--iters", type=int, default=500, help="iterations")
    p.add_argument("--method", choices=["sgd", "gs"], default="sgd", help="gradient descent or Gerchberg-Saxton")
    p.add_argument("--levels", type=int, default=16, help="phase levels (0 = continuous)")
    p.add_argument("--dose-blur", type=float, default=0.0, help="lithography blur sigma in pixels")
    _optics_flags(p)

    p = sub.add_parser("simulate", help="propagate a phase mask and write its PSF")
    _common(p, train_flags=False)
    p.add_argument("--mask", required=True, help="mask file written by retrieve-phase")
    p.add_argument("--target", help="optional target PGM to compare against")

    p = sub.add_parser("export-dose", help="write a lithography dose map for a quantized mask")
    _common(p, train_flags=False)
    p.add_argument("--mask", required=True, help="mask file written by retrieve-phase")

    p = sub.add_parser("report", help="run the baseline/replace/remove pipeline and summarize it")
    _common(p)
    p.add_argument("--from-report", help="only summarize an existing report.jsonl")
    return ap


def _optics_flags(p):
    p.add_argument("--mask-pixels", type=int,
                   help="mask side in pixels (default: 512, or the target size rounded up to a power of two)")
    p.add_argument("--pitch", type=float, default=2e-6, help="mask pixel pitch in metres")
    p.add_argument("--distance", type=float, default=5e-3, help="mask to sensor distance in metres")
    p.add_argument("--wavelength", type=float, default=532e-9, help="wavelength in metres")
    p.add_argument("--aperture", type=float, help="aperture radius in pixels (default: full square)")


# ----------------------------------------------------------------------------
# config resolution

def _overrides(args) -> dict:
    out = {}
    for flag, key in (("seed", "seed"), ("threads", "threads"), ("arch", "arch"), ("variant", "variant"),
                      ("width", "width"), ("subset", "subset_size"), ("epochs", "epochs"), ("data", "data"),
                      ("out_dir", "out_dir")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = str(v)
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UserError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(args):
    from .experiment import ExperimentConfig, load_config, resolve_config

    over = _overrides(args)
    over.setdefault("out_dir", f"runs/{args.command}")
    if args.config:
        cfg = load_config(args.config, over)
    else:
        cfg = resolve_config(over, ExperimentConfig(variant="electronic"))
    log.info("resolved config: %s", json.dumps(cfg.as_dict(), sort_keys=True))
    return cfg


def _out_dir(args) -> Path:
    d = Path(args.out_dir or f"runs/{args.command}")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _limits(args):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=args.threads or 1)


# ----------------------------------------------------------------------------
# subcommands

def cmd_train(args):
    from .experiment import resolve_data
    from .macs import count_macs
    from .models import build_model
    from .train import train

    cfg = _resolve(args)
    train_set, test_set = resolve_data(cfg)
    spec = cfg.model_spec()
    model = build_model(spec, seed=cfg.train.seed)
    macs = count_macs(model)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.jsonl", "w") as fh:
        def emit(rec):
            fh.write(json.dumps({**rec, "macs": macs, "reduction": None}) + "\n")
            fh.flush()
        train(model, train_set, test_set, cfg.train, out_dir=out, on_epoch=emit)
    print(f"checkpoints and report.jsonl in {out}")


def cmd_eval(args):
    from .experiment import resolve_data
    from .train import evaluate, load_model

    cfg = _resolve(args)
    model = load_model(args.ckpt)
    _, test_set = resolve_data(cfg)
    with _limits(args):
        top1 = evaluate(model, test_set.subset(cfg.train.test_subset), cfg.train)
    print(f"top1 {top1:.2f}%")


def cmd_macs(args):
    from .macs import format_table, mac_table, reduction
    from .models import build_model

    cfg = _resolve(args)
    rows = mac_table(build_model(cfg.model_spec()))
    total = sum(r.macs for r in rows)
    if not args.no_table:
        print(format_table(rows))
    print(f"{cfg.arch} {cfg.variant}: {total / 1e6:.1f} MMACs")
    if cfg.variant == "codesign":
        base = sum(r.macs for r in mac_table(build_model(cfg.model_spec("baseline"))))
        print(f"reduction vs electronic {cfg.arch}: {100 * reduction(total, base):.1f}%")


def cmd_compile_psf(args):
    from .dad import save_layout
    from .models import optical_layers
    from .optical_layer import compile_layer
    from .pgm import save_psf_pgm
    from .train import load_model

    model = load_model(args.ckpt)
    layers = optical_layers(model)
    if not layers:
        raise UserError(f"{args.ckpt} holds an electronic model; nothing to compile")
    psf, layout = compile_layer(layers[0], (32, 32), guard=args.guard)
    out = _out_dir(args)
    save_psf_pgm(psf, out / "psf.pgm")
    save_layout(layout, out / "layout.tnsr")
    print(f"psf {psf.intensity.shape} sum {psf.total():.6f} scale {layout.scale:.6g} -> {out / 'psf.pgm'}")


def _embed(psf, n):
    from .optics import Psf
    h, w = psf.intensity.shape
    if h > n or w > n:
        raise UserError(f"target {h}x{w} does not fit a {n}x{n} mask; raise --mask-pixels")
    plane = np.zeros((n, n))
    top, left = (n - h) // 2, (n - w) // 2
    plane[top:top + h, left:left + w] = psf.intensity
    return Psf.from_intensity(plane)


def cmd_retrieve_phase(args):
    from .optics import OpticsConfig
    from .pgm import load_psf_pgm, save_mask
    from .retrieval import FabModel, gerchberg_saxton, retrieve_phase_sgd

    target = load_psf_pgm(args.target)
    n = args.mask_pixels or max(512, int(2 ** np.ceil(np.log2(max(target.intensity.shape)))))
    config = OpticsConfig(wavelength=args.wavelength, distance=args.distance, mask_pixels=n,
                          pitch=args.pitch, aperture=args.aperture)
    target = _embed(target, n)
    fab = FabModel(levels=args.levels, dose_blur_sigma=args.dose_blur) if args.levels or args.dose_blur else None
    seed = args.seed or 0
    with _limits(args):
        if args.method == "gs":
            mask, history = gerchberg_saxton(target, config, iters=args.iters, seed=seed, fab=fab,
                                             return_history=True)
        else:
            mask, history = retrieve_phase_sgd(target, config, iters=args.iters, fab=fab, seed=seed)
    out = _out_dir(args)
    save_mask(mask, out / "mask.tnsr")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss"])
        w.writerows((i + 1, f"{v:.9g}") for i, v in enumerate(history))
    final = history[-1] if history else float("nan")
    print(f"{args.method}: {len(history)} iterations, final loss {final:.6g} -> {out / 'mask.tnsr'}")


def cmd_simulate(args):
    from .optics import psf_from_phase
    from .pgm import load_mask, load_psf_pgm, save_psf_pgm

    mask = load_mask(args.mask)
    with _limits(args):
        psf = psf_from_phase(mask)
    out = _out_dir(args)
    save_psf_pgm(psf, out / "psf_sim.pgm")
    msg = f"simulated PSF {psf.intensity.shape} -> {out / 'psf_sim.pgm'}"
    if args.target:
        t = _embed(load_psf_pgm(args.target), mask.config.mask_pixels).intensity.ravel()
        p = psf.intensity.astype(np.float64).ravel()
        ncc = float(np.dot(p - p.mean(), t - t.mean()) / (np.std(p) * np.std(t) * p.size))
        msg += f"; NCC vs target {ncc:.4f}"
    print(msg)


def cmd_export_dose(args):
    from .pgm import export_dose_map, load_mask

    mask = load_mask(args.mask)
    path = export_dose_map(mask, _out_dir(args) / "dose.pgm")
    print(f"dose map ({mask.levels} levels) -> {path}")


def cmd_report(args):
    from .experiment import read_report, run_experiment

    if args.from_report:
        rows = [r for r in read_report(args.from_report) if r.get("final")]
    else:
        cfg = _resolve(args)
        with _limits(args):
            rows = run_experiment(cfg)
    print(f"{'step':<10} {'epoch':>5} {'loss':>8} {'top1':>7} {'MMACs':>9} {'reduction':>10}")
    for r in rows:
        loss = "-" if r["loss"] is None else f"{r['loss']:.4f}"
        top1 = "-" if r["top1"] is None else f"{r['top1']:.2f}"
        print(f"{r['step']:<10} {r['epoch']:>5} {loss:>8} {top1:>7} {r['macs'] / 1e6:>9.1f} "
              f"{100 * r['reduction']:>9.1f}%")


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "macs": cmd_macs, "compile-psf": cmd_compile_psf,
    "retrieve-phase": cmd_retrieve_phase, "simulate": cmd_simulate, "export-dose": cmd_export_dose,
    "report": cmd_report,
}


def _setup_logging(verbose: bool):
    # one handler on the package logger, bound to the stderr of this call
    for h in [h for h in log.handlers if getattr(h, "_optikonv_cli", False)]:
        log.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    h._optikonv_cli = True
    log.addHandler(h)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        COMMANDS[args.command](args)
    except (UserError, OptikonvError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        log.exception("internal error")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
