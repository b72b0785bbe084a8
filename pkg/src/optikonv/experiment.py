"""Plain-text experiment configs and the three-step co-design pipeline.

Config files hold ``key = value`` lines; ``#`` starts a comment. Keys:

* model: ``arch``, ``variant``, ``width``, ``stages_removed`` (comma list),
  ``optical.channels``, ``optical.kernel``, ``optical.branch_sizes``,
  ``optical.use_bn_after_expand``, ``optical.crop_mode``,
  ``optical.silu_position``
* training: every :class:`~optikonv.train.TrainConfig` field, plus the
  aliases ``lr``, ``subset`` and ``batch``
* run: ``data`` (a CIFAR directory or ``synthetic``), ``out_dir``,
  ``steps``, ``psf_guard``, ``synthetic_train``, ``synthetic_test``

The pipeline trains (1) the electronic baseline, (2) the same network with
stage 1 replaced by the optical layer and (3) that network with the
configured stage-2 units removed, and reports accuracy and MACs for each.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .data import load_cifar10, make_synthetic_cifar
from .errors import ConfigError
from .macs import count_macs, reduction
from .models import ModelSpec, build_model, optical_layers
from .optical_layer import OpticalLayerSpec, compile_layer
from .dad import save_layout
from .pgm import save_psf_pgm
from .train import TrainConfig, evaluate, save_checkpoint, train

log = logging.getLogger(__name__)

STEPS = ("baseline", "replace", "remove")
ALIASES = {"lr": "lr0", "subset": "subset_size", "batch": "batch_size"}
DEFAULT_REMOVED = {"vgg13": ("stage2_conv2",), "resnet18": ("stage2_block2",)}


@dataclass
class ExperimentConfig:
    arch: str = "vgg13"
    variant: str = "codesign"
    width: float = 1.0
    stages_removed: Optional[tuple] = None  # None = reference choice per arch
    optical: OpticalLayerSpec = field(default_factory=OpticalLayerSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: Optional[str] = None
    out_dir: str = "runs/experiment"
    steps: tuple = STEPS
    psf_guard: int = 2
    synthetic_train: int = 5000
    synthetic_test: int = 1000

    @property
    def removed(self) -> tuple:
        if self.stages_removed is not None:
            return self.stages_removed
        if self.arch not in DEFAULT_REMOVED:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        return DEFAULT_REMOVED[self.arch]

    def model_spec(self, step: Optional[str] = None) -> ModelSpec:
        """Spec for a pipeline step, or for ``variant`` when ``step`` is None."""
        if step is None:
            removed = self.removed if self.variant == "codesign" else ()
            return ModelSpec(self.arch, self.variant, self.optical, removed, self.width)
        if step == "baseline":
            return ModelSpec(self.arch, "electronic", self.optical, (), self.width)
        if step == "replace":
            return ModelSpec(self.arch, "codesign", self.optical, (), self.width)
        if step == "remove":
            return ModelSpec(self.arch, "codesign", self.optical, self.removed, self.width)
        raise ConfigError(f"unknown step {step!r}; expected one of {STEPS}")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["stages_removed"] = list(self.removed)
        return d


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            v = raw.lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return v in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], (int, float)):
                kind = type(default[0])
                return tuple(kind(s) for s in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def _optional_int(raw: str, key: str):
    if raw.lower() in ("none", ""):
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer or 'none', got {raw!r}") from exc


def resolve_config(values: dict, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Apply ``key -> string`` values on top of ``base`` (later keys win)."""
    cfg = base or ExperimentConfig()
    top, opt, tr = {}, {}, {}
    train_fields = {f.name: f for f in fields(TrainConfig)}
    top_fields = {f.name for f in fields(ExperimentConfig)} - {"optical", "train"}
    for key, raw in values.items():
        key = key.replace("-", "_")
        key = ALIASES.get(key, key)
        if key.startswith("optical."):
            name = key.split(".", 1)[1]
            if name not in OpticalLayerSpec.__dataclass_fields__ or name == "expand_to":
                raise ConfigError(f"unknown config key {key!r}")
            opt[name] = _convert(raw, getattr(cfg.optical, name), key)
        elif key in train_fields:
            if key in ("subset_size", "test_subset"):
                tr[key] = _optional_int(raw, key)
            else:
                tr[key] = _convert(raw, getattr(cfg.train, key), key)
        elif key == "arch":
            top["arch"] = raw
        elif key == "stages_removed":
            top[key] = tuple(s.strip() for s in raw.split(",") if s.strip())
        elif key == "data":
            top[key] = None if raw.lower() == "none" else raw
        elif key in top_fields:
            top[key] = _convert(raw, getattr(cfg, key), key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = replace(cfg, optical=replace(cfg.optical, **opt), train=replace(cfg.train, **tr), **top)
    for s in cfg.steps:
        if s not in STEPS:
            raise ConfigError(f"unknown step {s!r}; expected one of {STEPS}")
    cfg.train.validate()
    cfg.model_spec().validate()
    return cfg


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    values = parse_config_text(path.read_text(), str(path))
    values.update(overrides or {})
    return resolve_config(values)


def resolve_data(cfg: ExperimentConfig):
    """``(train, test)`` from ``cfg.data``, ``$OPTIKONV_DATA`` or a synthetic set."""
    src = cfg.data or os.environ.get("OPTIKONV_DATA")
    if not src:
        raise ConfigError("no dataset: set OPTIKONV_DATA, pass --data DIR, or use --data synthetic")
    if src == "synthetic":
        root = Path(cfg.out_dir) / "synthetic-cifar"
        log.warning("using SYNTHETIC stand-in data (%d train / %d test), not CIFAR-10",
                    cfg.synthetic_train, cfg.synthetic_test)
        make_synthetic_cifar(root, cfg.synthetic_train, cfg.synthetic_test, seed=cfg.train.seed)
        src = root
    return load_cifar10(src)


def export_psfs(model, out_dir: Path, guard: int = 2):
    """Compile every optical layer of ``model``; returns the PGM paths."""
    paths = []
    for i, layer in enumerate(optical_layers(model)):
        psf, layout = compile_layer(layer, (32, 32), guard=guard)
        suffix = "" if i == 0 else f"_{i}"
        paths.append(save_psf_pgm(psf, out_dir / f"psf{suffix}.pgm"))
        save_layout(layout, out_dir / f"layout{suffix}.tnsr")
    return paths


def run_experiment(cfg: ExperimentConfig, data=None) -> list[dict]:
    """Run the configured pipeline steps; returns one summary dict per step.

    Writes ``report.jsonl`` (one line per epoch and a final line per step,
    keys ``step, epoch, loss, top1, macs, reduction``), checkpoints and, for
    co-designed steps, ``psf.pgm`` and ``layout.tnsr`` under ``out_dir/step``.
    With ``train.epochs == 0`` nothing is trained and only MACs are reported.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.as_dict(), indent=2, sort_keys=True))
    training = cfg.train.epochs > 0
    if training and data is None:
        data = resolve_data(cfg)
    train_set, test_set = data if training else (None, None)
    base_macs = count_macs(build_model(cfg.model_spec("baseline")))
    summaries = []
    with open(out / "report.jsonl", "w") as report:
        def emit(rec):
            report.write(json.dumps(rec) + "\n")
            report.flush()

        for step in cfg.steps:
            spec = cfg.model_spec(step)
            model = build_model(spec, seed=cfg.train.seed)
            macs = count_macs(model)
            red = reduction(macs, base_macs)
            step_dir = out / step
            step_dir.mkdir(exist_ok=True)
            history = []
            if training:
                history = train(model, train_set, test_set, cfg.train, out_dir=step_dir,
                                on_epoch=lambda r, s=step: emit({"step": s, **r, "macs": macs,
                                                                  "reduction": red}))
            else:
                save_checkpoint(step_dir / "last.tnsr", model)
            psfs = [str(p) for p in export_psfs(model, step_dir, cfg.psf_guard)] \
                if spec.variant == "codesign" else []
            last = history[-1] if history else {"epoch": 0, "loss": None, "top1": None}
            summary = {"step": step, "epoch": last["epoch"], "loss": last["loss"], "top1": last["top1"],
                       "macs": macs, "reduction": red, "final": True, "psf": psfs}
            emit(summary)
            summaries.append(summary)
            log.info("%s: %.2f MMACs (%.1f%% reduction) top1 %s", step, macs / 1e6, 100 * red,
                     last["top1"])
    return summaries


def read_report(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
