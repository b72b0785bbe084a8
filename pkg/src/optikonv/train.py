"""Training and evaluation loops with per-epoch TNSR1 checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from . import tensor as T
from .data import CIFAR_MEAN, CIFAR_STD, Cifar10Set, augment_normalize
from .errors import ConfigError, DivergenceError, FormatError, NonFiniteError
from .models import ModelSpec, build_model
from .nn import Module
from .optical_layer import OpticalConv, OpticalLayerSpec
from .optim import SGD, cosine_lr
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyperparameters; the defaults are the full-scale CIFAR recipe."""

    batch_size: int = 256
    epochs: int = 100
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    augment: bool = True
    flip_p: float = 0.5
    mean: tuple = CIFAR_MEAN
    std: tuple = CIFAR_STD
    seed: int = 0
    subset_size: Optional[int] = None
    test_subset: Optional[int] = None
    threads: int = 1
    eval_batch_size: int = 500

    def validate(self):
        for name in ("batch_size", "threads", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if not 0 <= self.flip_p <= 1:
            raise ConfigError("flip_p must lie in [0, 1]")
        if self.subset_size is not None and self.subset_size < 1:
            raise ConfigError("subset_size must be >= 1")
        return self

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr0
        return cosine_lr(epoch, self.epochs, self.lr0)


class TrainingAborted(DivergenceError):
    """Loss went non-finite; the model holds the last good checkpoint."""

    def __init__(self, message, history=None, checkpoint=None):
        super().__init__(message, history)
        self.checkpoint = checkpoint


# ----------------------------------------------------------------------------
# checkpoints

def _encode_text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _decode_text(a: np.ndarray) -> str:
    return bytes(a.astype(np.uint8)).decode("utf-8")


def spec_to_json(spec: ModelSpec) -> str:
    d = asdict(spec)
    d["stages_removed"] = list(spec.stages_removed)
    return json.dumps(d, sort_keys=True)


def spec_from_json(s: str) -> ModelSpec:
    d = json.loads(s)
    opt = d.pop("optical")
    opt["branch_sizes"] = tuple(opt["branch_sizes"])
    d["stages_removed"] = tuple(d["stages_removed"])
    return ModelSpec(optical=OpticalLayerSpec(**opt), **d)


def save_checkpoint(path, model: Module, optimizer: Optional[SGD] = None, epoch: int = -1) -> Path:
    records = dict(model.state_dict())
    if optimizer is not None:
        records.update(optimizer.state_arrays())
    records["meta.epoch"] = np.array([epoch], dtype=np.float32)
    spec = getattr(model, "spec", None)
    if spec is not None:
        records["meta.spec"] = _encode_text(spec_to_json(spec))
    return checkpoint.save(path, records)


def load_model(path) -> Module:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`."""
    rec = checkpoint.load(path)
    if "meta.spec" not in rec:
        raise FormatError(f"{path}: checkpoint has no model spec record")
    model = build_model(spec_from_json(_decode_text(rec["meta.spec"])))
    model.load_state_dict({k: v for k, v in rec.items() if not k.startswith("meta.")})
    return model


# ----------------------------------------------------------------------------
# loops

def optical_grad_norm(model: Module) -> float:
    total = 0.0
    for _, m in model.named_modules():
        if isinstance(m, OpticalConv):
            for p in m.branches.values():
                if p.grad is not None:
                    total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def has_optics(model: Module) -> bool:
    return any(isinstance(m, OpticalConv) for _, m in model.named_modules())


def evaluate(model: Module, data: Cifar10Set, config: Optional[TrainConfig] = None) -> float:
    """Top-1 accuracy in percent."""
    config = config or TrainConfig()
    was = model.training
    model.eval()
    correct = 0
    try:
        with T.no_grad():
            for i in range(0, len(data), config.eval_batch_size):
                x = augment_normalize(data.images[i:i + config.eval_batch_size], config, train=False)
                logits = model(Tensor(x)).data
                correct += int(np.sum(logits.argmax(axis=1) == data.labels[i:i + config.eval_batch_size]))
    finally:
        model.train(was)
    return 100.0 * correct / max(1, len(data))


def train(model: Module, train_set: Cifar10Set, test_set: Optional[Cifar10Set], config: TrainConfig,
          out_dir=None, on_epoch=None) -> list[dict]:
    """SGD training; returns one record per epoch.

    Records hold ``epoch``, ``loss`` (mean train loss), ``top1`` (test, or
    None), ``lr`` and, for models with optics, ``optical_grad_norm`` (mean
    over the epoch's steps). With ``out_dir`` a checkpoint is written after
    every epoch. A non-finite loss restores the last good state and raises
    :class:`TrainingAborted`.
    """
    config.validate()
    train_set = train_set.subset(config.subset_size)
    if test_set is not None:
        test_set = test_set.subset(config.test_subset)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    opt = SGD(model.named_parameters(), config.lr0, config.momentum, config.weight_decay)
    optics = has_optics(model)
    history: list[dict] = []
    good_state = model.state_dict()
    good_ckpt = None
    with threadpool_limits(limits=config.threads):
        for epoch in range(config.epochs):
            model.train()
            opt.lr = config.lr_at(epoch)
            order = rng.permutation(len(train_set))
            loss_sum, seen, gnorms = 0.0, 0, []
            for i in range(0, len(order), config.batch_size):
                idx = order[i:i + config.batch_size]
                x = augment_normalize(train_set.images[idx], config, rng, train=True)
                loss = T.softmax_cross_entropy(model(Tensor(x)), train_set.labels[idx])
                if not np.isfinite(loss.data):
                    model.load_state_dict(good_state)
                    raise TrainingAborted(f"non-finite loss in epoch {epoch}, batch {i // config.batch_size}",
                                          [h["loss"] for h in history], good_ckpt)
                opt.zero_grad()
                loss.backward()
                if optics:
                    gnorms.append(optical_grad_norm(model))
                try:
                    opt.step()
                except NonFiniteError as exc:
                    model.load_state_dict(good_state)
                    raise TrainingAborted(str(exc), [h["loss"] for h in history], good_ckpt) from exc
                loss_sum += float(loss.data) * len(idx)
                seen += len(idx)
            rec = {"epoch": epoch + 1, "loss": loss_sum / seen, "lr": opt.lr,
                   "top1": evaluate(model, test_set, config) if test_set is not None else None}
            if optics:
                rec["optical_grad_norm"] = float(np.mean(gnorms))
            history.append(rec)
            good_state = model.state_dict()
            if out_dir is not None:
                good_ckpt = save_checkpoint(out_dir / f"epoch_{epoch + 1:03d}.tnsr", model, opt, epoch + 1)
                save_checkpoint(out_dir / "last.tnsr", model, opt, epoch + 1)
            log.info("epoch %d/%d loss %.4f top1 %s lr %.4f", epoch + 1, config.epochs, rec["loss"],
                     "-" if rec["top1"] is None else f"{rec['top1']:.2f}", opt.lr)
            if on_epoch is not None:
                on_epoch(rec)
    return history


def config_fields():
    return {f.name: f for f in fields(TrainConfig)}
