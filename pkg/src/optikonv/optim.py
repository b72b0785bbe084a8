"""SGD with momentum and weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import NonFiniteError


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: list,
             lr: float, momentum: float = 0.0, weight_decay: float = 0.0, names=None):
    """Update ``params`` in place.

    ``v <- momentum * v + grad + weight_decay * param`` then
    ``param <- param - lr * v``. ``state`` holds one velocity buffer per
    parameter; pass an empty list on the first call and it is zero-filled.
    Nothing is modified if any gradient is non-finite.
    """
    if not state:
        state.extend(np.zeros_like(p) for p in params)
    bad = [i for i, g in enumerate(grads) if g is not None and not np.isfinite(g).all()]
    if bad:
        labels = [names[i] if names else f"#{i}" for i in bad]
        raise NonFiniteError(f"non-finite gradient in {', '.join(labels)}; step aborted")
    lr, momentum, weight_decay = (np.float32(v) for v in (lr, momentum, weight_decay))
    for p, g, v in zip(params, grads, state):
        if g is None:
            continue
        d = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += d
        p -= lr * v
    return params


class SGD:
    """Stateful wrapper applying :func:`sgd_step` to named tensors."""

    def __init__(self, named_params, lr=0.1, momentum=0.9, weight_decay=5e-4):
        self.named_params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: list = []

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self):
        names = [n for n, _ in self.named_params]
        params = [p.data for _, p in self.named_params]
        grads = [p.grad for _, p in self.named_params]
        sgd_step(params, grads, self.state, self.lr, self.momentum, self.weight_decay, names=names)

    def state_arrays(self):
        return {f"opt.{n}": v for (n, _), v in zip(self.named_params, self.state)}


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return lr0 / 2 * (1 + math.cos(math.pi * epoch / total))
