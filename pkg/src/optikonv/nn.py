"""Small module system on top of :mod:`optikonv.tensor`.

Modules own their parameters as :class:`Tensor` attributes and their
children as attributes (or inside :class:`Sequential`). Naming follows
attribute paths, e.g. ``stage1.0.weight``. Leaf modules can be traced
during a forward pass, which is what the MAC counter uses.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import BatchNormState, Tensor

_trace: Optional[list] = None


@contextlib.contextmanager
def trace_leaves():
    """Record ``(module, input_shape, output_shape)`` for every leaf call."""
    global _trace
    prev, _trace = _trace, []
    try:
        yield _trace
    finally:
        _trace = prev


class Module:
    training = True

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        out = self.forward(x)
        if _trace is not None and not any(True for _ in self.children()):
            _trace.append((self, tuple(x.shape), tuple(out.shape)))
        return out

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def _own_params(self):
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield name, v

    def named_parameters(self):
        for mname, m in self.named_modules():
            for pname, p in m._own_params():
                yield (f"{mname}.{pname}" if mname else pname), p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for mname, m in self.named_modules():
            state = getattr(m, "state", None)
            if isinstance(state, BatchNormState):
                yield f"{mname}.running_mean", state, "running_mean"
                yield f"{mname}.running_var", state, "running_var"

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data.copy() for n, p in self.named_parameters()}
        for n, state, attr in self.named_buffers():
            out[n] = np.array(getattr(state, attr), dtype=np.float32)
        return out

    def load_state_dict(self, sd, strict: bool = True):
        known = set()
        for n, p in self.named_parameters():
            known.add(n)
            if n not in sd:
                if strict:
                    raise KeyError(f"missing parameter {n!r}")
                continue
            arr = np.asarray(sd[n], dtype=np.float32)
            if arr.shape != p.shape:
                raise ShapeError(f"{n}: checkpoint has {arr.shape}, model expects {p.shape}")
            p.data = arr.copy()
        for n, state, attr in self.named_buffers():
            known.add(n)
            if n in sd:
                setattr(state, attr, np.asarray(sd[n], dtype=np.float32).copy())
            elif strict:
                raise KeyError(f"missing buffer {n!r}")
        extra = [k for k in sd if k not in known and not k.startswith("opt.")]
        if strict and extra:
            raise KeyError(f"unexpected entries: {', '.join(sorted(extra))}")

    def train(self, mode: bool = True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=None, bias=False, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.padding = k // 2 if padding is None else padding
        self.weight = _param(kaiming_normal(rng, (cout, cin, k, k), cin * k * k))
        self.bias = _param(np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.state = BatchNormState(channels, momentum, eps)

    def forward(self, x):
        return T.batchnorm2d(x, self.gamma, self.beta, self.state, self.training)


class Linear(Module):
    def __init__(self, fin, fout, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(fin)
        self.weight = _param(rng.uniform(-bound, bound, size=(fout, fin)))
        self.bias = _param(rng.uniform(-bound, bound, size=fout))

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class SiLU(Module):
    def forward(self, x):
        return T.silu(x)


class MaxPool2d(Module):
    def __init__(self, k=2, stride=None):
        self.k, self.stride = k, stride

    def forward(self, x):
        return T.maxpool2d(x, self.k, self.stride)


class GlobalAvgPool(Module):
    def forward(self, x):
        return T.global_avgpool(x)


class Flatten(Module):
    def forward(self, x):
        return T.flatten(x)


class Identity(Module):
    def forward(self, x):
        return x


class Sequential(Module):
    def __init__(self, *layers, names=None):
        self.layers = list(layers)
        self.names = list(names) if names else [str(i) for i in range(len(layers))]
        if len(self.names) != len(self.layers):
            raise ValueError("one name per layer")

    def children(self):
        yield from zip(self.names, self.layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.layers[self.names.index(key)]
        return self.layers[key]

    def __len__(self):
        return len(self.layers)
