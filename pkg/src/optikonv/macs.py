"""Multiply-accumulate counting with THOP's conventions.

Rules per leaf layer (``N`` = batch, primes = output extents):

==============  ==========================================
Conv2d          ``N * Cout * H' * W' * Cin * kh * kw``
Linear          ``N * out * in``
BatchNorm2d     0
ReLU, SiLU      0
MaxPool2d       0
GlobalAvgPool   0
Flatten         0
OpticalConv     0 (done by light); see ``electronic_equivalent``
==============  ==========================================

Biases and residual additions are not counted. Any other leaf type raises
:class:`UnsupportedOpError` naming every offending layer, so nothing is
dropped silently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedOpError
from .nn import (
    BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Identity, Linear, MaxPool2d, Module, ReLU, SiLU,
    trace_leaves,
)
from .optical_layer import OpticalConv
from .tensor import Tensor, no_grad

FREE = (BatchNorm2d, ReLU, SiLU, MaxPool2d, GlobalAvgPool, Flatten, Identity)


@dataclass
class LayerMacs:
    name: str
    kind: str
    input_shape: tuple
    output_shape: tuple
    macs: int


def _leaf_macs(m: Module, inp, out, electronic_equivalent: bool):
    if isinstance(m, Conv2d):
        n, cout, ho, wo = out
        return n * cout * ho * wo * m.cin * m.k * m.k
    if isinstance(m, Linear):
        fout, fin = m.weight.shape
        return inp[0] * fout * fin
    if isinstance(m, OpticalConv):
        if not electronic_equivalent:
            return 0
        n, c, ho, wo = out
        return n * c * ho * wo * sum(b * b for b in m.sizes)
    if isinstance(m, FREE):
        return 0
    return None


def mac_table(model: Module, input_shape=(1, 3, 32, 32), electronic_equivalent: bool = False):
    """Per-leaf MAC rows in execution order.

    ``electronic_equivalent=True`` charges optical convolutions as if they ran
    as depthwise convolutions in electronics, which is useful for comparing
    branch and merged forms.
    """
    names = {id(m): n for n, m in model.named_modules()}
    was_training = model.training
    model.eval()
    try:
        with no_grad(), trace_leaves() as calls:
            model(Tensor(np.zeros(input_shape, dtype=np.float32)))
    finally:
        model.train(was_training)
    rows, bad = [], []
    for m, inp, out in calls:
        macs = _leaf_macs(m, inp, out, electronic_equivalent)
        name = names.get(id(m), "?")
        if macs is None:
            bad.append(f"{name} ({type(m).__name__})")
            continue
        rows.append(LayerMacs(name, type(m).__name__, inp, out, int(macs)))
    if bad:
        raise UnsupportedOpError("no MAC rule for: " + ", ".join(bad))
    return rows


def count_macs(model: Module, input_shape=(1, 3, 32, 32), electronic_equivalent: bool = False) -> int:
    return sum(r.macs for r in mac_table(model, input_shape, electronic_equivalent))


def reduction(codesign_macs: int, baseline_macs: int) -> float:
    """Fractional MAC saving ``1 - codesign / baseline``."""
    return 1.0 - codesign_macs / baseline_macs


def format_table(rows) -> str:
    lines = [f"{'layer':<34} {'type':<14} {'output':<18} {'MACs':>14}"]
    for r in rows:
        lines.append(f"{r.name:<34} {r.kind:<14} {str(r.output_shape):<18} {r.macs:>14,}")
    total = sum(r.macs for r in rows)
    lines.append(f"{'total':<34} {'':<14} {'':<18} {total:>14,}")
    return "\n".join(lines)
