"""Minimal reverse-mode autodiff over float32 numpy arrays.

Only what CIFAR-scale CNN training needs is here: im2col convolution,
SiLU/ReLU, batch norm, pooling, linear layers and softmax cross-entropy.
There is no general broadcasting; the only implicit expansion is the
per-channel bias add inside ``conv2d`` and ``linear``.

Convolution follows the cross-correlation convention (the kernel is not
flipped), as in every mainstream deep learning framework.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True
_anomaly_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, MAC tracing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_anomaly_checks(enabled: bool) -> None:
    """When on, every op verifies its output is finite and raises otherwise."""
    global _anomaly_checks
    _anomaly_checks = bool(enabled)


class Tensor:
    """Dense float32 array with an optional gradient buffer.

    Tensors produced by ops remember their parents and a closure mapping the
    output gradient to parent gradients. ``backward`` replays those closures
    in exact reverse execution order (see :class:`Graph`).
    """

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence["Tensor"] = (),
                 _backward: Optional[Callable] = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op
        self.seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def isfinite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> "Graph":
        """Backpropagate from this tensor; returns the replayed graph."""
        graph = Graph.from_output(self)
        graph.backward(self, grad)
        return graph

    # arithmetic sugar used by models and tests
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def sum(self):
        return total(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Graph:
    """Ops reachable from an output, kept in the order they were executed."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t.seq))

    @property
    def ops(self) -> list[Tensor]:
        return [t for t in self.nodes if not t.is_leaf]

    def backward(self, out: Tensor, grad=None):
        if grad is None:
            if out.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got {out.shape}")
            grad = np.ones_like(out.data)
        grads = {id(out): np.asarray(grad, dtype=DTYPE).reshape(out.shape)}
        self.visited: list[Tensor] = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            self.visited.append(node)
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node.op} backward produced {pg.shape} for input {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    if _anomaly_checks and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def _need(*ts: Tensor) -> list[bool]:
    return [t.requires_grad for t in ts]


# ----------------------------------------------------------------------------
# elementwise and shape ops

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.sum(a.data, dtype=DTYPE), (a,),
                 lambda g: (np.full(shape, g, dtype=DTYPE),), "sum")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1 if a.ndim == 1 else int(np.prod(a.shape[1:]))))


def center_crop(x: Tensor, h: int, w: int) -> Tensor:
    """Crop the trailing two axes of ``x`` to ``h x w`` around the centre."""
    H, W = x.shape[-2:]
    if h > H or w > W:
        raise ShapeError(f"center_crop: {h}x{w} larger than input {H}x{W}")
    top, left = (H - h) // 2, (W - w) // 2
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[..., top:top + h, left:left + w] = g
        return (out,)

    return _make(x.data[..., top:top + h, left:left + w].copy(), (x,), backward, "center_crop")


# ----------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, xp_shape, kh, kw, stride, ho, wo):
    n, c = xp_shape[:2]
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros(xp_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    return dxp


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``x[N,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``.

    Output extent is ``floor((H + 2*padding - kh) / stride) + 1`` per axis.
    Computed as one im2col matmul; this is the reference path.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input {x.shape} has {cin} channels but weight {w.shape} expects {wcin}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape} (padding={padding})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {w.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    need_x = x.requires_grad

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        db = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        dx = None
        if need_x:
            dxp = _col2im(gm @ wmat, xp.shape, kh, kw, stride, ho, wo)
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
            dx = np.ascontiguousarray(dx)
        return dx, dw, db

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward, "conv2d")


# ----------------------------------------------------------------------------
# activations

def _sigmoid(v):
    # tanh form never overflows and avoids masked indexing
    return (0.5 * (1.0 + np.tanh(0.5 * v))).astype(v.dtype, copy=False)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    y = x.data * s

    def backward(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _make(y, (x,), backward, "silu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def activation(x: Tensor, kind: str = "silu") -> Tensor:
    if kind == "silu":
        return silu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------------------
# normalization

class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool = True) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate (momentum 0.1 by default).
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma {gamma.shape}/beta {beta.shape} vs input {x.shape}")
    eps = DTYPE(state.eps)
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError(f"batchnorm2d in train mode needs N*H*W >= 2, got input {x.shape}")
        mean = x.data.mean(axis=(0, 2, 3), dtype=DTYPE)
        xc = x.data - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3), dtype=DTYPE)
        mom = DTYPE(state.momentum)
        state.running_mean = (1 - mom) * state.running_mean + mom * mean
        state.running_var = (1 - mom) * state.running_var + mom * var * DTYPE(m / (m - 1))
    else:
        mean, var = state.running_mean, state.running_var
        xc = x.data - mean[None, :, None, None]
    inv = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = xc * inv[None, :, None, None]
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            if training:
                mean_g = gx.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = (gx - mean_g - xhat * mean_gx) * inv[None, :, None, None]
            else:
                dx = gx * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return _make(y, (x, gamma, beta), backward, "batchnorm2d")


# ----------------------------------------------------------------------------
# pooling and dense layers

def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling; ties go to the first element in row-major window order."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} does not fit input {x.shape}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros(x.shape, dtype=DTYPE)
        di, dj = np.divmod(idx, k)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dx, (nn_, cc, rows, cols), g)
        return (dx,)

    return _make(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=DTYPE)
    inv = DTYPE(1.0 / (h * w))
    return _make(out, (x,), lambda g: (np.broadcast_to(g * inv, x.shape).copy(),), "global_avgpool")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        dx = g @ w.data if x.requires_grad else None
        dw = g.T @ x.data if w.requires_grad else None
        db = g.sum(axis=0) if b is not None else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "linear")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean(dtype=DTYPE)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make(loss, (logits,), backward, "softmax_cross_entropy")
