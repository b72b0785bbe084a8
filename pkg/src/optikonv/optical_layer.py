"""Trainable optical front-end and its deployed (PSF) counterpart.

During training the optical convolution is simulated exactly by a
multi-branch depthwise convolution: every colour plane is convolved with the
same ``K`` kernels, one set per branch size, and the branch outputs are
summed. After training the branches are merged into one ``k x k`` kernel per
channel (:func:`reparameterize`), encoded as a DAD PSF (:func:`compile_layer`)
and run through the simulated optics (:func:`forward_deployed`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dad import DadLayout, decode, encode, kernel_hash, plan_layout
from .errors import ConfigError, ConsistencyError, ParameterError, ShapeError
from .nn import BatchNorm2d, Conv2d, Module, _param
from .optics import Psf, optical_convolve
from .tensor import Tensor

COLORS = 3


@dataclass(frozen=True)
class OpticalLayerSpec:
    channels: int = 12
    kernel: int = 13
    branch_sizes: tuple = (13, 7, 5, 3)
    expand_to: int = 64
    use_bn_after_expand: bool = True
    crop_mode: str = "same"
    silu_position: str = "pre_1x1"

    def validate(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.expand_to < self.channels:
            raise ConfigError(f"expand_to ({self.expand_to}) must be >= channels ({self.channels})")
        if self.kernel % 2 == 0:
            raise ParameterError(f"kernel size must be odd, got {self.kernel}")
        for b in self.branch_sizes:
            _check_branch(b, self.kernel)
        if len(set(self.branch_sizes)) != len(self.branch_sizes):
            raise ConfigError(f"duplicate branch sizes in {self.branch_sizes}")
        if self.crop_mode not in ("same", "full"):
            raise ConfigError(f"crop_mode must be 'same' or 'full', got {self.crop_mode!r}")
        if self.silu_position not in ("pre_1x1", "post_1x1"):
            raise ConfigError(f"silu_position must be 'pre_1x1' or 'post_1x1', got {self.silu_position!r}")
        return self


def _check_branch(b: int, k: int):
    if b % 2 == 0 or b < 1:
        raise ParameterError(f"branch size {b} must be odd and positive")
    if b > k:
        raise ParameterError(f"branch size {b} exceeds kernel size {k}")


class OpticalConv(Module):
    """Depthwise multi-branch convolution shared by all colour planes.

    Input ``[N, 3, H, W]``; output ``[N, 3K, H', W']`` with channel
    ``c * K + j`` = colour ``c`` convolved with kernel ``j`` (the DAD decode
    order). ``H' = H`` for 'same' and ``H + k - 1`` for 'full'. Kernels have
    no bias: a PSF cannot add a constant.
    """

    def __init__(self, channels, kernel, branch_sizes, crop_mode="same", rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.kernel, self.crop_mode = channels, kernel, crop_mode
        self.sizes = tuple(branch_sizes)
        for b in self.sizes:
            _check_branch(b, kernel)
            std = math.sqrt(2.0 / (b * b)) / math.sqrt(len(self.sizes))
            setattr(self, f"branch{b}", _param(rng.normal(0.0, std, size=(channels, 1, b, b))))

    @property
    def branches(self) -> dict[int, Tensor]:
        return {b: getattr(self, f"branch{b}") for b in self.sizes}

    def padding(self, b: int) -> int:
        extra = (self.kernel - 1) // 2 if self.crop_mode == "full" else 0
        return b // 2 + extra

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != COLORS:
            raise ShapeError(f"optical layer expects [N,{COLORS},H,W], got {x.shape}")
        n, c, h, w = x.shape
        if h < self.kernel or w < self.kernel:
            raise ShapeError(f"input {h}x{w} smaller than kernel {self.kernel}")
        planes = T.reshape(x, (n * c, 1, h, w))
        out = None
        for b, wb in self.branches.items():
            y = T.conv2d(planes, wb, padding=self.padding(b))
            out = y if out is None else out + y
        return T.reshape(out, (n, c * self.channels) + out.shape[-2:])


def reparameterize(branches, kernel: int | None = None) -> np.ndarray:
    """Merge branch kernels into one ``[K, k, k]`` bank.

    ``branches`` maps size to ``[K, 1, b, b]`` (or ``[K, b, b]``) arrays, or
    is an :class:`OpticalConv`. Each branch is zero-padded symmetrically to
    ``k x k`` and the results are summed; convolution is linear, so the merged
    kernel gives the same pre-activation maps.
    """
    if isinstance(branches, OpticalConv):
        kernel = branches.kernel if kernel is None else kernel
        branches = branches.branches
    arrays = {}
    for b, w in branches.items():
        w = w.data if isinstance(w, Tensor) else np.asarray(w)
        if w.ndim == 4:
            w = w[:, 0]
        if w.shape[-1] % 2 == 0 or w.shape[-1] != w.shape[-2]:
            raise ParameterError(f"branch kernels must be square and odd-sized, got {w.shape}")
        arrays[w.shape[-1]] = w.astype(np.float64)
    k = max(arrays) if kernel is None else kernel
    K = next(iter(arrays.values())).shape[0]
    merged = np.zeros((K, k, k))
    for b, w in arrays.items():
        _check_branch(b, k)
        o = (k - b) // 2
        merged[:, o:o + b, o:o + b] += w
    return merged.astype(np.float32)


class OpticalLayer(Module):
    """Optics, then SiLU, then the electronic 1x1 expansion (and BN).

    ``silu_position='post_1x1'`` moves the SiLU after the 1x1 (and BN).
    """

    def __init__(self, spec: OpticalLayerSpec = OpticalLayerSpec(), rng=None):
        spec.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.optics = OpticalConv(spec.channels, spec.kernel, spec.branch_sizes, spec.crop_mode, rng=rng)
        self.expand = Conv2d(COLORS * spec.channels, spec.expand_to, 1, padding=0, bias=True, rng=rng)
        self.bn = BatchNorm2d(spec.expand_to) if spec.use_bn_after_expand else None

    def children(self):
        yield "optics", self.optics
        yield "expand", self.expand
        if self.bn is not None:
            yield "bn", self.bn

    def head(self, maps: Tensor, training=None) -> Tensor:
        """Electronic part applied to the (decoded) optical maps."""
        training = self.training if training is None else training
        pre = self.spec.silu_position == "pre_1x1"
        if pre:
            maps = T.silu(maps)
        y = self.expand(maps)
        if self.bn is not None:
            if training == self.bn.training:
                y = self.bn(y)
            else:
                y = T.batchnorm2d(y, self.bn.gamma, self.bn.beta, self.bn.state, training)
        return y if pre else T.silu(y)

    def forward(self, x):
        return self.head(self.optics(x))

    forward_train = forward

    def merged(self) -> "OpticalLayer":
        """Copy with the branches folded into a single ``k x k`` branch."""
        spec = OpticalLayerSpec(**{**self.spec.__dict__, "branch_sizes": (self.spec.kernel,)})
        out = OpticalLayer(spec)
        sd = {n: v for n, v in self.state_dict().items() if not n.startswith("optics.")}
        sd[f"optics.branch{spec.kernel}"] = reparameterize(self.optics)[:, None]
        out.load_state_dict(sd)
        out.train(self.training)
        return out


def compile_layer(layer: OpticalLayer, input_hw=(32, 32), guard: int = 2):
    """Merged kernels -> ``(Psf, DadLayout)`` for inputs of size ``input_hw``."""
    w = reparameterize(layer.optics)
    lay = plan_layout(w.shape[0], w.shape[-1], input_hw[0], input_hw[1], guard=guard)
    return encode(w, lay)


def forward_deployed(x, compiled, layer: OpticalLayer, noise_sigma: float = 0.0, rng=None,
                     method: str = "fft") -> Tensor:
    """Run the layer through simulated optics and the DAD decoder.

    BN (if any) uses its running statistics. Raises
    :class:`ConsistencyError` when ``compiled`` was built from other kernels.
    """
    psf, layout = compiled
    if not isinstance(psf, Psf) or not isinstance(layout, DadLayout):
        raise TypeError("compiled must be a (Psf, DadLayout) pair")
    current = kernel_hash(reparameterize(layer.optics))
    if layout.kernel_hash and layout.kernel_hash != current:
        raise ConsistencyError("layout was compiled from different kernels; recompile the PSF")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if data.ndim != 4 or data.shape[1] != COLORS:
        raise ShapeError(f"optical layer expects [N,{COLORS},H,W], got {data.shape}")
    if data.shape[-2:] != (layout.input_h, layout.input_w):
        raise ShapeError(f"input {data.shape[-2:]} does not match compiled size "
                         f"{(layout.input_h, layout.input_w)}")
    sensor = optical_convolve(data, psf, noise_sigma=noise_sigma, rng=rng, method=method)
    maps = decode(sensor, layout, crop=layer.spec.crop_mode)
    with T.no_grad():
        return layer.head(maps, training=False)
