"""Division-adjoint (DAD) coding of signed multi-channel kernels into one PSF.

A bank of ``K`` signed ``k x k`` kernels is split into non-negative positive
and negative parts. The ``2K`` parts are tiled on a grid with enough spacing
that their convolution outputs never overlap on the sensor. Dividing by the
total mass ``s`` makes the tiled pattern a valid PSF (non-negative, sum 1).
Decoding crops each tile's window from the sensor image and returns
``s * (positive - negative)``, which is the full signed convolution.

Each tile holds its kernel rotated by 180 degrees: optics convolves, the
network cross-correlates, and the rotation makes the two agree exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import DegenerateError, FormatError, GeometryError, ShapeError
from .optics import Psf
from .tensor import Tensor

POS, NEG = 1, -1


@dataclass
class DadLayout:
    channels: int
    kernel: int
    input_h: int
    input_w: int
    tile_pitch: int
    grid_rows: int
    grid_cols: int
    placement: list = field(default_factory=list)  # (channel, sign, row, col)
    scale: float = 1.0
    guard: int = 2
    kernel_hash: str = ""

    def __post_init__(self):
        self.placement = [tuple(int(v) for v in p) for p in self.placement]
        self.validate()

    def validate(self):
        k, K = self.kernel, self.channels
        if K < 1 or k < 1:
            raise GeometryError(f"need channels >= 1 and kernel >= 1, got {K}, {k}")
        if self.grid_rows * self.grid_cols < 2 * K:
            raise GeometryError(f"{self.grid_rows}x{self.grid_cols} grid cannot hold {2 * K} tiles")
        need = max(self.input_h, self.input_w) + k - 1 + self.guard
        if self.tile_pitch < need:
            raise GeometryError(f"tile pitch {self.tile_pitch} < {need}: tiles would cross-talk")
        if not self.scale > 0:
            raise GeometryError(f"scale must be > 0, got {self.scale}")
        keys = [(c, s) for c, s, _, _ in self.placement]
        want = {(c, s) for c in range(K) for s in (POS, NEG)}
        if len(keys) != 2 * K or set(keys) != want:
            raise GeometryError("placement must list every (channel, sign) exactly once")
        cells = [(r, c) for _, _, r, c in self.placement]
        if len(set(cells)) != len(cells) or any(
                not (0 <= r < self.grid_rows and 0 <= c < self.grid_cols) for r, c in cells):
            raise GeometryError("placement cells must be distinct and inside the grid")

    @property
    def psf_shape(self):
        t, k = self.tile_pitch, self.kernel
        return (self.grid_rows - 1) * t + k, (self.grid_cols - 1) * t + k

    @property
    def window(self):
        """Extent of one tile's convolution output on the sensor ('full')."""
        return self.input_h + self.kernel - 1, self.input_w + self.kernel - 1

    @property
    def sensor_shape(self):
        ph, pw = self.psf_shape
        return self.input_h + ph - 1, self.input_w + pw - 1

    def origin(self, channel: int, sign: int):
        for c, s, r, col in self.placement:
            if c == channel and s == sign:
                return r * self.tile_pitch, col * self.tile_pitch
        raise KeyError((channel, sign))


def plan_layout(channels: int, kernel: int, input_h: int, input_w: int, guard: int = 2) -> DadLayout:
    """Near-square grid, channel-major placement with each +/- pair adjacent."""
    if channels < 1:
        raise GeometryError(f"channels must be >= 1, got {channels}")
    n = 2 * channels
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    pitch = max(input_h, input_w) + kernel - 1 + guard
    placement = []
    for i in range(n):
        c, sign = divmod(i, 2)
        placement.append((c, POS if sign == 0 else NEG, i // cols, i % cols))
    return DadLayout(channels, kernel, input_h, input_w, pitch, rows, cols, placement, guard=guard)


def split_signed(w):
    """``(max(W, 0), max(-W, 0))``: two non-negative kernels with ``W = P - N``."""
    w = np.asarray(w)
    return np.maximum(w, 0), np.maximum(-w, 0)


def kernel_hash(w) -> str:
    return hashlib.sha256(np.ascontiguousarray(w, dtype=np.float32).tobytes()).hexdigest()


def _kernels(w):
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    if w.ndim == 4 and w.shape[1] == 1:
        w = w[:, 0]
    if w.ndim != 3 or w.shape[1] != w.shape[2]:
        raise ShapeError(f"signed kernels must be [K,k,k], got {w.shape}")
    if not np.isfinite(w).all():
        raise ShapeError("signed kernels contain non-finite values")
    return w


def encode(w, layout: DadLayout):
    """Tile the split kernels into one normalized PSF.

    Returns ``(psf, layout)`` where the returned layout carries the scale
    ``s = sum(P) + sum(N)`` and a hash of ``w`` for staleness checks.
    """
    w = _kernels(w)
    pos, neg = split_signed(w.astype(np.float64))
    psf, layout = encode_parts(pos, neg, layout)
    return psf, replace(layout, kernel_hash=kernel_hash(w))


def encode_parts(pos, neg, layout: DadLayout):
    """Like :func:`encode` but for an explicit non-negative pair ``W = P - N``.

    The pair need not be the minimal split; any overlap cancels on decode.
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    want = (layout.channels, layout.kernel, layout.kernel)
    if pos.shape != want or neg.shape != want:
        raise GeometryError(f"kernel parts {pos.shape}/{neg.shape} do not match layout {want}")
    if (pos < 0).any() or (neg < 0).any():
        raise ShapeError("kernel parts must be non-negative")
    s = float(pos.sum() + neg.sum())
    if not s > 0:
        raise DegenerateError("all kernels are zero; the PSF scale is undefined")
    plane = np.zeros(layout.psf_shape, dtype=np.float64)
    k = layout.kernel
    for c, sign, _, _ in layout.placement:
        part = pos[c] if sign == POS else neg[c]
        r0, c0 = layout.origin(c, sign)
        plane[r0:r0 + k, c0:c0 + k] = part[::-1, ::-1]
    psf = Psf((plane / s).astype(np.float32), normalized=True)
    return psf, replace(layout, scale=s, kernel_hash=kernel_hash(pos - neg))


def read_tile(psf: Psf, layout: DadLayout, channel: int, sign: int) -> np.ndarray:
    """The part stored at ``(channel, sign)``, un-rotated and rescaled by ``s``."""
    r0, c0 = layout.origin(channel, sign)
    k = layout.kernel
    return psf.intensity[r0:r0 + k, c0:c0 + k][::-1, ::-1].astype(np.float64) * layout.scale


def decode(sensor, layout: DadLayout, crop: str = "full") -> Tensor:
    """Recover signed feature maps from a sensor image.

    ``sensor`` is ``[C, Hs, Ws]`` or ``[N, C, Hs, Ws]`` as produced by
    ``optical_convolve(image, psf)``. Output channel ``c * K + j`` holds
    colour plane ``c`` convolved with kernel ``j``. ``crop='full'`` keeps
    ``(H + k - 1)`` maps; ``'same'`` centre-crops them to ``H x W``.
    """
    data = sensor.data if isinstance(sensor, Tensor) else np.asarray(sensor)
    if data.ndim not in (3, 4):
        raise GeometryError(f"sensor must be [C,H,W] or [N,C,H,W], got {data.shape}")
    if data.shape[-2:] != layout.sensor_shape:
        raise GeometryError(f"sensor plane {data.shape[-2:]} does not match layout {layout.sensor_shape}")
    if crop not in ("full", "same"):
        raise ValueError(f"crop must be 'full' or 'same', got {crop!r}")
    wh, ww = layout.window
    data = data.astype(np.float64)
    maps = []
    for j in range(layout.channels):
        pr, pc = layout.origin(j, POS)
        nr, nc = layout.origin(j, NEG)
        maps.append(data[..., pr:pr + wh, pc:pc + ww] - data[..., nr:nr + wh, nc:nc + ww])
    out = np.stack(maps, axis=-3) * layout.scale  # [..., C, K, wh, ww]
    if crop == "same":
        o = (layout.kernel - 1) // 2
        out = out[..., o:o + layout.input_h, o:o + layout.input_w]
    lead = out.shape[:-4]
    out = out.reshape(lead + (out.shape[-4] * out.shape[-3],) + out.shape[-2:])
    return Tensor(out.astype(np.float32))


def tile_windows_mask(layout: DadLayout) -> np.ndarray:
    """Boolean sensor mask of every tile's output window."""
    m = np.zeros(layout.sensor_shape, dtype=bool)
    wh, ww = layout.window
    for c, s, _, _ in layout.placement:
        r0, c0 = layout.origin(c, s)
        m[r0:r0 + wh, c0:c0 + ww] = True
    return m


# ----------------------------------------------------------------------------
# serialization

def save_layout(layout: DadLayout, path) -> Path:
    meta = [layout.channels, layout.kernel, layout.input_h, layout.input_w, layout.tile_pitch,
            layout.grid_rows, layout.grid_cols, layout.scale, layout.guard]
    records = {
        "placement": np.array(layout.placement, dtype=np.float32).reshape(-1, 4),
        "meta": np.array(meta, dtype=np.float64),
    }
    if layout.kernel_hash:
        records["kernel_hash"] = np.frombuffer(bytes.fromhex(layout.kernel_hash), dtype=np.uint8)
    return checkpoint.save(path, records)


def load_layout(path) -> DadLayout:
    rec = checkpoint.load(path)
    try:
        meta, placement = rec["meta"].astype(np.float64), rec["placement"]
    except KeyError as exc:
        raise FormatError(f"{path}: layout needs 'meta' and 'placement' records") from exc
    h = rec.get("kernel_hash")
    return DadLayout(
        channels=int(meta[0]), kernel=int(meta[1]), input_h=int(meta[2]), input_w=int(meta[3]),
        tile_pitch=int(meta[4]), grid_rows=int(meta[5]), grid_cols=int(meta[6]),
        placement=[tuple(int(v) for v in row) for row in placement],
        scale=float(meta[7]), guard=int(meta[8]),
        kernel_hash=bytes(h.astype(np.uint8)).hex() if h is not None else "",
    )
