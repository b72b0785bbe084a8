"""Scalar Fourier optics: band-limited angular spectrum propagation, phase mask to
PSF, and incoherent optical convolution.

Conventions
-----------
* Fields are sampled on square grids of ``mask_pixels`` with pitch ``pitch``.
* ``propagate`` zero-pads the field by ``config.padding`` before the FFT so
  the transfer function acts as a linear (not circular) convolution, then
  crops back to the original window. With ``padding=1`` the operator is
  periodic and exactly unitary on its passband.
* Sampling: the transfer-function chirp is alias-free when the band limit of
  Matsushima & Shimobaba does not cut into the sampled spectrum, i.e. when
  ``|d| <= (M p / 2) * sqrt((2p / lambda)^2 - 1)`` for the padded grid size
  ``M``. Beyond that the band limit is still applied if ``strict=False``.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.signal import convolve, fftconvolve

from .errors import ContractError, DegenerateError, ParameterError, SamplingError, ShapeError
from .tensor import Tensor

TWO_PI = 2 * math.pi


@dataclass(frozen=True)
class OpticsConfig:
    """Propagation geometry. Defaults are simulation choices (532 nm, 2 um pitch,
    512 px mask, 5 mm to the sensor), picked to satisfy the sampling limit."""

    wavelength: float = 532e-9
    distance: float = 5e-3
    mask_pixels: int = 512
    pitch: float = 2e-6
    aperture: Optional[float] = 256.0  # radius in pixels; None = full square
    padding: int = 2

    def __post_init__(self):
        if not (self.wavelength > 0 and self.pitch > 0 and self.distance >= 0):
            raise ParameterError(
                f"wavelength and pitch must be > 0 and distance >= 0, got {self.wavelength}, "
                f"{self.pitch}, {self.distance}")
        if self.mask_pixels < 1 or self.padding < 1:
            raise ParameterError("mask_pixels and padding must be >= 1")
        if self.distance > 0 and not self.sampling_ok():
            warnings.warn(
                f"distance {self.distance:g} m exceeds the angular-spectrum limit "
                f"{self.critical_distance():g} m; pitch >= {self.required_pitch():.4g} m needed",
                stacklevel=2)

    @property
    def grid(self) -> int:
        """Side of the zero-padded computation grid."""
        return self.mask_pixels * self.padding

    def critical_distance(self) -> float:
        ratio = (2 * self.pitch / self.wavelength) ** 2 - 1
        if ratio <= 0:
            return 0.0
        return self.grid * self.pitch / 2 * math.sqrt(ratio)

    def sampling_ok(self, distance: Optional[float] = None) -> bool:
        d = abs(self.distance if distance is None else distance)
        return d <= self.critical_distance() * (1 + 1e-12)

    def required_pitch(self, distance: Optional[float] = None) -> float:
        """Smallest pitch for which ``distance`` stays inside the sampling limit."""
        d = abs(self.distance if distance is None else distance)
        m, lam = self.grid, self.wavelength
        a = m * m / lam ** 2
        b = m * m / 4
        q = (b + math.sqrt(b * b + 4 * a * d * d)) / (2 * a)
        return math.sqrt(q)


@dataclass
class ComplexField:
    """Complex amplitude on a square grid (``u`` stored as complex64)."""

    u: np.ndarray
    pitch: float

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.complex64)
        if self.u.ndim != 2:
            raise ShapeError(f"ComplexField must be 2-D, got {self.u.shape}")

    @property
    def re(self):
        return self.u.real

    @property
    def im(self):
        return self.u.imag

    @property
    def shape(self):
        return self.u.shape

    def energy(self) -> float:
        return float(np.sum(np.abs(self.u.astype(np.complex128)) ** 2))


def wrap_phase(phase) -> np.ndarray:
    """Map to float32 values in [0, 2*pi)."""
    out = np.mod(np.asarray(phase, dtype=np.float64), TWO_PI).astype(np.float32)
    out[out.astype(np.float64) >= TWO_PI] = 0.0
    return out


def level_phase(index, levels: int) -> np.ndarray:
    """Phase of quantization level ``index`` out of ``levels`` (float32)."""
    return wrap_phase(np.asarray(index, dtype=np.float64) * (TWO_PI / levels))


@dataclass
class PhaseMask:
    phase: np.ndarray
    config: OpticsConfig = field(default_factory=OpticsConfig)
    levels: int = 0

    def __post_init__(self):
        self.phase = wrap_phase(self.phase)
        n = self.config.mask_pixels
        if self.phase.shape != (n, n):
            raise ShapeError(f"phase {self.phase.shape} does not match mask_pixels={n}")
        if self.levels < 0:
            raise ParameterError(f"levels must be >= 0, got {self.levels}")
        if self.levels:
            steps = self.phase.astype(np.float64) / (TWO_PI / self.levels)
            if np.abs(steps - np.round(steps)).max() > 1e-4:
                raise ContractError(f"phase values are not multiples of 2*pi/{self.levels}")


@dataclass
class Psf:
    """Non-negative intensity kernel; ``normalized`` means it sums to 1."""

    intensity: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        self.intensity = np.asarray(self.intensity, dtype=np.float32)
        if self.intensity.ndim != 2:
            raise ShapeError(f"PSF must be 2-D, got {self.intensity.shape}")
        if (self.intensity < 0).any():
            raise ContractError("PSF intensity must be non-negative")
        if self.normalized and abs(self.total() - 1.0) > 1e-6:
            raise ContractError(f"PSF flagged normalized but sums to {self.total():.9g}")

    def total(self) -> float:
        return float(self.intensity.sum(dtype=np.float64))

    @classmethod
    def from_intensity(cls, intensity) -> "Psf":
        """Clip negatives and normalize to unit sum."""
        a = np.clip(np.asarray(intensity, dtype=np.float64), 0, None)
        s = a.sum()
        if not s > 0:
            raise DegenerateError("PSF has no energy")
        return cls((a / s).astype(np.float32), normalized=True)


# ----------------------------------------------------------------------------
# propagation

@functools.lru_cache(maxsize=32)
def _transfer(wavelength: float, distance: float, grid: int, pitch: float) -> np.ndarray:
    """Band-limited angular-spectrum transfer function in FFT (unshifted) order."""
    f = np.fft.fftfreq(grid, d=pitch)
    fx, fy = np.meshgrid(f, f, indexing="xy")
    arg = 1.0 - (wavelength * fx) ** 2 - (wavelength * fy) ** 2
    prop = arg > 0
    h = np.zeros((grid, grid), dtype=np.complex128)
    h[prop] = np.exp(1j * TWO_PI * (distance / wavelength) * np.sqrt(arg[prop]))
    df = 1.0 / (grid * pitch)
    flim = 1.0 / (wavelength * math.sqrt((2 * df * abs(distance)) ** 2 + 1))
    h[(np.abs(fx) > flim) | (np.abs(fy) > flim)] = 0
    h.setflags(write=False)
    return h


def _pad(u: np.ndarray, grid: int) -> np.ndarray:
    n = u.shape[0]
    if grid == n:
        return u.astype(np.complex128, copy=True)
    out = np.zeros((grid, grid), dtype=np.complex128)
    o = (grid - n) // 2
    out[o:o + n, o:o + n] = u
    return out


def _crop(u: np.ndarray, n: int) -> np.ndarray:
    o = (u.shape[0] - n) // 2
    return u[o:o + n, o:o + n]


def _check_sampling(config: OpticsConfig, distance: float, strict: bool):
    if strict and distance != 0 and not config.sampling_ok(distance):
        raise SamplingError(
            f"|distance| = {abs(distance):g} m exceeds the angular-spectrum sampling limit "
            f"{config.critical_distance():g} m for a {config.grid}-pixel grid; "
            f"required pitch >= {config.required_pitch(distance):.6g} m")


def propagate_array(u: np.ndarray, config: OpticsConfig, distance: Optional[float] = None,
                    strict: bool = True) -> np.ndarray:
    """Propagate a complex128 array; the workhorse behind :func:`propagate`."""
    d = config.distance if distance is None else distance
    n = u.shape[0]
    if d == 0:
        return np.array(u, dtype=np.complex128)
    _check_sampling(config, d, strict)
    h = _transfer(config.wavelength, float(d), config.grid, config.pitch)
    return _crop(np.fft.ifft2(np.fft.fft2(_pad(u, config.grid)) * h), n)


def propagate(field_: ComplexField, config: OpticsConfig, distance: Optional[float] = None,
              strict: bool = True) -> ComplexField:
    """Angular-spectrum propagation by ``distance`` (default ``config.distance``).

    Negative distances back-propagate with the conjugate transfer function.
    Raises :class:`SamplingError` (naming the pitch that would be needed) when
    the geometry violates the sampling limit and ``strict`` is set.
    """
    n = config.mask_pixels
    if field_.shape != (n, n):
        raise ShapeError(f"field {field_.shape} does not match mask_pixels={n}")
    if not math.isclose(field_.pitch, config.pitch, rel_tol=1e-9):
        raise ShapeError(f"field pitch {field_.pitch} differs from config pitch {config.pitch}")
    out = propagate_array(field_.u.astype(np.complex128), config, distance, strict)
    return ComplexField(out, field_.pitch)


def aperture_mask(config: OpticsConfig) -> np.ndarray:
    n = config.mask_pixels
    if config.aperture is None:
        return np.ones((n, n), dtype=np.float64)
    c = (n - 1) / 2
    y, x = np.mgrid[0:n, 0:n]
    return ((x - c) ** 2 + (y - c) ** 2 <= config.aperture ** 2).astype(np.float64)


def sensor_field(phase: np.ndarray, config: OpticsConfig, strict: bool = True) -> np.ndarray:
    """Unit plane wave through aperture and phase, propagated to the sensor."""
    amp = aperture_mask(config)
    if not amp.any():
        raise DegenerateError("aperture contains no pixels")
    return propagate_array(amp * np.exp(1j * np.asarray(phase, dtype=np.float64)), config, strict=strict)


def psf_from_phase(mask: PhaseMask, strict: bool = True) -> Psf:
    """Normalized intensity response of the mask to an on-axis point at infinity."""
    u = sensor_field(mask.phase, mask.config, strict)
    return Psf.from_intensity(np.abs(u) ** 2)


# ----------------------------------------------------------------------------
# optical convolution

def optical_convolve(image, psf: Psf, noise_sigma: float = 0.0, rng=None,
                     method: str = "fft") -> Tensor:
    """Full linear convolution of every channel with the same PSF.

    ``image`` is ``[C,H,W]`` (or batched ``[N,C,H,W]``); the output grows by
    ``P-1`` rows and ``Q-1`` columns for a ``P x Q`` PSF. This is a true
    convolution (kernel flipped), which is what incoherent imaging does.
    Optional additive Gaussian sensor noise with standard deviation
    ``noise_sigma``. ``method='direct'`` sums products explicitly, so pixels
    outside the PSF support come out as exact zeros.
    """
    if not psf.normalized or abs(psf.total() - 1.0) > 1e-6:
        raise ContractError("optical_convolve needs a normalized PSF (sum = 1)")
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if data.ndim not in (3, 4):
        raise ShapeError(f"optical_convolve expects [C,H,W] or [N,C,H,W], got {data.shape}")
    kernel = psf.intensity.astype(np.float64).reshape((1,) * (data.ndim - 2) + psf.intensity.shape)
    if method == "fft":
        out = fftconvolve(data.astype(np.float64), kernel, mode="full", axes=(-2, -1))
    elif method == "direct":
        out = convolve(data.astype(np.float64), kernel, mode="full", method="direct")
    else:
        raise ValueError(f"unknown method {method!r}")
    if data.size and data.min() >= 0:
        # FFT round-off can leave tiny negatives; intensities cannot be negative
        np.clip(out, 0, None, out=out)
    if noise_sigma:
        rng = np.random.default_rng() if rng is None else rng
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    return Tensor(out.astype(np.float32))


def with_distance(config: OpticsConfig, distance: float) -> OpticsConfig:
    return replace(config, distance=distance)
