"""Phase retrieval: find a mask phase whose PSF matches a target intensity.

Two solvers share one forward model (:func:`optikonv.optics.sensor_field`):

* :func:`gerchberg_saxton` - alternating projections, the classic baseline.
* :func:`retrieve_phase_sgd` - gradient descent on the amplitude loss
  ``sum((sqrt(I + eps) - sqrt(T))**2)`` with the gradient obtained by the
  Wirtinger chain rule: the residual is back-propagated through the conjugate
  transfer function, exactly as in Wirtinger flow.

Both optionally pass the phase through a lithography model
(:func:`apply_fab_model`) so the result can be written as a dose map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError, DivergenceError, ParameterError, ShapeError
from .optics import (
    TWO_PI, OpticsConfig, PhaseMask, Psf, _crop, _pad, _transfer, _check_sampling,
    aperture_mask, level_phase, wrap_phase,
)

log = logging.getLogger(__name__)

EPS = 1e-12


@dataclass(frozen=True)
class FabModel:
    """Direct-write lithography: Gaussian dose blur, then uniform phase levels."""

    levels: int = 16
    dose_blur_sigma: float = 0.0


def apply_fab_model(mask: PhaseMask, fab: FabModel) -> PhaseMask:
    phase = fabricate(mask.phase, fab)
    return PhaseMask(phase, mask.config, levels=fab.levels)


def fabricate(phase: np.ndarray, fab: FabModel) -> np.ndarray:
    """Blur the unit phasor (so wrapping at 2*pi is harmless), then snap to levels.

    ``levels=0`` skips quantization; any other value below 2 is rejected.
    """
    if fab.levels != 0 and fab.levels < 2:
        raise ParameterError(f"fabrication needs levels >= 2 (or 0 for continuous), got {fab.levels}")
    if fab.dose_blur_sigma < 0:
        raise ParameterError("dose_blur_sigma must be >= 0")
    phase = np.asarray(phase, dtype=np.float64)
    if fab.dose_blur_sigma > 0:
        re = gaussian_filter(np.cos(phase), fab.dose_blur_sigma, mode="wrap")
        im = gaussian_filter(np.sin(phase), fab.dose_blur_sigma, mode="wrap")
        phase = np.arctan2(im, re)
    if fab.levels:
        step = TWO_PI / fab.levels
        idx = np.round(np.mod(phase, TWO_PI) / step).astype(np.int64) % fab.levels
        return level_phase(idx, fab.levels)
    return wrap_phase(phase)


class _Forward:
    """Mask phase -> normalized sensor intensity, with its adjoint."""

    def __init__(self, config: OpticsConfig, strict: bool = True):
        _check_sampling(config, config.distance, strict)
        self.config = config
        self.n = config.mask_pixels
        self.amp = aperture_mask(config)
        self.h = _transfer(config.wavelength, float(config.distance), config.grid, config.pitch)

    def field(self, v: np.ndarray) -> np.ndarray:
        return _crop(np.fft.ifft2(np.fft.fft2(_pad(v, self.config.grid)) * self.h), self.n)

    def adjoint(self, u: np.ndarray) -> np.ndarray:
        return _crop(np.fft.ifft2(np.fft.fft2(_pad(u, self.config.grid)) * np.conj(self.h)), self.n)

    def source(self, phase: np.ndarray) -> np.ndarray:
        return self.amp * np.exp(1j * phase)


def amplitude_loss(intensity: np.ndarray, target: np.ndarray) -> float:
    """``sum((sqrt(I + eps) - sqrt(T))**2)`` for normalized ``I`` and ``T``."""
    return float(np.sum((np.sqrt(intensity + EPS) - np.sqrt(target)) ** 2))


def _normalized(u: np.ndarray):
    a = np.abs(u) ** 2
    s = a.sum()
    return a / s, a, s


def _target(target: Psf, config: OpticsConfig) -> np.ndarray:
    if not target.normalized:
        raise ContractError("phase retrieval needs a normalized target PSF")
    n = config.mask_pixels
    if target.intensity.shape != (n, n):
        raise ShapeError(f"target {target.intensity.shape} does not match mask_pixels={n}")
    t = target.intensity.astype(np.float64)
    return t / t.sum()


def _initial_phase(config: OpticsConfig, seed: int) -> np.ndarray:
    n = config.mask_pixels
    return np.random.default_rng(seed).uniform(0.0, TWO_PI, size=(n, n))


def simulated_loss(phase: np.ndarray, target: Psf, config: OpticsConfig) -> float:
    """Amplitude loss of a phase against a target (convenience for comparisons)."""
    fwd = _Forward(config)
    intensity, _, _ = _normalized(fwd.field(fwd.source(np.asarray(phase, dtype=np.float64))))
    return amplitude_loss(intensity, _target(target, config))


def gerchberg_saxton(target: Psf, config: OpticsConfig, iters: int = 200, seed: int = 0,
                     init_phase: Optional[np.ndarray] = None, fab: Optional[FabModel] = None,
                     return_history: bool = False):
    """Alternating projections between the mask and sensor planes.

    Each iteration propagates forward, keeps the sensor phase but imposes the
    target amplitude, propagates back and re-imposes the unit source amplitude
    inside the aperture. The loss is not guaranteed to decrease monotonically.
    """
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    t = _target(target, config)
    fwd = _Forward(config)
    amp_t = np.sqrt(t)
    phase = _initial_phase(config, seed) if init_phase is None else np.asarray(init_phase, np.float64)
    history = []
    for _ in range(iters):
        u = fwd.field(fwd.source(phase))
        energy = np.sum(np.abs(u) ** 2)
        history.append(amplitude_loss(np.abs(u) ** 2 / energy, t))
        u = amp_t * np.sqrt(energy) * np.exp(1j * np.angle(u))
        phase = np.angle(fwd.adjoint(u))
    phase = fabricate(phase, fab) if fab else wrap_phase(phase)
    mask = PhaseMask(phase, config, levels=fab.levels if fab else 0)
    return (mask, history) if return_history else mask


def phase_gradient(phase: np.ndarray, t: np.ndarray, fwd: _Forward):
    """Loss and dL/dphase via the Wirtinger chain rule.

    With ``a = |u|^2``, ``S = sum(a)``, ``I = a / S`` and
    ``g = dL/dI = (sqrt(I + eps) - sqrt(T)) / sqrt(I + eps)``::

        dL/da      = (g - sum(g * I)) / S
        dL/d conj(u) = dL/da * u
        dL/d conj(v) = A^H (dL/d conj(u))        # conjugate transfer
        dL/dphase  = 2 * Re(conj(dL/d conj(v)) * i * v)
    """
    v = fwd.source(phase)
    u = fwd.field(v)
    intensity, _, s = _normalized(u)
    root = np.sqrt(intensity + EPS)
    loss = float(np.sum((root - np.sqrt(t)) ** 2))
    g = (root - np.sqrt(t)) / root
    dl_da = (g - np.sum(g * intensity)) / s
    dl_dv = fwd.adjoint(dl_da * u)
    grad = 2.0 * np.real(np.conj(dl_dv) * 1j * v)
    return loss, grad


def retrieve_phase_sgd(target: Psf, config: OpticsConfig, iters: int = 500,
                       lr: Optional[float] = None, fab: Optional[FabModel] = None,
                       seed: int = 0, init_phase: Optional[np.ndarray] = None,
                       momentum: float = 0.9, max_step: float = np.pi / 2):
    """Gradient descent on the mask phase with lr halving on loss increase.

    Every iteration proposes ``phase - lr * (momentum * v + grad)``. The step
    is accepted only if it does not raise the loss; otherwise it is dropped,
    ``lr`` is halved and the velocity is cleared. ``loss_history`` holds the
    loss of the current iterate after each iteration and therefore never
    increases. When ``lr`` is None it starts at the value whose first step
    moves the steepest pixel by ``max_step`` radians.

    With ``fab`` the loss is evaluated on the fabricated phase while the
    gradient passes straight through the fabrication step.

    Returns ``(PhaseMask, loss_history)``.
    """
    t = _target(target, config)
    fwd = _Forward(config)
    phase = _initial_phase(config, seed) if init_phase is None else np.asarray(init_phase, np.float64)
    project = (lambda p: fabricate(p, fab).astype(np.float64)) if fab else (lambda p: p)
    history: list[float] = []
    if iters > 0:
        loss, grad = phase_gradient(project(phase), t, fwd)
        initial = loss
        if lr is None:
            gmax = np.abs(grad).max()
            lr = max_step / gmax if gmax > 0 else 1.0
        velocity = np.zeros_like(phase)
        for it in range(iters):
            step = momentum * velocity + grad
            trial = phase - lr * step
            trial_loss, trial_grad = phase_gradient(project(trial), t, fwd)
            if trial_loss > 1e6 * initial:
                raise DivergenceError(f"loss {trial_loss:g} exceeded 1e6 x initial at iteration {it}",
                                      history + [trial_loss])
            if trial_loss <= loss:
                phase, loss, grad, velocity = trial, trial_loss, trial_grad, step
            else:
                # also taken for NaN losses
                lr *= 0.5
                velocity[:] = 0.0
            history.append(loss)
        log.debug("retrieval finished: loss %.4g, lr %.3g", loss, lr)
    out = fabricate(phase, fab) if fab else wrap_phase(phase)
    return PhaseMask(out, config, levels=fab.levels if fab else 0), history


DEFAULT_SPOTS = ((24, 30), (32, 40), (40, 26), (28, 38), (36, 34))


def spot_target(n: int = 64, centers=DEFAULT_SPOTS, sigma: float = 1.5) -> Psf:
    """Sum of Gaussian spots, normalized; ``sigma`` in pixels.

    Spots much narrower than the diffraction limit of the mask cannot be
    formed by any phase, so keep ``sigma`` around a pixel or more.
    """
    y, x = np.mgrid[0:n, 0:n]
    t = np.zeros((n, n))
    for cy, cx in centers:
        t += np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * sigma ** 2))
    return Psf.from_intensity(t)
