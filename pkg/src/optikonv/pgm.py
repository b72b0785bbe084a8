"""16-bit binary PGM (P5) files for PSFs and lithography dose maps, and TNSR1
serialization of phase masks."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import ContractError, FormatError
from .optics import TWO_PI, OpticsConfig, PhaseMask, Psf, level_phase

MAXVAL = 65535


def write_pgm16(path, values, comments=()) -> Path:
    """Write integer values in [0, 65535] as a big-endian 16-bit P5 file."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {values.shape}")
    if values.min() < 0 or values.max() > MAXVAL:
        raise ValueError("PGM values must lie in [0, 65535]")
    h, w = values.shape
    header = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n{MAXVAL}\n"
    path = Path(path)
    path.write_bytes(header.encode("ascii") + values.astype(">u2").tobytes())
    return path


def read_pgm16(path):
    """Return ``(values uint16 [H,W], header tokens, comments)``."""
    buf = Path(path).read_bytes()
    tokens, comments = [], []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n|\S+)").match(buf, pos)
        if m is None:
            raise FormatError(f"{path}: incomplete PGM header")
        tok = m.group(1)
        pos = m.end()
        if tok.startswith(b"#"):
            comments.append(tok[1:].strip().decode("ascii", "replace"))
        else:
            tokens.append(tok.decode("ascii"))
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1  # single whitespace byte after maxval
    nbytes = w * h * (2 if maxval > 255 else 1)
    if len(buf) - pos < nbytes:
        raise FormatError(f"{path}: pixel data truncated at byte {len(buf)}, need {pos + nbytes}")
    dtype = ">u2" if maxval > 255 else "u1"
    values = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return values.astype(np.uint16), tokens, comments


def _comment_value(comments, key):
    for c in comments:
        if c.startswith(key + "="):
            return c.split("=", 1)[1]
    return None


# ----------------------------------------------------------------------------
# dose maps

def phase_to_dose(phase) -> np.ndarray:
    x = np.asarray(phase, dtype=np.float64) / TWO_PI * MAXVAL
    return np.floor(x + 0.5).astype(np.uint16)


def export_dose_map(mask: PhaseMask, path) -> Path:
    """Write ``round(phase / 2pi * 65535)`` for a quantized mask."""
    if not mask.levels:
        raise ContractError("dose maps need a quantized mask (levels > 0)")
    return write_pgm16(path, phase_to_dose(mask.phase), comments=[f"levels={mask.levels}"])


def read_dose_map(path, levels=None) -> np.ndarray:
    """Recover the quantized phase written by :func:`export_dose_map`."""
    values, _, comments = read_pgm16(path)
    if levels is None:
        found = _comment_value(comments, "levels")
        if found is None:
            raise FormatError(f"{path}: no levels comment; pass levels explicitly")
        levels = int(found)
    phase = values.astype(np.float64) / MAXVAL * TWO_PI
    idx = np.round(phase / (TWO_PI / levels)).astype(np.int64) % levels
    return level_phase(idx, levels)


# ----------------------------------------------------------------------------
# PSF images

def save_psf_pgm(psf: Psf, path) -> Path:
    """Peak-normalized 16-bit image; the comment records that values are
    renormalized to unit sum on load."""
    a = psf.intensity.astype(np.float64)
    peak = a.max()
    vals = np.zeros(a.shape, np.uint16) if peak <= 0 else np.floor(a / peak * MAXVAL + 0.5)
    return write_pgm16(path, vals, comments=["psf normalized=1", f"peak={peak:.9g}"])


def load_psf_pgm(path) -> Psf:
    values, _, _ = read_pgm16(path)
    return Psf.from_intensity(values.astype(np.float64))


# ----------------------------------------------------------------------------
# phase masks in TNSR1

def save_mask(mask: PhaseMask, path) -> Path:
    c = mask.config
    meta = [c.wavelength, c.distance, c.pitch, mask.levels,
            c.mask_pixels, -1.0 if c.aperture is None else c.aperture, c.padding]
    return checkpoint.save(path, {"phase": mask.phase, "meta": np.array(meta, dtype=np.float64)})


def load_mask(path) -> PhaseMask:
    rec = checkpoint.load(path)
    if "phase" not in rec or "meta" not in rec:
        raise FormatError(f"{path}: mask file needs 'phase' and 'meta' records")
    meta = rec["meta"].astype(np.float64)
    phase = rec["phase"]
    n = phase.shape[0]
    aperture = None
    padding = 2
    if len(meta) >= 7:
        n = int(meta[4])
        aperture = None if meta[5] < 0 else float(meta[5])
        padding = int(meta[6])
    config = OpticsConfig(wavelength=float(meta[0]), distance=float(meta[1]), pitch=float(meta[2]),
                          mask_pixels=n, aperture=aperture, padding=padding)
    levels = int(meta[3])
    if levels:
        # float32 storage keeps phases exact up to rounding; snap back onto levels
        idx = np.round(phase.astype(np.float64) / (TWO_PI / levels)).astype(np.int64) % levels
        phase = level_phase(idx, levels)
    return PhaseMask(phase, config, levels=levels)
