"""CIFAR-10 binary batches, a synthetic stand-in, and augmentation.

A record is one label byte followed by 3072 pixel bytes (1024 red, 1024
green, 1024 blue, each row-major 32x32). Files: ``data_batch_1.bin`` ..
``data_batch_5.bin`` and ``test_batch.bin``, optionally inside a
``cifar-10-batches-bin`` subdirectory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

log = logging.getLogger(__name__)

RECORD = 1 + 3 * 32 * 32
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
SYNTHETIC_MARKER = "SYNTHETIC"


@dataclass
class Cifar10Set:
    images: np.ndarray  # float32 [N, 3, 32, 32] in [0, 1]
    labels: np.ndarray  # int64 [N]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != (3, 32, 32):
            raise FormatError(f"images must be [N,3,32,32], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise FormatError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        """First ``n`` records (all of them when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        return Cifar10Set(self.images[:n], self.labels[:n])


def parse_records(buf: bytes, source: str = "<bytes>") -> Cifar10Set:
    if len(buf) % RECORD:
        n = len(buf) // RECORD
        raise FormatError(f"{source}: truncated record {n} at byte {n * RECORD} "
                          f"({len(buf) - n * RECORD} of {RECORD} bytes present)")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{source}: label {labels[bad]} out of range at byte {bad * RECORD}")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return Cifar10Set(images, labels)


def read_batch_file(path) -> Cifar10Set:
    path = Path(path)
    return parse_records(path.read_bytes(), str(path))


def _concat(sets):
    return Cifar10Set(np.concatenate([s.images for s in sets]), np.concatenate([s.labels for s in sets]))


def _locate(root: Path) -> Path:
    for d in (root, root / "cifar-10-batches-bin"):
        if (d / TEST_FILE).exists():
            return d
    raise FileNotFoundError(f"no {TEST_FILE} under {root} (expected CIFAR-10 binary batches)")


def load_cifar10(root):
    """Return ``(train, test)`` in file order; train concatenates batches 1-5.

    Missing train batches are skipped (a synthetic set may have fewer).
    """
    d = _locate(Path(root))
    if (d / SYNTHETIC_MARKER).exists():
        log.warning("%s holds SYNTHETIC data, not CIFAR-10", d)
    train = [read_batch_file(d / f) for f in TRAIN_FILES if (d / f).exists()]
    if not train:
        raise FileNotFoundError(f"no data_batch_*.bin files in {d}")
    return _concat(train), read_batch_file(d / TEST_FILE)


def to_records(images, labels) -> bytes:
    """Inverse of :func:`parse_records` for uint8 (or [0,1] float) images."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.floor(images * 255.0 + 0.5), 0, 255).astype(np.uint8)
    out = np.empty((len(labels), RECORD), dtype=np.uint8)
    out[:, 0] = np.asarray(labels, dtype=np.uint8)
    out[:, 1:] = images.reshape(len(labels), -1)
    return out.tobytes()


def write_cifar_dir(root, train_images, train_labels, test_images, test_labels, batches: int = 5,
                    synthetic: bool = False) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    parts = np.array_split(np.arange(len(train_labels)), batches)
    for name, idx in zip(TRAIN_FILES, parts):
        (root / name).write_bytes(to_records(train_images[idx], train_labels[idx]))
    (root / TEST_FILE).write_bytes(to_records(test_images, test_labels))
    if synthetic:
        (root / SYNTHETIC_MARKER).write_text("procedurally generated; not CIFAR-10\n")
    return root


# ----------------------------------------------------------------------------
# synthetic stand-in

def synthetic_images(n: int, rng: np.random.Generator):
    """Ten classes of textured blobs on cluttered backgrounds.

    A class fixes a grating orientation and frequency, a blob aspect ratio
    and a mean colour; position, size, phase, contrast, background and noise
    vary per image and neighbouring classes overlap, so the task is learnable
    but not trivial.
    """
    labels = rng.integers(0, 10, size=n)
    y, x = np.mgrid[0:32, 0:32].astype(np.float32) / 32.0
    hues = rng.uniform(0.2, 0.8, size=(10, 3))
    images = np.empty((n, 3, 32, 32), dtype=np.float32)
    for i, c in enumerate(labels):
        theta = c * np.pi / 5 + rng.normal(0, 0.25)
        freq = (3.0 if c % 2 else 5.0) * rng.uniform(0.8, 1.25)
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.cos(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        r = rng.uniform(0.15, 0.3)
        aspect = 1.0 + 0.6 * (c % 5) / 4
        blob = np.exp(-(((x - cx) * aspect) ** 2 + ((y - cy) / aspect) ** 2) / (2 * r * r))
        color = 0.6 * hues[c] + 0.4 * rng.uniform(0, 1, size=3)
        bg = rng.uniform(0.1, 0.9, size=3)
        clutter = rng.normal(0, 1, size=(3, 8, 8)).repeat(4, axis=1).repeat(4, axis=2)
        contrast = rng.uniform(0.2, 0.45)
        img = bg[:, None, None] + 0.08 * clutter
        img = img * (1 - blob) + blob * (color[:, None, None] + contrast * grating)
        img += rng.normal(0, 0.06, size=img.shape)
        images[i] = np.clip(img, 0, 1)
    return images, labels


def make_synthetic_cifar(root, n_train: int = 5000, n_test: int = 1000, seed: int = 0) -> Path:
    """Write a synthetic set in CIFAR binary layout (marked ``SYNTHETIC``)."""
    rng = np.random.default_rng(seed)
    tr, trl = synthetic_images(n_train, rng)
    te, tel = synthetic_images(n_test, rng)
    return write_cifar_dir(root, tr, trl, te, tel, synthetic=True)


# ----------------------------------------------------------------------------
# augmentation

def random_crop(batch: np.ndarray, rng: np.random.Generator, pad: int = 4):
    """Reflect-pad by ``pad`` and crop back to the original size.

    Returns ``(crops, offsets)``; offsets are ``(dy, dx)`` per image.
    """
    n, _, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out, offsets


def hflip(batch: np.ndarray, rng: np.random.Generator, p: float = 0.5):
    flip = rng.random(len(batch)) < p
    out = batch.copy()
    out[flip] = out[flip, :, :, ::-1]
    return out


def normalize(batch: np.ndarray, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return ((batch - m) / s).astype(np.float32)


def augment_normalize(batch, config=None, rng=None, train: bool = True):
    """Train: random crop from a 4-pixel reflect pad, horizontal flip, normalize.

    Eval (``train=False``) only normalizes. ``config`` supplies ``augment``,
    ``flip_p``, ``mean`` and ``std`` when given (e.g. a ``TrainConfig``).
    """
    augment = getattr(config, "augment", True)
    flip_p = getattr(config, "flip_p", 0.5)
    mean = getattr(config, "mean", CIFAR_MEAN)
    std = getattr(config, "std", CIFAR_STD)
    batch = np.asarray(batch, dtype=np.float32)
    if train and augment:
        rng = np.random.default_rng() if rng is None else rng
        batch, _ = random_crop(batch, rng)
        batch = hflip(batch, rng, flip_p)
    return normalize(batch, mean, std)
