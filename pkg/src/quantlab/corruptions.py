"""Deterministic input corruptions at five severity levels.

Each corruption maps a (C, H, W) image with values in [0, 1] to another such
image; everything random inside (noise draws, blur angle, gain jitter, the
sign of a brightness shift) comes from a generator seeded by
(corruption seed, sample index), so a corrupted dataset is a pure function of
(kind, severity, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .nn import Dataset
from .tensor import Tensor

WHITE_NOISE = "white_noise"
MOTION_BLUR = "motion_blur"
PIXELATE = "pixelate"
COLOR_SHIFT = "color_shift"
BRIGHTNESS = "brightness"
CONTRAST = "contrast"
QUANTIZE_IMAGE = "quantize_image"
COMBINATION = "combination"

ATOMIC_KINDS = (
    WHITE_NOISE,
    MOTION_BLUR,
    PIXELATE,
    COLOR_SHIFT,
    BRIGHTNESS,
    CONTRAST,
    QUANTIZE_IMAGE,
)
CORRUPTION_KINDS = ATOMIC_KINDS + (COMBINATION,)

# Severity tables, index 0 = severity 1.
_NOISE_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
_BLUR_LENGTH = (3, 5, 7, 9, 11)
_PIXELATE_FACTOR = (2, 3, 4, 6, 8)
_COLOR_JITTER = (0.02, 0.04, 0.08, 0.12, 0.18)
_BRIGHTNESS_OFFSET = (0.08, 0.15, 0.22, 0.29, 0.36)
_CONTRAST_GAIN = (0.8, 0.66, 0.54, 0.45, 0.38)
_QUANTIZE_LEVELS = (64, 32, 16, 8, 6)


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int
    seed: int
    parts: tuple["Corruption", ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


def make_corruption(kind: str, severity: int, seed: int = 0) -> Corruption:
    """Build a corruption; a combination picks 2-3 distinct atomic parts."""
    if kind != COMBINATION:
        return Corruption(kind, severity, seed)
    rng = np.random.default_rng([seed, 0xC0])
    count = int(rng.integers(2, 4))
    picks = rng.choice(len(ATOMIC_KINDS), size=count, replace=False)
    parts = tuple(Corruption(ATOMIC_KINDS[int(i)], severity, seed) for i in picks)
    return Corruption(COMBINATION, severity, seed, parts)


def _blur_kernel(length: int, angle: float) -> np.ndarray:
    k = np.zeros((length, length))
    c = (length - 1) / 2
    for t in np.linspace(-c, c, length):
        i = int(round(c + t * np.sin(angle)))
        j = int(round(c + t * np.cos(angle)))
        k[i, j] += 1.0
    return k / k.sum()


def _pixelate(img: np.ndarray, f: int) -> np.ndarray:
    c, h, w = img.shape
    ph, pw = (-h) % f, (-w) % f
    padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    hb, wb = padded.shape[1] // f, padded.shape[2] // f
    blocks = padded.reshape(c, hb, f, wb, f).mean(axis=(2, 4))
    return np.repeat(np.repeat(blocks, f, axis=1), f, axis=2)[:, :h, :w]


def _apply_atomic(img: np.ndarray, corr: Corruption, rng: np.random.Generator) -> np.ndarray:
    i = corr.severity - 1
    if corr.kind == WHITE_NOISE:
        return img + rng.normal(0.0, _NOISE_SIGMA[i], img.shape)
    if corr.kind == MOTION_BLUR:
        angle = float(rng.uniform(0.0, np.pi))  # drawn before using the length
        k = _blur_kernel(_BLUR_LENGTH[i], angle)
        return np.stack([ndimage.convolve(ch, k, mode="nearest") for ch in img])
    if corr.kind == PIXELATE:
        return _pixelate(img, _PIXELATE_FACTOR[i])
    if corr.kind == COLOR_SHIFT:
        jit = _COLOR_JITTER[i]
        gains = rng.uniform(1.0 - jit, 1.0 + jit, size=(img.shape[0], 1, 1))
        return img * gains
    if corr.kind == BRIGHTNESS:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return img + sign * _BRIGHTNESS_OFFSET[i]
    if corr.kind == CONTRAST:
        return 0.5 + _CONTRAST_GAIN[i] * (img - 0.5)
    if corr.kind == QUANTIZE_IMAGE:
        levels = _QUANTIZE_LEVELS[i]
        return np.rint(img * (levels - 1)) / (levels - 1)
    raise ValueError(f"not an atomic corruption: {corr.kind}")


def apply_corruption(x: Tensor, corr: Corruption, sample_index: int = 0) -> Tensor:
    """Corrupt one image; deterministic in (corruption, sample_index)."""
    if x.ndim != 3:
        raise ValueError(f"corruptions expect a (C, H, W) image, got shape {x.shape}")
    rng = np.random.default_rng([corr.seed, sample_index])
    img = x.array()
    parts = corr.parts if corr.kind == COMBINATION else (corr,)
    for part in parts:
        img = np.clip(_apply_atomic(img, part, rng), 0.0, 1.0)
    return Tensor.from_array(img)


def sample_corruption(rng_seed: int) -> Corruption:
    """Draw a corruption uniformly over all kinds and severities 1-5."""
    rng = np.random.default_rng([rng_seed, 0x5C])
    kind = CORRUPTION_KINDS[int(rng.integers(len(CORRUPTION_KINDS)))]
    severity = int(rng.integers(1, 6))
    return make_corruption(kind, severity, rng_seed)


def corrupt_dataset(ds: Dataset, corr: Corruption) -> Dataset:
    """Corrupt every sample (labels unchanged), seeding per sample index."""
    samples = tuple(
        apply_corruption(s, corr, i) for i, s in enumerate(ds.samples)
    )
    return Dataset(samples, ds.labels)


def corrupt_dataset_uniform(ds: Dataset, seed: int = 0) -> Dataset:
    """Corrupt each sample with its own uniformly drawn kind and severity."""
    samples = tuple(
        apply_corruption(s, sample_corruption((seed << 20) + i), i)
        for i, s in enumerate(ds.samples)
    )
    return Dataset(samples, ds.labels)
