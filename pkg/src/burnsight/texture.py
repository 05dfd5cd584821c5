"""Gray-level co-occurrence matrices and the five texture statistics.

A co-occurrence matrix counts quantized intensity pairs at fixed pixel
offsets; the scalar features derived from it (contrast, homogeneity, angular
second moment, energy, dissimilarity) form the secondary feature vector fed
into the fusion classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import GrayImage

# Unit-distance offsets at 0, 45, 90, and 135 degrees, as (dy, dx).
DEFAULT_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))

# Canonical feature order; subsets always come out in this order.
FEATURE_NAMES = ("contrast", "homogeneity", "asm", "energy", "dissimilarity")


@dataclass(frozen=True)
class GlcmConfig:
    gray_levels: int = 32
    offsets: tuple = DEFAULT_OFFSETS
    symmetric: bool = True

    def __post_init__(self):
        if self.gray_levels < 2:
            raise ValueError("gray_levels must be >= 2")
        if not self.offsets:
            raise ValueError("at least one offset is required")
        if any(dy == 0 and dx == 0 for dy, dx in self.offsets):
            raise ValueError("zero offset is not allowed")


@dataclass(frozen=True)
class Glcm:
    """Normalized co-occurrence matrix: entries sum to 1."""

    gray_levels: int
    p: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.p, dtype=np.float64)
        if arr.shape != (self.gray_levels, self.gray_levels):
            raise ValueError(f"matrix shape {arr.shape} != G x G")
        if (arr < 0).any():
            raise ValueError("co-occurrence entries must be non-negative")
        total = float(arr.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"co-occurrence matrix sums to {total}, expected 1")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "p", arr)


@dataclass(frozen=True)
class GlcmFeatures:
    contrast: float
    homogeneity: float
    asm: float
    energy: float
    dissimilarity: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.contrast, self.homogeneity, self.asm, self.energy, self.dissimilarity]
        )


def quantize(img: GrayImage, gray_levels: int) -> np.ndarray:
    """Map [0, 1] intensities to integer levels 0..G-1 (floor, top clamped)."""
    if gray_levels < 2:
        raise ValueError("gray_levels must be >= 2")
    levels = np.floor(img.data * gray_levels).astype(np.intp)
    return np.minimum(levels, gray_levels - 1)


def compute_glcm(levels: np.ndarray, cfg: GlcmConfig) -> Glcm:
    """Count level pairs over every offset, pooled into one normalized matrix."""
    levels = np.asarray(levels)
    if levels.ndim != 2 or min(levels.shape) < 2:
        raise ValueError("level grid must be 2-D and at least 2x2")
    if levels.max(initial=0) >= cfg.gray_levels:
        raise ValueError("level grid contains values >= gray_levels")
    g = cfg.gray_levels
    counts = np.zeros(g * g, dtype=np.float64)
    h, w = levels.shape
    for dy, dx in cfg.offsets:
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        src = levels[ys, xs]
        if src.size == 0:
            continue
        dst = levels[
            slice(ys.start + dy, ys.stop + dy), slice(xs.start + dx, xs.stop + dx)
        ]
        pair = (src * g + dst).ravel()
        counts += np.bincount(pair, minlength=g * g)
        if cfg.symmetric:
            counts += np.bincount((dst * g + src).ravel(), minlength=g * g)
    total = counts.sum()
    if total == 0:
        raise ValueError("no co-occurring pairs: image smaller than every offset reach")
    return Glcm(gray_levels=g, p=(counts / total).reshape(g, g))


def haralick_features(glcm: Glcm) -> GlcmFeatures:
    """Scalar statistics of a normalized co-occurrence matrix."""
    g = glcm.gray_levels
    i = np.arange(g)[:, None]
    j = np.arange(g)[None, :]
    diff = (i - j).astype(np.float64)
    p = glcm.p
    contrast = float((diff**2 * p).sum())
    dissimilarity = float((np.abs(diff) * p).sum())
    homogeneity = float((p / (1.0 + diff**2)).sum())
    asm = float((p**2).sum())
    return GlcmFeatures(
        contrast=contrast,
        homogeneity=homogeneity,
        asm=asm,
        energy=math.sqrt(asm),
        dissimilarity=dissimilarity,
    )


def parse_selection(text: str) -> tuple[str, ...]:
    """Parse a CLI-style selection ('none', 'all', or comma-separated names)."""
    text = text.strip().lower()
    if text in ("", "none"):
        return ()
    if text == "all":
        return FEATURE_NAMES
    requested = [t.strip() for t in text.split(",") if t.strip()]
    for name in requested:
        if name not in FEATURE_NAMES:
            raise ValueError(f"unknown texture feature {name!r}; choose from {FEATURE_NAMES}")
    return tuple(n for n in FEATURE_NAMES if n in requested)


def select_features(features: GlcmFeatures, selection) -> np.ndarray:
    """Pick a feature subset, always in the canonical order."""
    selection = tuple(selection)
    for name in selection:
        if name not in FEATURE_NAMES:
            raise ValueError(f"unknown texture feature {name!r}")
    values = dict(zip(FEATURE_NAMES, features.as_array()))
    return np.array([values[n] for n in FEATURE_NAMES if n in selection])


def texture_vector(img: GrayImage, cfg: GlcmConfig, selection) -> np.ndarray:
    """Quantize, pool co-occurrences over all offsets, and extract the subset.

    An empty selection yields a zero-length vector (the no-texture baseline).
    """
    selection = tuple(selection)
    if not selection:
        return np.zeros(0)
    levels = quantize(img, cfg.gray_levels)
    features = haralick_features(compute_glcm(levels, cfg))
    return select_features(features, selection)
