"""Grayscale image handling: file I/O, preprocessing, and synthetic speckle data.

Images are value-normalized grids of intensities in [0, 1]. The preprocessing
chain (normalize at load, center crop, bilinear resize to 224x224) matches the
pipeline the classifier expects; the synthetic generator produces three-class
speckle datasets whose classes differ in second-order texture statistics.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ImageFormatError, ManifestError

CLASS_NAMES = ("full_thickness", "partial_thickness", "unburnt")

MODEL_INPUT_SIZE = 224
DEFAULT_CROP_WIDTH = 800
DEFAULT_CROP_HEIGHT = 1000


@dataclass(frozen=True)
class GrayImage:
    """Immutable 2-D grid of intensities, each in [0, 1].

    ``data`` is a read-only float64 array of shape (height, width).
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"image data must be 2-D, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("image must contain at least one pixel")
        if not np.isfinite(arr).all():
            raise ValueError("image intensities must be finite")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"intensities outside [0, 1]: min={lo}, max={hi}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered list of (path, label, split) rows; paths resolved to absolute."""

    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ManifestError("manifest paths are not unique")
        for e in self.entries:
            if e.label not in CLASS_NAMES:
                raise ManifestError(f"unknown label {e.label!r}")
            if e.split not in ("train", "val", "test"):
                raise ManifestError(f"unknown split {e.split!r}")
        train_labels = {e.label for e in self.entries if e.split == "train"}
        if train_labels != set(CLASS_NAMES):
            missing = sorted(set(CLASS_NAMES) - train_labels)
            raise ManifestError(f"train split is missing labels: {missing}")

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def split_indices(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == split]


@dataclass(frozen=True)
class ClassParams:
    """Per-class speckle texture knobs."""

    speckle_scale: float = 1.0
    smoothing_radius: float = 1.0
    mean_level: float = 0.45


# Defaults keep the class mean levels identical so the classes are separable
# by texture statistics, not by brightness.
DEFAULT_CLASS_PARAMS = {
    "full_thickness": ClassParams(speckle_scale=1.0, smoothing_radius=1.0, mean_level=0.45),
    "partial_thickness": ClassParams(speckle_scale=1.0, smoothing_radius=2.2, mean_level=0.45),
    "unburnt": ClassParams(speckle_scale=1.0, smoothing_radius=4.0, mean_level=0.45),
}


@dataclass(frozen=True)
class SynthConfig:
    per_class_count: int = 300
    image_size: int = 224
    seed: int = 0
    class_params: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_PARAMS))
    # Split fractions; the test split takes whatever the other two leave.
    train_fraction: float = 2.0 / 3.0
    val_fraction: float = 0.0

    def __post_init__(self):
        if self.per_class_count < 1:
            raise ValueError("per_class_count must be >= 1")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if set(self.class_params) != set(CLASS_NAMES):
            raise ValueError(f"class_params must cover exactly {CLASS_NAMES}")
        if not (0.0 < self.train_fraction <= 1.0):
            raise ValueError("train_fraction must be in (0, 1]")
        if self.val_fraction < 0.0 or self.train_fraction + self.val_fraction > 1.0:
            raise ValueError("train_fraction + val_fraction must not exceed 1")


def load_image(path: str) -> GrayImage:
    """Load an 8- or 16-bit grayscale PNG or PGM, mapping values to [0, 1]."""
    if not os.path.isfile(path):
        raise ImageFormatError(f"no such image file: {path}")
    if path.lower().endswith(".pgm"):
        return _load_pgm(path)
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ImageFormatError(f"unreadable image file {path}: {exc}") from exc
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.float64) / 255.0
    elif img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64)
        if arr.max(initial=0.0) > 65535:
            raise ImageFormatError(f"{path}: integer image exceeds 16-bit range")
        arr = arr / 65535.0
    else:
        raise ImageFormatError(
            f"{path}: unsupported color format {img.mode!r}; expected 8- or 16-bit grayscale"
        )
    return GrayImage(arr)


def _load_pgm(path: str) -> GrayImage:
    """Parse binary (P5) or ASCII (P2) PGM; intensities divided by the file maxval."""
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, blob = _pgm_token(blob)
        if magic not in (b"P2", b"P5"):
            raise ImageFormatError(f"{path}: not a PGM file (magic {magic!r})")
        width_tok, blob = _pgm_token(blob)
        height_tok, blob = _pgm_token(blob)
        maxval_tok, blob = _pgm_token(blob)
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"{path}: malformed PGM header") from exc
    if not (0 < maxval < 65536):
        raise ImageFormatError(f"{path}: PGM maxval {maxval} out of range")
    n = width * height
    if magic == b"P5":
        data = blob[1:]  # single whitespace byte after maxval
        if maxval < 256:
            raw = np.frombuffer(data[:n], dtype=np.uint8)
        else:
            raw = np.frombuffer(data[: 2 * n], dtype=">u2")
        if raw.size != n:
            raise ImageFormatError(f"{path}: PGM pixel payload truncated")
    else:
        values = blob.split()
        if len(values) < n:
            raise ImageFormatError(f"{path}: PGM pixel payload truncated")
        raw = np.array([int(v) for v in values[:n]], dtype=np.uint32)
    if raw.max(initial=0) > maxval:
        raise ImageFormatError(f"{path}: PGM pixel exceeds declared maxval {maxval}")
    arr = raw.astype(np.float64).reshape(height, width) / float(maxval)
    return GrayImage(arr)


def _pgm_token(blob: bytes) -> tuple[bytes, bytes]:
    """Pop one whitespace-delimited token, skipping '#' comment lines."""
    i = 0
    while True:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        else:
            break
    j = i
    while j < len(blob) and not blob[j : j + 1].isspace():
        j += 1
    if i == j:
        raise ImageFormatError("unexpected end of PGM header")
    return blob[i:j], blob[j:]


def save_image_png(img: GrayImage, path: str) -> None:
    """Write an 8-bit grayscale PNG (values rounded to 0..255)."""
    arr = np.rint(img.data * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_labels_png(labels: np.ndarray, path: str) -> None:
    """Write a label grid as a 16-bit grayscale PNG (one label id per pixel)."""
    arr = np.asarray(labels)
    if arr.max(initial=0) > 65535:
        raise ValueError("more than 65536 labels cannot be stored in a 16-bit PNG")
    Image.fromarray(arr.astype(np.uint16)).save(path)


def center_crop(img: GrayImage, target_width: int, target_height: int) -> GrayImage:
    """Centered window; an odd margin leaves the extra pixel on the right/bottom."""
    if target_width < 1 or target_height < 1:
        raise ValueError("crop target must be at least 1x1")
    if target_width > img.width or target_height > img.height:
        raise ValueError(
            f"crop target {target_width}x{target_height} exceeds "
            f"source {img.width}x{img.height}"
        )
    top = (img.height - target_height) // 2
    left = (img.width - target_width) // 2
    return GrayImage(img.data[top : top + target_height, left : left + target_width])


def resize_bilinear(img: GrayImage, target_width: int, target_height: int) -> GrayImage:
    """Bilinear resample with corner-aligned sample positions."""
    if target_width < 1 or target_height < 1:
        raise ValueError("resize target must be at least 1x1")
    ys = _corner_aligned_positions(img.height, target_height)
    xs = _corner_aligned_positions(img.width, target_width)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.minimum(y0, img.height - 1)
    x0 = np.minimum(x0, img.width - 1)
    y1 = np.minimum(y0 + 1, img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    d = img.data
    top = d[np.ix_(y0, x0)] * (1 - wx) + d[np.ix_(y0, x1)] * wx
    bot = d[np.ix_(y1, x0)] * (1 - wx) + d[np.ix_(y1, x1)] * wx
    out = top * (1 - wy) + bot * wy
    return GrayImage(np.clip(out, 0.0, 1.0))


def _corner_aligned_positions(source: int, target: int) -> np.ndarray:
    if target == 1:
        return np.array([(source - 1) / 2.0])
    return np.arange(target, dtype=np.float64) * (source - 1) / (target - 1)


def preprocess(
    img: GrayImage,
    crop_width: int = DEFAULT_CROP_WIDTH,
    crop_height: int = DEFAULT_CROP_HEIGHT,
    output_size: int = MODEL_INPUT_SIZE,
) -> GrayImage:
    """Center crop (clamped to the source size) then resize to the model input size."""
    if img.width < output_size or img.height < output_size:
        raise ValueError(
            f"input {img.width}x{img.height} is smaller than the "
            f"{output_size}x{output_size} model input"
        )
    cropped = center_crop(img, min(img.width, crop_width), min(img.height, crop_height))
    return resize_bilinear(cropped, output_size, output_size)


def gaussian_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; sigma <= 0 is a no-op."""
    if sigma <= 0:
        return np.array(data, dtype=np.float64)
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = np.asarray(data, dtype=np.float64)
    for axis in (0, 1):
        moved = np.moveaxis(out, axis, 0)
        padded = _pad_reflect(moved, radius)
        stacked = np.stack(
            [padded[i : i + moved.shape[0]] for i in range(2 * radius + 1)], axis=0
        )
        moved = np.tensordot(kernel, stacked, axes=(0, 0))
        out = np.moveaxis(moved, 0, axis)
    return out


def _pad_reflect(arr: np.ndarray, radius: int) -> np.ndarray:
    """Reflect padding along axis 0; works even when radius exceeds the length."""
    idx = np.arange(-radius, arr.shape[0] + radius)
    period = max(2 * (arr.shape[0] - 1), 1)
    idx = np.abs(np.mod(idx, period))
    idx = np.where(idx >= arr.shape[0], period - idx, idx)
    return arr[idx]


def synth_image(cfg: SynthConfig, label: str, index: int) -> GrayImage:
    """One multiplicative-speckle image, a pure function of (cfg, label, index)."""
    params = cfg.class_params[label]
    class_idx = CLASS_NAMES.index(label)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, class_idx, index]))
    noise = rng.standard_exponential((cfg.image_size, cfg.image_size))
    smoothed = gaussian_blur(noise, params.smoothing_radius)
    values = params.mean_level * (1.0 + params.speckle_scale * (smoothed - 1.0))
    return GrayImage(np.clip(values, 0.0, 1.0))


def generate_synthetic_dataset(cfg: SynthConfig, out_dir: str) -> DatasetManifest:
    """Write per-class speckle PNGs plus ``manifest.csv``; returns the manifest.

    Deterministic for a fixed config: rerunning produces byte-identical files.
    """
    os.makedirs(out_dir, exist_ok=True)
    n = cfg.per_class_count
    n_train = int(math.floor(n * cfg.train_fraction))
    n_val = int(math.floor(n * cfg.val_fraction))
    n_train = max(1, n_train)  # every class must reach the train split
    entries = []
    for label in CLASS_NAMES:
        class_dir = os.path.join(out_dir, label)
        os.makedirs(class_dir, exist_ok=True)
        for i in range(n):
            img = synth_image(cfg, label, i)
            rel = os.path.join(label, f"{label}_{i:05d}.png")
            save_image_png(img, os.path.join(out_dir, rel))
            split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            entries.append(ManifestEntry(path=rel, label=label, split=split))
    manifest_path = os.path.join(out_dir, "manifest.csv")
    save_manifest(entries, manifest_path)
    return load_manifest(manifest_path)


def save_manifest(entries, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        for e in entries:
            writer.writerow([e.path, e.label, e.split])


def load_manifest(path: str) -> DatasetManifest:
    """Read a ``path,label,split`` CSV; relative paths resolve against the CSV."""
    if not os.path.isfile(path):
        raise ManifestError(f"no such manifest: {path}")
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise ManifestError(f"{path}: expected header path,label,split, got {header}")
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}: malformed row {row}")
            p = row[0] if os.path.isabs(row[0]) else os.path.join(base, row[0])
            entries.append(ManifestEntry(path=p, label=row[1], split=row[2]))
    if not entries:
        raise ManifestError(f"{path}: manifest has no rows")
    return DatasetManifest(entries=tuple(entries))
