"""Local surrogate explanations for an opaque image classifier.

The explainer sees the classifier only as a callable from image to class
probabilities. It perturbs the image by blanking random subsets of segments,
weights each perturbed sample by proximity to the original, fits a sparse
weighted linear surrogate over the segment on/off bits, and renders the
per-segment scores as a heatmap and overlay. A gradient saliency map is
available as a second, non-model-agnostic view for the builtin backbone.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ExplainError
from .imaging import GrayImage, save_image_png, save_labels_png
from .model import FusionModel, logit_pixel_gradient
from .segmentation import SegmentMap, segment_boundaries, segment_means


@dataclass(frozen=True)
class LimeConfig:
    num_samples: int = 10000
    kernel_width: float = 0.25
    ridge: float = 1.0
    top_k: int = 5
    fill_mode: str = "segment-mean"  # or "constant"
    fill_value: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 10:
            raise ValueError("num_samples must be >= 10")
        if self.kernel_width <= 0:
            raise ValueError("kernel_width must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.fill_mode not in ("segment-mean", "constant"):
            raise ValueError(f"unknown fill mode {self.fill_mode!r}")
        if self.fill_mode == "constant" and not (0.0 <= self.fill_value <= 1.0):
            raise ValueError("constant fill value must be in [0, 1]")


@dataclass(frozen=True)
class Explanation:
    target_class: int
    segment_scores: np.ndarray
    intercept: float
    r2: float
    kernel_weight_range: tuple

    def __post_init__(self):
        scores = np.asarray(self.segment_scores, dtype=np.float64)
        scores = scores.copy()
        scores.flags.writeable = False
        object.__setattr__(self, "segment_scores", scores)


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if (arr < 0).any() or not np.isfinite(arr).all():
            raise ValueError("saliency values must be non-negative and finite")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)


def sample_masks(count: int, num_segments: int, seed: int) -> np.ndarray:
    """count x num_segments binary matrix; the first row is all ones."""
    if num_segments < 1:
        raise ValueError("num_segments must be >= 1")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    masks = rng.integers(0, 2, size=(count, num_segments), dtype=np.int8)
    masks[0, :] = 1
    return masks


def apply_mask(img: GrayImage, segmap: SegmentMap, mask, fill_mode="segment-mean",
               fill_value=0.5) -> GrayImage:
    """Blank out segments where the mask bit is 0; keep the rest untouched."""
    mask = np.asarray(mask)
    if mask.shape != (segmap.count,):
        raise ValueError(f"mask length {mask.shape} != segment count {segmap.count}")
    if fill_mode == "segment-mean":
        fill = segment_means(img, segmap)
    elif fill_mode == "constant":
        fill = np.full(segmap.count, float(fill_value))
    else:
        raise ValueError(f"unknown fill mode {fill_mode!r}")
    return GrayImage(_masked_data(img.data, segmap.labels, mask, fill))


def _masked_data(data, labels, mask, fill_per_segment):
    keep = mask.astype(bool)[labels]
    return np.where(keep, data, fill_per_segment[labels])


def kernel_weight(mask, kernel_width: float) -> float:
    """Proximity weight in (0, 1]: exp(-d^2 / width^2) for cosine distance d.

    For binary masks the cosine distance to the undisturbed all-ones mask is
    1 - sqrt(fraction of ones); the all-zero mask takes the limiting d = 1.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.size == 0:
        raise ValueError("mask must be non-empty")
    fraction = float(mask.mean())
    distance = 1.0 - math.sqrt(fraction)
    return math.exp(-(distance**2) / (kernel_width**2))


def fit_surrogate(masks, predictions, weights, ridge: float, top_k: int,
                  target_class: int = 0) -> Explanation:
    """Weighted ridge fit over mask bits, then top-k selection and refit.

    The intercept is never penalized. Unselected segments score exactly 0; the
    reported r2 is the weighted fit quality of the refit restricted model.
    """
    x = np.asarray(masks, dtype=np.float64)
    y = np.asarray(predictions, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n, num_segments = x.shape
    if y.shape != (n,) or w.shape != (n,):
        raise ValueError("masks, predictions, and weights must have matching lengths")
    if n < num_segments + 1:
        raise ValueError(
            f"need at least {num_segments + 1} samples to fit {num_segments} segments"
        )
    full = _weighted_ridge(x, y, w, ridge)
    coefs = full[1:]
    order = np.argsort(-np.abs(coefs), kind="stable")
    selected = np.sort(order[: min(top_k, num_segments)])
    restricted = _weighted_ridge(x[:, selected], y, w, ridge)
    scores = np.zeros(num_segments)
    scores[selected] = restricted[1:]
    intercept = float(restricted[0])
    fitted = intercept + x[:, selected] @ restricted[1:]
    r2 = _weighted_r2(y, fitted, w)
    return Explanation(
        target_class=target_class,
        segment_scores=scores,
        intercept=intercept,
        r2=r2,
        kernel_weight_range=(float(w.min()), float(w.max())),
    )


def _weighted_ridge(x, y, w, ridge):
    """Solve (Xa' W Xa + ridge*D) beta = Xa' W y with an unpenalized intercept."""
    xa = np.concatenate([np.ones((x.shape[0], 1)), x], axis=1)
    a = xa.T @ (xa * w[:, None])
    a[1:, 1:] += ridge * np.eye(x.shape[1])
    b = xa.T @ (w * y)
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise ExplainError(
            "singular normal equations; use a positive ridge strength"
        ) from exc


def _weighted_r2(y, fitted, w):
    mean = float((w * y).sum() / w.sum())
    ss_tot = float((w * (y - mean) ** 2).sum())
    ss_res = float((w * (y - fitted) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - ss_res / ss_tot


def explain_instance(predict, img: GrayImage, segmap: SegmentMap, cfg: LimeConfig,
                     target_class: int | None = None, workers: int = 1) -> Explanation:
    """Full perturbation-explanation pipeline around one image.

    ``predict`` maps a GrayImage to a probability vector and is never
    inspected, only called. With workers > 1 it must tolerate concurrent
    calls; results are stored by sample index so the fit is identical either
    way.
    """
    if (segmap.height, segmap.width) != (img.height, img.width):
        raise ExplainError("segment map does not match the image dimensions")
    base = np.asarray(predict(img), dtype=np.float64)
    if not np.isfinite(base).all():
        raise ExplainError("non-finite prediction on the unperturbed image")
    if target_class is None:
        target_class = int(np.argmax(base))
    if not (0 <= target_class < base.shape[0]):
        raise ExplainError(f"target class {target_class} out of range")
    masks = sample_masks(cfg.num_samples, segmap.count, cfg.seed)
    if cfg.fill_mode == "segment-mean":
        fill = segment_means(img, segmap)
    else:
        fill = np.full(segmap.count, cfg.fill_value)

    def run(i):
        sample = GrayImage(_masked_data(img.data, segmap.labels, masks[i], fill))
        return float(np.asarray(predict(sample), dtype=np.float64)[target_class])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = np.array(list(pool.map(run, range(cfg.num_samples))))
    else:
        preds = np.array([run(i) for i in range(cfg.num_samples)])
    bad = np.flatnonzero(~np.isfinite(preds))
    if bad.size:
        raise ExplainError(f"non-finite prediction at sample {int(bad[0])}")
    weights = np.array([kernel_weight(m, cfg.kernel_width) for m in masks])
    return fit_surrogate(masks, preds, weights, cfg.ridge, cfg.top_k, target_class)


def gradient_saliency(model: FusionModel, img: GrayImage, class_index: int) -> SaliencyMap:
    """Per-pixel absolute gradient of the class logit (builtin backbone only)."""
    if model.backbone.kind != "builtin-pool":
        raise ExplainError(
            "gradient saliency requires the builtin-pool backbone; "
            "feature-file models have no pixel-level path"
        )
    return SaliencyMap(values=np.abs(logit_pixel_gradient(model, img, class_index)))


# ---------------------------------------------------------------------------
# Rendering

_NEGATIVE_COLOR = np.array([33.0, 102.0, 172.0])  # blue
_NEUTRAL_COLOR = np.array([255.0, 255.0, 255.0])
_POSITIVE_COLOR = np.array([178.0, 24.0, 43.0])  # red
_TINT_COLOR = np.array([60.0, 200.0, 60.0])


def render(explanation: Explanation, segmap: SegmentMap, img: GrayImage, top_k: int):
    """Heatmap, top-k overlay, and the scores document.

    The heatmap colormap is symmetric around zero with limits at the largest
    absolute score; all-zero scores yield the neutral color everywhere.
    """
    scores = explanation.segment_scores
    limit = float(np.max(np.abs(scores))) if scores.size else 0.0
    score_img = scores[segmap.labels]
    t = score_img / limit if limit > 0 else np.zeros_like(score_img)
    heatmap = _diverging_colors(t)

    gray = np.repeat(img.data[:, :, None] * 255.0, 3, axis=2)
    positive = [s for s in np.argsort(-scores, kind="stable") if scores[s] > 0][:top_k]
    overlay = gray.copy()
    if positive:
        tint_mask = np.isin(segmap.labels, positive)
        overlay[tint_mask] = 0.55 * gray[tint_mask] + 0.45 * _TINT_COLOR
        outline = segment_boundaries(segmap) & tint_mask
        overlay[outline] = _TINT_COLOR
    order = np.lexsort((np.arange(len(scores)), -scores))
    doc = {
        "target_class": int(explanation.target_class),
        "intercept": float(explanation.intercept),
        "r2": float(explanation.r2),
        "scores": [{"segment": int(s), "score": float(scores[s])} for s in order],
    }
    return heatmap.astype(np.uint8), overlay.astype(np.uint8), doc


def _diverging_colors(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, -1.0, 1.0)[:, :, None]
    cold = _NEUTRAL_COLOR + (-t) * (_NEGATIVE_COLOR - _NEUTRAL_COLOR)
    warm = _NEUTRAL_COLOR + t * (_POSITIVE_COLOR - _NEUTRAL_COLOR)
    return np.rint(np.where(t < 0, cold, warm))


def write_explanation_artifacts(out_dir: str, explanation: Explanation,
                                segmap: SegmentMap, img: GrayImage, top_k: int,
                                saliency: SaliencyMap | None = None) -> dict:
    """Write scores.json, heatmap.png, overlay.png, segments.png to the directory."""
    os.makedirs(out_dir, exist_ok=True)
    heatmap, overlay, doc = render(explanation, segmap, img, top_k)
    from PIL import Image

    Image.fromarray(heatmap, mode="RGB").save(os.path.join(out_dir, "heatmap.png"))
    Image.fromarray(overlay, mode="RGB").save(os.path.join(out_dir, "overlay.png"))
    save_labels_png(segmap.labels, os.path.join(out_dir, "segments.png"))
    if saliency is not None:
        peak = float(saliency.values.max())
        scaled = saliency.values / peak if peak > 0 else saliency.values
        save_image_png(GrayImage(scaled), os.path.join(out_dir, "saliency.png"))
    with open(os.path.join(out_dir, "scores.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return doc
