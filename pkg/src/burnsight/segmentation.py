"""Superpixel segmenters: quickshift, graph-based merging, and a fixed grid.

All three return a dense label grid (one region id per pixel, ids 0..count-1
with no gaps). They are deterministic: ties are broken by row-major pixel
index so repeated runs agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import GrayImage, gaussian_blur


@dataclass(frozen=True)
class SegmentMap:
    """Per-pixel region labels forming a gap-free partition."""

    labels: np.ndarray
    count: int

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=np.intp)
        if arr.ndim != 2:
            raise ValueError("label grid must be 2-D")
        if arr.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")
        sizes = np.bincount(arr.ravel(), minlength=self.count)
        if len(sizes) != self.count or (sizes == 0).any():
            raise ValueError("labels must be exactly 0..count-1 with every segment non-empty")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class QuickshiftParams:
    kernel_size: float = 4.0
    max_dist: float = 8.0
    intensity_weight: float = 10.0

    def __post_init__(self):
        if self.kernel_size <= 0:
            raise ValueError("kernel_size must be positive")
        if self.max_dist <= 0:
            raise ValueError("max_dist must be positive")
        if self.intensity_weight < 0:
            raise ValueError("intensity_weight must be non-negative")


@dataclass(frozen=True)
class FelzenszwalbParams:
    scale: float = 100.0  # threshold constant on 255-scaled intensity differences
    sigma: float = 0.8
    min_size: int = 20

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.min_size < 1:
            raise ValueError("min_size must be >= 1")


def _relabel_dense(roots: np.ndarray, shape) -> SegmentMap:
    unique, inverse = np.unique(roots, return_inverse=True)
    return SegmentMap(labels=inverse.reshape(shape), count=len(unique))


def segment_quickshift(img: GrayImage, params: QuickshiftParams = QuickshiftParams()) -> SegmentMap:
    """Mode-seeking segmentation in joint (row, column, weighted-intensity) space.

    Each pixel links to its nearest neighbor (joint distance <= max_dist) with
    strictly higher kernel density, or equal density and a smaller row-major
    index; link-forest roots define the segments.
    """
    data = img.data
    h, w = data.shape
    wi = params.intensity_weight * data
    sigma = params.kernel_size
    inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma)

    density = np.zeros((h, w))
    radius_d = int(math.ceil(3.0 * sigma))
    for dy in range(-radius_d, radius_d + 1):
        for dx in range(-radius_d, radius_d + 1):
            dst_y = slice(max(0, -dy), min(h, h - dy))
            dst_x = slice(max(0, -dx), min(w, w - dx))
            if dst_y.start >= dst_y.stop or dst_x.start >= dst_x.stop:
                continue
            src_y = slice(dst_y.start + dy, dst_y.stop + dy)
            src_x = slice(dst_x.start + dx, dst_x.stop + dx)
            d_int = wi[src_y, src_x] - wi[dst_y, dst_x]
            dist_sq = dy * dy + dx * dx + d_int * d_int
            density[dst_y, dst_x] += np.exp(-dist_sq * inv_two_sigma_sq)

    flat_index = np.arange(h * w, dtype=np.intp).reshape(h, w)
    sentinel = h * w
    best_dist = np.full((h, w), np.inf)
    best_idx = np.full((h, w), sentinel, dtype=np.intp)
    max_dist_sq = params.max_dist * params.max_dist
    radius_p = int(math.floor(params.max_dist))
    for dy in range(-radius_p, radius_p + 1):
        for dx in range(-radius_p, radius_p + 1):
            if dy == 0 and dx == 0:
                continue
            if dy * dy + dx * dx > max_dist_sq:
                continue
            dst_y = slice(max(0, -dy), min(h, h - dy))
            dst_x = slice(max(0, -dx), min(w, w - dx))
            if dst_y.start >= dst_y.stop or dst_x.start >= dst_x.stop:
                continue
            src_y = slice(dst_y.start + dy, dst_y.stop + dy)
            src_x = slice(dst_x.start + dx, dst_x.stop + dx)
            d_int = wi[src_y, src_x] - wi[dst_y, dst_x]
            dist_sq = dy * dy + dx * dx + d_int * d_int
            src_idx = flat_index[src_y, src_x]
            dst_idx = flat_index[dst_y, dst_x]
            src_dens = density[src_y, src_x]
            dst_dens = density[dst_y, dst_x]
            candidate = (dist_sq <= max_dist_sq) & (
                (src_dens > dst_dens) | ((src_dens == dst_dens) & (src_idx < dst_idx))
            )
            bd = best_dist[dst_y, dst_x]
            bi = best_idx[dst_y, dst_x]
            better = candidate & (
                (dist_sq < bd) | ((dist_sq == bd) & (src_idx < bi))
            )
            best_dist[dst_y, dst_x] = np.where(better, dist_sq, bd)
            best_idx[dst_y, dst_x] = np.where(better, src_idx, bi)

    parent = best_idx.ravel()
    own = np.arange(h * w, dtype=np.intp)
    parent = np.where(parent == sentinel, own, parent)
    # Pointer jumping: links always point to (higher density, smaller index),
    # so the forest is acyclic and this converges.
    while True:
        grand = parent[parent]
        if np.array_equal(grand, parent):
            break
        parent = grand
    return _relabel_dense(parent, (h, w))


def segment_felzenszwalb(
    img: GrayImage, params: FelzenszwalbParams = FelzenszwalbParams()
) -> SegmentMap:
    """Greedy graph merging on the 8-connected grid.

    Edge weights are absolute intensity differences on a 0..255 scale after
    Gaussian smoothing. Components merge while the joining edge is no heavier
    than each side's internal difference plus scale/size; a final pass folds
    components smaller than min_size into their lightest-edge neighbor.
    """
    data = gaussian_blur(img.data, params.sigma) * 255.0
    h, w = data.shape
    n = h * w
    flat = data.ravel()
    flat_index = np.arange(n, dtype=np.intp).reshape(h, w)

    srcs, dsts, weights = [], [], []
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        src_y = slice(0, h - dy)
        src_x = slice(max(0, -dx), min(w, w - dx))
        dst_y = slice(dy, h)
        dst_x = slice(src_x.start + dx, src_x.stop + dx)
        a = flat_index[src_y, src_x].ravel()
        b = flat_index[dst_y, dst_x].ravel()
        if a.size == 0:
            continue
        srcs.append(a)
        dsts.append(b)
        weights.append(np.abs(flat[a] - flat[b]))
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    wgt = np.concatenate(weights)
    order = np.lexsort((dst, src, wgt))

    parent = np.arange(n, dtype=np.intp)
    size = np.ones(n, dtype=np.intp)
    threshold = np.full(n, params.scale)

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for e in order:
        a = find(src[e])
        b = find(dst[e])
        if a == b:
            continue
        wt = wgt[e]
        if wt <= threshold[a] and wt <= threshold[b]:
            # Keep the smaller root id as the representative for determinism.
            keep, drop = (a, b) if a < b else (b, a)
            parent[drop] = keep
            size[keep] += size[drop]
            threshold[keep] = wt + params.scale / size[keep]

    if params.min_size > 1:
        for e in order:
            a = find(src[e])
            b = find(dst[e])
            if a == b:
                continue
            if size[a] < params.min_size or size[b] < params.min_size:
                keep, drop = (a, b) if a < b else (b, a)
                parent[drop] = keep
                size[keep] += size[drop]

    roots = np.array([find(i) for i in range(n)], dtype=np.intp)
    return _relabel_dense(roots, (h, w))


def segment_grid(img: GrayImage, rows: int, cols: int) -> SegmentMap:
    """rows x cols rectangular tiles; remainder pixels join the last row/column."""
    if rows < 1 or cols < 1:
        raise ValueError("grid must be at least 1x1")
    if rows > img.height or cols > img.width:
        raise ValueError("grid exceeds image dimensions")
    tile_h = img.height // rows
    tile_w = img.width // cols
    ys = np.minimum(np.arange(img.height) // tile_h, rows - 1)
    xs = np.minimum(np.arange(img.width) // tile_w, cols - 1)
    labels = ys[:, None] * cols + xs[None, :]
    return SegmentMap(labels=labels, count=rows * cols)


def segment_means(img: GrayImage, segmap: SegmentMap) -> np.ndarray:
    """Mean intensity of each segment."""
    flat_labels = segmap.labels.ravel()
    sums = np.bincount(flat_labels, weights=img.data.ravel(), minlength=segmap.count)
    sizes = np.bincount(flat_labels, minlength=segmap.count)
    return sums / sizes


def segment_boundaries(segmap: SegmentMap) -> np.ndarray:
    """Boolean mask of pixels bordering a different segment (4-connectivity)."""
    labels = segmap.labels
    mask = np.zeros(labels.shape, dtype=bool)
    mask[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    mask[:, 1:] |= labels[:, :-1] != labels[:, 1:]
    mask[:-1, :] |= labels[:-1, :] != labels[1:, :]
    mask[1:, :] |= labels[:-1, :] != labels[1:, :]
    return mask
