"""Graph-based superpixels and the entropy filter that builds the pseudo-anatomy pool."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, EmptyMaskError
from .imagecore import as_image

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentationConfig:
    scale: float = 100.0
    min_size: int = 20
    smoothing_sigma: float = 0.8
    entropy_threshold: float = 3.0
    entropy_bins: int = 256

    def __post_init__(self):
        if not self.scale > 0:
            raise DataError(f"scale must be > 0, got {self.scale}")
        if self.min_size < 1:
            raise DataError(f"min_size must be >= 1, got {self.min_size}")
        if self.entropy_threshold < 0:
            raise DataError("entropy_threshold must be >= 0")
        if self.smoothing_sigma < 0:
            raise DataError("smoothing_sigma must be >= 0")
        if self.entropy_bins < 1:
            raise DataError("entropy_bins must be >= 1")


@dataclass(frozen=True)
class Superpixel:
    label: int
    pixel_count: int
    entropy: float


@dataclass
class SuperpixelLabeling:
    image_id: str
    labels: np.ndarray
    superpixels: list[Superpixel] = field(default_factory=list)

    def mask(self, label: int) -> np.ndarray:
        return (self.labels == label).astype(np.float64)


@dataclass(frozen=True)
class PseudoAnatomy:
    image_id: str
    superpixel_id: int
    mask: np.ndarray = field(repr=False)


class _Forest:
    """Union-find with union by size and path halving; tracks internal difference."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a: int, b: int, weight: float) -> None:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight


def grid_edges(smoothed: np.ndarray):
    """4-connected edges sorted by (weight, source, target); weights on the 0..255 scale."""
    h, w = smoothed.shape
    idx = np.arange(h * w).reshape(h, w)
    src = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    dst = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    flat = smoothed.ravel() * 255.0
    weight = np.abs(flat[src] - flat[dst])
    order = np.lexsort((dst, src, weight))
    return src[order], dst[order], weight[order]


def _smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return image
    return gaussian_filter(image, sigma=sigma, mode="nearest")


def canonical_labels(roots: np.ndarray) -> np.ndarray:
    """Relabel so labels are 0, 1, ... in raster order of first appearance."""
    _, first, inverse = np.unique(roots.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse].reshape(roots.shape)


def felzenszwalb_labels(image: np.ndarray, cfg: SegmentationConfig) -> np.ndarray:
    h, w = image.shape
    src, dst, weight = grid_edges(_smooth(image, cfg.smoothing_sigma))
    src, dst, weight = src.tolist(), dst.tolist(), weight.tolist()
    forest = _Forest(h * w)
    find, size, internal = forest.find, forest.size, forest.internal
    scale = cfg.scale
    for s, t, wt in zip(src, dst, weight):
        a, b = find(s), find(t)
        if a == b:
            continue
        if wt <= min(internal[a] + scale / size[a], internal[b] + scale / size[b]):
            forest.union(a, b, wt)
    min_size = cfg.min_size
    for s, t, wt in zip(src, dst, weight):
        a, b = find(s), find(t)
        if a != b and (size[a] < min_size or size[b] < min_size):
            # keep the larger internal difference; merging small fragments must not lower it
            forest.union(a, b, max(internal[a], internal[b], wt))
    roots = np.array([find(p) for p in range(h * w)]).reshape(h, w)
    return canonical_labels(roots)


def superpixel_entropy(image, mask, bins: int = 256) -> float:
    """Shannon entropy in bits of the masked intensity histogram (equal-width bins on [0, 1])."""
    image = np.asarray(image, dtype=np.float64)
    sel = np.asarray(mask) > 0.5
    if not sel.any():
        raise EmptyMaskError("entropy of an empty mask")
    values = image[sel]
    index = np.minimum(np.floor(values * bins).astype(np.int64), bins - 1)
    counts = np.bincount(index, minlength=bins)
    p = counts[counts > 0] / values.size
    return float(-np.sum(p * np.log2(p))) + 0.0


def segment(image, cfg: SegmentationConfig = SegmentationConfig(), image_id: str = "") -> SuperpixelLabeling:
    image = as_image(image)
    labels = felzenszwalb_labels(image, cfg)
    counts = np.bincount(labels.ravel())
    records = []
    for label, count in enumerate(counts.tolist()):
        ent = superpixel_entropy(image, labels == label, cfg.entropy_bins)
        records.append(Superpixel(label, int(count), ent))
    return SuperpixelLabeling(image_id, labels, records)


def labeling_from_labels(image, labels: np.ndarray, cfg: SegmentationConfig, image_id: str = "") -> SuperpixelLabeling:
    """Rebuild a labeling (with entropies) from a stored label map."""
    image = as_image(image)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != image.shape:
        raise DataError(f"{image_id}: label map {labels.shape} does not match image {image.shape}")
    records = []
    counts = np.bincount(labels.ravel())
    for label in np.flatnonzero(counts).tolist():
        ent = superpixel_entropy(image, labels == label, cfg.entropy_bins)
        records.append(Superpixel(int(label), int(counts[label]), ent))
    return SuperpixelLabeling(image_id, labels, records)


def filter_pseudo_anatomies(labeling: SuperpixelLabeling, cfg: SegmentationConfig) -> list[PseudoAnatomy]:
    kept = [
        PseudoAnatomy(labeling.image_id, sp.label, labeling.mask(sp.label))
        for sp in labeling.superpixels
        if sp.entropy >= cfg.entropy_threshold
    ]
    if not kept:
        log.warning("image %r: every superpixel fell below entropy %.3g bits",
                    labeling.image_id, cfg.entropy_threshold)
    return kept
