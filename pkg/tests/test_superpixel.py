import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from augopt.errors import DataError, EmptyMaskError
from augopt.superpixel import (SegmentationConfig, Superpixel, SuperpixelLabeling, canonical_labels,
                               filter_pseudo_anatomies, grid_edges, segment, superpixel_entropy, _smooth)
from augopt.synthetic import blob_mask, two_region


def oracle_felzenszwalb(image, cfg):
    """Independent re-implementation: dict-based forest, recursive find, explicit thresholds."""
    h, w = image.shape
    smoothed = _smooth(image, cfg.smoothing_sigma) * 255.0
    edges = []
    for y in range(h):
        for x in range(w):
            p = y * w + x
            if x + 1 < w:
                edges.append((abs(smoothed[y, x] - smoothed[y, x + 1]), p, p + 1))
            if y + 1 < h:
                edges.append((abs(smoothed[y, x] - smoothed[y + 1, x]), p, p + w))
    edges.sort()
    parent = {p: p for p in range(h * w)}
    members = {p: 1 for p in range(h * w)}
    thresh = {p: cfg.scale for p in range(h * w)}
    internal = {p: 0.0 for p in range(h * w)}

    def root(p):
        return p if parent[p] == p else root(parent[p])

    for wt, a, b in edges:
        ra, rb = root(a), root(b)
        if ra != rb and wt <= thresh[ra] and wt <= thresh[rb]:
            keep, gone = (ra, rb) if members[ra] >= members[rb] else (rb, ra)
            parent[gone] = keep
            members[keep] += members[gone]
            internal[keep] = wt
            thresh[keep] = wt + cfg.scale / members[keep]
    for wt, a, b in edges:
        ra, rb = root(a), root(b)
        if ra != rb and (members[ra] < cfg.min_size or members[rb] < cfg.min_size):
            keep, gone = (ra, rb) if members[ra] >= members[rb] else (rb, ra)
            parent[gone] = keep
            members[keep] += members[gone]
            internal[keep] = max(internal[keep], internal[gone], wt)
            thresh[keep] = internal[keep] + cfg.scale / members[keep]
    roots = np.array([root(p) for p in range(h * w)]).reshape(h, w)
    return canonical_labels(roots)


def test_constant_image_single_superpixel():
    lab = segment(np.full((10, 12), 0.4))
    assert len(lab.superpixels) == 1
    assert lab.superpixels[0].pixel_count == 120


def test_two_region_matches_connected_components():
    img = two_region(8)
    lab = segment(img, SegmentationConfig(scale=1.0, min_size=1, smoothing_sigma=0.0))
    comps, n = ndimage.label(img > 0.5)
    oracle = np.where(img > 0.5, 1, 0)
    assert len(lab.superpixels) == 2
    assert np.array_equal(lab.labels, oracle)


def test_blob_image_matches_independent_union_find():
    rng = np.random.default_rng(4)
    img = 0.2 + 0.6 * blob_mask(16, (6.0, 9.0), 4.0) + 0.05 * rng.random((16, 16))
    img = np.clip(img, 0, 1)
    for cfg in [SegmentationConfig(), SegmentationConfig(scale=30, min_size=5, smoothing_sigma=0.5)]:
        assert np.array_equal(segment(img, cfg).labels, oracle_felzenszwalb(img, cfg))


@given(st.integers(0, 10_000), st.floats(5, 300), st.integers(1, 20))
def test_partition_and_oracle_agreement(seed, scale, min_size):
    img = np.random.default_rng(seed).random((9, 11))
    cfg = SegmentationConfig(scale=scale, min_size=min_size)
    lab = segment(img, cfg)
    assert sum(sp.pixel_count for sp in lab.superpixels) == img.size
    for sp in lab.superpixels:
        assert lab.mask(sp.label).sum() == sp.pixel_count
    assert np.array_equal(lab.labels, oracle_felzenszwalb(img, cfg))


def test_edges_sorted_lexicographically():
    img = np.array([[0.0, 0.0], [0.0, 0.0]])
    src, dst, wt = grid_edges(img)
    keys = list(zip(wt, src, dst))
    assert keys == sorted(keys)


def test_deterministic(rng):
    img = rng.random((20, 20))
    assert np.array_equal(segment(img).labels, segment(img).labels)


def oracle_entropy(values, bins):
    counts = {}
    for v in values:
        k = min(int(v * bins), bins - 1)
        counts[k] = counts.get(k, 0) + 1
    n = len(values)
    return -sum(c / n * np.log2(c / n) for c in counts.values())


def test_entropy_constant_is_zero():
    assert superpixel_entropy(np.full((4, 4), 0.3), np.ones((4, 4))) == 0.0


def test_entropy_uniform_256_bins_is_8_bits():
    img = ((np.arange(256) + 0.5) / 256).reshape(16, 16)
    assert superpixel_entropy(img, np.ones((16, 16))) == pytest.approx(8.0, abs=1e-12)


def test_entropy_matches_histogram_oracle(rng):
    img = rng.random((20, 20))
    mask = np.zeros((20, 20))
    mask.flat[rng.choice(400, 100, replace=False)] = 1
    assert abs(superpixel_entropy(img, mask) - oracle_entropy(img[mask > 0], 256)) < 1e-12


def test_entropy_empty_mask():
    with pytest.raises(EmptyMaskError):
        superpixel_entropy(np.zeros((3, 3)), np.zeros((3, 3)))


def _labeling(entropies):
    labels = np.repeat(np.arange(len(entropies)), 4).reshape(len(entropies), 4)
    sps = [Superpixel(i, 4, e) for i, e in enumerate(entropies)]
    return SuperpixelLabeling("x", labels, sps)


def test_filter_threshold_three():
    kept = filter_pseudo_anatomies(_labeling([0.5, 3.2, 7.1]), SegmentationConfig(entropy_threshold=3.0))
    assert [a.superpixel_id for a in kept] == [1, 2]


def test_filter_threshold_zero_keeps_all():
    kept = filter_pseudo_anatomies(_labeling([0.0, 0.5, 7.1]), SegmentationConfig(entropy_threshold=0.0))
    assert len(kept) == 3


def test_filter_empty_pool_warns(caplog):
    kept = filter_pseudo_anatomies(_labeling([0.5]), SegmentationConfig())
    assert kept == [] and "entropy" in caplog.text


@given(st.lists(st.floats(0, 8), min_size=1, max_size=8), st.floats(0, 8), st.floats(0, 8))
def test_filter_monotone(entropies, t1, t2):
    lo, hi = sorted((t1, t2))
    lab = _labeling(entropies)
    ids_lo = {a.superpixel_id for a in filter_pseudo_anatomies(lab, SegmentationConfig(entropy_threshold=lo))}
    ids_hi = {a.superpixel_id for a in filter_pseudo_anatomies(lab, SegmentationConfig(entropy_threshold=hi))}
    assert ids_hi <= ids_lo


def test_constant_background_excluded():
    rng = np.random.default_rng(2)
    img = np.full((32, 32), 0.1)
    img[8:24, 8:24] = 0.3 + 0.6 * rng.random((16, 16))
    lab = segment(img)
    background = lab.labels[0, 0]
    bg = next(sp for sp in lab.superpixels if sp.label == background)
    assert bg.entropy == 0.0
    kept = filter_pseudo_anatomies(lab, SegmentationConfig())
    assert kept and background not in {a.superpixel_id for a in kept}


def test_config_validation():
    with pytest.raises(DataError):
        SegmentationConfig(scale=0)
    with pytest.raises(DataError):
        SegmentationConfig(min_size=0)
    with pytest.raises(DataError):
        SegmentationConfig(entropy_threshold=-1)
