"""Masked pooling, cosine similarity, label propagation and the two similarity distributions.

The intra-class distribution compares a pseudo-anatomy's pooled feature with
the pooled features of its propagated matches in other images; the
intra-instance distribution compares it with its own augmented copies.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .augment import MAX_RETRIES, MIN_OVERLAP, AugmentationParams, augment_batch
from .encoder import EncoderSpec, FeatureMap, ReferenceEncoder, downsample_mask, \
    downsample_mask_adjoint, get_encoder
from .errors import DataError, DegenerateAnatomyError, EmptyMaskError, InsufficientTargetsError
from .rng import RngKey

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12


@dataclass(frozen=True)
class Prototype:
    vector: np.ndarray
    occupancy: float
    source: tuple | None = None


@dataclass(frozen=True)
class SimilarityDistribution:
    values: np.ndarray
    kind: str
    anatomy: tuple | None = None
    mean: float = field(init=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.size == 0:
            raise InsufficientTargetsError("similarity distribution is empty")
        if np.any(np.abs(values) > 1.0):
            raise DataError("similarities must lie in [-1, 1]")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mean", float(np.mean(values)))

    def __len__(self):
        return self.values.size


def _feature_mask(fm: FeatureMap, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape == fm.data.shape[1:]:
        return mask
    out = downsample_mask(mask, fm.stride)
    if out.shape != fm.data.shape[1:]:
        raise DataError(f"mask {mask.shape} does not align with feature grid {fm.data.shape[1:]}")
    return out


def masked_average_pool(fm: FeatureMap, mask, source: tuple | None = None) -> Prototype:
    """Channel-wise mean of ``fm`` weighted by ``mask`` (full or feature resolution)."""
    weights = _feature_mask(fm, mask)
    occupancy = float(weights.sum())
    if occupancy <= 0:
        raise EmptyMaskError("mask has zero occupancy at feature resolution")
    vector = np.tensordot(fm.data, weights, axes=([1, 2], [0, 1])) / occupancy
    return Prototype(vector, occupancy, source)


def cosine(a, b, *, return_flag: bool = False):
    """Cosine similarity clipped to [-1, 1]; 0 (flagged) when either norm is below 1e-12."""
    a = a.vector if isinstance(a, Prototype) else np.asarray(a, dtype=np.float64)
    b = b.vector if isinstance(b, Prototype) else np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        return (0.0, True) if return_flag else 0.0
    value = float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
    return (value, False) if return_flag else value


def _cell_cosines(data: np.ndarray, proto: np.ndarray) -> np.ndarray:
    flat = data.reshape(data.shape[0], -1)
    norms = np.linalg.norm(flat, axis=0) * np.linalg.norm(proto)
    dots = proto @ flat
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(norms >= ZERO_NORM, dots / np.where(norms > 0, norms, 1.0), 0.0)
    return out.reshape(data.shape[1:])


def propagate_pseudo_label(src_fm: FeatureMap, src_mask, dst_fm: FeatureMap,
                           q: float | None = None) -> tuple[np.ndarray, bool]:
    """Predict the source region in ``dst_fm`` by dual-prototype cosine assignment.

    Returns the feature-resolution mask and whether the top-q fallback fired.
    Propagating onto identical features returns the source mask unchanged.
    """
    fg_mask = _feature_mask(src_fm, src_mask)
    if src_fm.data.shape != dst_fm.data.shape:
        raise DataError(f"feature grids differ: {src_fm.data.shape} vs {dst_fm.data.shape}")
    if np.array_equal(src_fm.data, dst_fm.data):
        return fg_mask.copy(), False
    fg = masked_average_pool(src_fm, fg_mask).vector
    bg_weights = 1.0 - fg_mask
    if bg_weights.sum() > 0:
        bg = masked_average_pool(src_fm, bg_weights).vector
        fg_cos = _cell_cosines(dst_fm.data, fg)
        out = (fg_cos > _cell_cosines(dst_fm.data, bg)).astype(np.float64)
    else:
        fg_cos = _cell_cosines(dst_fm.data, fg)
        out = np.ones_like(fg_cos)
    if out.any():
        return out, False
    q = float(fg_mask.mean()) if q is None else q
    count = max(1, int(round(q * fg_cos.size)))
    order = np.argsort(-fg_cos.ravel(), kind="stable")[:count]
    out = np.zeros(fg_cos.size)
    out[order] = 1.0
    return out.reshape(fg_cos.shape), True


def _encoder(encoder) -> ReferenceEncoder:
    if isinstance(encoder, ReferenceEncoder):
        return encoder
    if isinstance(encoder, EncoderSpec):
        if encoder.kind != "reference":
            raise DataError("augmented images need the reference encoder; file features cannot encode them")
        return get_encoder(encoder)
    raise DataError(f"not an encoder: {encoder!r}")


def intra_class_values(src_fm: FeatureMap, src_mask, target_fms: list[FeatureMap]) -> tuple[np.ndarray, list[int]]:
    """Similarity of the source prototype to each target's propagated prototype.

    Returns the values and the indices of the targets they belong to; targets
    whose propagated region or prototype is degenerate are left out.
    """
    anchor = masked_average_pool(src_fm, src_mask)
    values, kept = [], []
    for k, fm in enumerate(target_fms):
        pred, _ = propagate_pseudo_label(src_fm, src_mask, fm)
        try:
            proto = masked_average_pool(fm, pred)
        except EmptyMaskError:
            continue
        value, zero = cosine(anchor, proto, return_flag=True)
        if zero:
            continue
        values.append(value)
        kept.append(k)
    return np.array(values), kept


def similarity_estimate(src: tuple, targets: list, encoder=EncoderSpec(), anatomy: tuple | None = None) \
        -> SimilarityDistribution:
    """Intra-class similarity distribution of ``src = (image, mask)`` over ``targets``."""
    if not targets:
        raise InsufficientTargetsError("need at least one target image")
    enc = _encoder(encoder)
    image, mask = src
    src_fm = enc.encode(image)
    values, _ = intra_class_values(src_fm, mask, [enc.encode(t) for t in targets])
    if values.size == 0:
        raise InsufficientTargetsError("every target was degenerate")
    return SimilarityDistribution(values, "intra_class", anatomy)


@dataclass(frozen=True)
class IntraClassRecord:
    """One pseudo-anatomy's intra-class distribution and the target image of each value."""

    image_id: str
    superpixel_id: int
    target_ids: tuple[str, ...]
    distribution: SimilarityDistribution


def intra_class_corpus(feature_maps: dict[str, FeatureMap], anatomies) -> list[IntraClassRecord]:
    """Intra-class distributions for every pseudo-anatomy against every other image.

    ``anatomies`` are :class:`augopt.superpixel.PseudoAnatomy` records whose
    ``image_id`` keys into ``feature_maps``. Anatomies with no usable target
    are logged and dropped.
    """
    if len(feature_maps) < 2:
        raise InsufficientTargetsError("need >=2 images for intra-class similarity")
    ids = list(feature_maps)
    records = []
    for an in anatomies:
        others = [k for k in ids if k != an.image_id]
        values, kept = intra_class_values(feature_maps[an.image_id], an.mask, [feature_maps[k] for k in others])
        if values.size == 0:
            log.warning("anatomy (%s, %d): no usable target, dropped", an.image_id, an.superpixel_id)
            continue
        dist = SimilarityDistribution(values, "intra_class", (an.image_id, an.superpixel_id))
        records.append(IntraClassRecord(an.image_id, an.superpixel_id, tuple(others[k] for k in kept), dist))
    return records


class PrototypeObjective:
    """Per-draw cosine between an anchor prototype and pooled augmented features.

    Usable as the ``objective`` of :func:`augopt.augment.batch_objective_gradient`.
    """

    def __init__(self, encoder: ReferenceEncoder, anchor: np.ndarray):
        self.encoder = encoder
        self.anchor = np.asarray(anchor, dtype=np.float64)
        self.anchor_norm = float(np.linalg.norm(self.anchor))

    def __call__(self, images, masks, need_grad: bool = False, chunk: int = 4):
        # small chunks keep the encoder's working set in cache
        parts = [self._evaluate(images[i:i + chunk], masks[i:i + chunk], need_grad)
                 for i in range(0, len(images), chunk)]
        values = np.concatenate([p[0] for p in parts])
        if not need_grad:
            return values, None, None
        return values, np.concatenate([p[1] for p in parts]), np.concatenate([p[2] for p in parts])

    def _evaluate(self, images, masks, need_grad):
        enc = self.encoder
        n, h, w = images.shape
        feats, cache = enc.forward(images)
        weights = downsample_mask(masks, enc.stride)  # (n, h', w')
        occ = weights.sum(axis=(1, 2))
        safe_occ = np.where(occ > 0, occ, 1.0)
        protos = np.einsum("nchw,nhw->nc", feats, weights) / safe_occ[:, None]
        norms = np.linalg.norm(protos, axis=1)
        ok = (occ > 0) & (norms >= ZERO_NORM) & (self.anchor_norm >= ZERO_NORM)
        denom = np.where(ok, norms * self.anchor_norm, 1.0)
        raw = protos @ self.anchor / denom
        values = np.where(ok, np.clip(raw, -1.0, 1.0), 0.0)
        if not need_grad:
            return values, None, None
        safe_norm2 = np.where(ok, norms**2, 1.0)
        d_proto = self.anchor[None] / denom[:, None] - raw[:, None] * protos / safe_norm2[:, None]
        d_proto[~ok] = 0.0
        d_proto /= safe_occ[:, None]
        d_feats = d_proto[:, :, None, None] * weights[:, None]
        d_weights = np.einsum("nc,nchw->nhw", d_proto, feats) - (d_proto * protos).sum(axis=1)[:, None, None]
        d_masks = downsample_mask_adjoint(d_weights, enc.stride, (h, w))
        d_images = enc.backward(cache, d_feats)
        return values, d_images, d_masks


def anchor_prototype(encoder: ReferenceEncoder, image, mask) -> np.ndarray:
    return masked_average_pool(encoder.encode(image), mask).vector


def build_s_aug(src: tuple, params: AugmentationParams, B: int, encoder=EncoderSpec(),
                mode: str = "boundary", key: RngKey = RngKey(0), anatomy: tuple | None = None,
                min_overlap: float = MIN_OVERLAP, max_retries: int = MAX_RETRIES) -> SimilarityDistribution:
    """Intra-instance similarity distribution from ``B`` augmented copies of ``src``."""
    enc = _encoder(encoder)
    image, mask = np.asarray(src[0], dtype=np.float64), np.asarray(src[1], dtype=np.float64)
    objective = PrototypeObjective(enc, anchor_prototype(enc, image, mask))
    batch = augment_batch(image, mask, params, B, mode, key, min_overlap, max_retries)
    if not batch.draws:
        raise DegenerateAnatomyError(f"anatomy {anatomy}: all {B} draws were degenerate")
    values = objective(batch.images, batch.masks)[0]
    return SimilarityDistribution(values, "intra_instance", anatomy)


@dataclass(frozen=True)
class SyntheticFeatureSpec:
    """Pooled features ``v = [a, c]``: per-sample instance block ``a``, shared class block ``c``."""

    m: int = 64
    k: int = 16
    n: int = 200
    class_norm: float = 1.0
    instance_norm: float = 1.0

    def __post_init__(self):
        if not 0 < self.k < self.m or self.n < 2:
            raise DataError("need 0 < k < m and n >= 2")

    @property
    def shared_block_value(self) -> float:
        """Expected cosine when instance blocks are uncorrelated."""
        c2, a2 = self.class_norm**2, self.instance_norm**2
        return c2 / (c2 + a2)


def synthetic_feature_vectors(spec: SyntheticFeatureSpec, rng: np.random.Generator) -> np.ndarray:
    """``n`` vectors whose first ``m - k`` channels are random unit-direction instance blocks."""
    c = rng.standard_normal(spec.k)
    c *= spec.class_norm / np.linalg.norm(c)
    a = rng.standard_normal((spec.n, spec.m - spec.k))
    a *= spec.instance_norm / np.linalg.norm(a, axis=1, keepdims=True)
    return np.hstack([a, np.broadcast_to(c, (spec.n, spec.k))])


def intra_class_from_vectors(vectors: np.ndarray) -> SimilarityDistribution:
    """Similarity of the first vector to each of the others."""
    anchor = vectors[0]
    return SimilarityDistribution(np.array([cosine(anchor, v) for v in vectors[1:]]), "intra_class")
